//! Check suites and the scaling benchmark shared by the CLI and the acceptance run.

pub mod bench;
pub mod checks;
pub mod gradient;

pub use bench::{run_bench, BenchReport, BenchRow};
pub use checks::Check;
pub use gradient::{fd_noise, ModelObjective};

use std::str::FromStr;

use crate::blocks::Config;
use crate::error::{arg_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Invariants,
    Grad,
    Oracle,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invariants" => Ok(Suite::Invariants),
            "grad" => Ok(Suite::Grad),
            "oracle" => Ok(Suite::Oracle),
            _ => Err(arg_err!("unknown suite '{s}' (expected invariants, grad or oracle)")),
        }
    }
}

/// Runs a suite at `cfg`. `fault` names a parameter whose analytic gradient
/// is deliberately corrupted (grad suite only), as a negative control.
pub fn run_suite(suite: Suite, cfg: &Config, fault: Option<String>) -> Result<Vec<Check>> {
    let seed = cfg.model.seed;
    match suite {
        Suite::Invariants => {
            let dir = std::env::temp_dir().join(format!("pointssm-check-{}", std::process::id()));
            std::fs::create_dir_all(&dir)?;
            let roundtrip = checks::checkpoint_roundtrip(&cfg.model, &dir);
            let _ = std::fs::remove_dir_all(&dir);
            Ok(vec![
                checks::delta_budget(seed)?,
                checks::state_permutation(seed, 50)?,
                checks::reversal(&cfg.model, 4)?,
                checks::zoh_first_order(seed)?,
                checks::flops_affine(),
                checks::ssc_null(cfg)?,
                roundtrip?,
            ])
        }
        Suite::Grad => Ok(vec![checks::model_gradient(&cfg.model, fault)?]),
        Suite::Oracle => Ok(vec![checks::scan_oracle(seed, 100)?]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_tiny_config() {
        let cfg = Config::tiny();
        for suite in [Suite::Invariants, Suite::Oracle] {
            for c in run_suite(suite, &cfg, None).unwrap() {
                assert!(c.passed, "{}: {}", c.name, c.detail);
            }
        }
        assert!("grads".parse::<Suite>().is_err());
    }

    #[test]
    fn gradient_suite_flags_injected_fault() {
        let cfg = Config::tiny();
        let clean = run_suite(Suite::Grad, &cfg, None).unwrap();
        assert!(clean[0].passed, "{}", clean[0].detail);
        let faulty = run_suite(Suite::Grad, &cfg, Some("decoder.head.bias".into())).unwrap();
        assert!(!faulty[0].passed);
        assert!(faulty[0].detail.contains("decoder.head.bias"));
    }
}
