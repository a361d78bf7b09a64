//! Wall-time scaling of the encoder forward pass in the number of tokens.

use std::fmt::Write as _;
use std::time::Instant;

use crate::blocks::{encoder, init_model, ModelConfig, ENCODER};
use crate::error::{arg_err, Result};
use crate::numerics::Tape;
use crate::pointops::{synth_shape, ShapeKind};
use crate::pretrain::Sample;
use crate::sscan::scan_flops;

/// Below this a single timing is considered too coarse; repeats are raised.
const MIN_SAMPLE_MS: f64 = 2.0;
const MAX_REPEATS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    /// Median over repeats.
    pub wall_ms: f64,
    /// Scan multiply-adds over all blocks and both directions.
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln wall_ms` against `ln n`.
    pub slope: f64,
    pub r2: f64,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "n,wall_ms,flops,slope";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.n, r.wall_ms, r.flops, self.slope);
        }
        out
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, r^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { slope * sxy / syy };
    (slope, r2)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Times the encoder forward pass at each token count in `lengths`, with
/// the state count and all widths taken from `cfg`. Each length uses a
/// sphere of `2 n` points; grouping is done before timing starts.
pub fn run_bench(cfg: &ModelConfig, lengths: &[usize], repeats: usize) -> Result<BenchReport> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(arg_err!("bench: need at least two strictly increasing lengths, got {lengths:?}"));
    }
    if repeats == 0 {
        return Err(arg_err!("bench: repeats must be positive"));
    }
    let params = init_model(cfg).subset(&format!("{ENCODER}."));
    let mut rows = Vec::with_capacity(lengths.len());
    let mut warnings = Vec::new();
    for &n in lengths {
        let c = ModelConfig { groups: n, ..cfg.clone() };
        let cloud = synth_shape(ShapeKind::Sphere, (2 * n).max(c.group_size).max(c.states).max(8), c.seed)?;
        let sample = Sample::new(&cloud, &c)?;
        let time_once = || -> Result<f64> {
            let start = Instant::now();
            let mut tape = Tape::no_grad();
            let out = encoder(&mut tape, &params, &c, &sample.grouped, &sample.state_pos)?;
            std::hint::black_box(tape.value(out.states));
            Ok(start.elapsed().as_secs_f64() * 1e3)
        };
        time_once()?;
        let mut reps = repeats;
        let mut times: Vec<f64> = (0..reps).map(|_| time_once()).collect::<Result<_>>()?;
        while median(&mut times) < MIN_SAMPLE_MS && reps < MAX_REPEATS {
            warnings.push(format!("n={n}: median {:.3} ms is near timer resolution; repeats {reps} -> {}", median(&mut times), reps * 4));
            reps *= 4;
            times = (0..reps).map(|_| time_once()).collect::<Result<_>>()?;
        }
        let flops = 2 * c.depth as u64 * scan_flops(n as u64, c.states as u64, c.inner as u64);
        rows.push(BenchRow { n, wall_ms: median(&mut times), flops });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.wall_ms.max(1e-9).ln()).collect();
    let (slope, r2) = linear_fit(&lx, &ly);
    Ok(BenchReport { rows, slope, r2, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_power_law() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| (3.0 * v).ln()).collect();
        let (b, r2) = linear_fit(&x, &y);
        assert!((b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_bench_shape() {
        let r = run_bench(&ModelConfig::tiny(), &[16, 32], 1).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].flops, 2 * r.rows[0].flops);
        assert!(r.to_csv().starts_with("n,wall_ms,flops,slope\n"));
        assert!(run_bench(&ModelConfig::tiny(), &[32, 16], 1).is_err());
    }
}
