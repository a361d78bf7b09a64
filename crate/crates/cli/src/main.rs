use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pointssm::blocks::{encoder, init_model, Config, ENCODER};
use pointssm::harness::{run_bench, run_suite, Suite};
use pointssm::numerics::{checkpoint, Tape};
use pointssm::pointops::{synth_shape, PointCloud, ShapeKind};
use pointssm::pretrain::{check_layout, encoder_params, run, RunPaths, Sample, Trainer};

/// Point-cloud encoder with a structural selective scan.
#[derive(Parser, Debug)]
#[command(name = "pointssm", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; missing keys take the full-size defaults.
    /// Without it, `check` and `bench` use the tiny model and the rest the full-size one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample one synthetic shape into a point file.
    Gen {
        /// sphere, cube, torus or plane
        kind: String,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a directory of synthetic shapes for pretraining.
    GenDataset {
        /// Clouds per kind.
        #[arg(long, default_value_t = 8)]
        per_kind: usize,
        /// Comma-separated kinds.
        #[arg(long, default_value = "sphere,cube,torus,plane")]
        kinds: String,
        /// Points per cloud; defaults to `train.points` from the config.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a check suite and print a pass/fail table.
    Check {
        /// invariants, grad or oracle
        suite: String,
        /// Corrupt the analytic gradient of this parameter (grad suite) as a negative control.
        #[arg(long, value_name = "PARAM", num_args = 0..=1, default_missing_value = "decoder.head.bias")]
        inject_fault: Option<String>,
    },
    /// Time the encoder at increasing token counts and fit the log-log slope.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-point-modeling pretraining on a directory of point files.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Encode one cloud and write token and state features as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(g: &Global, fallback: fn() -> Config) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => fallback(),
    };
    if let Some(s) = g.seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

/// Writes through a sibling temporary file so a failure leaves nothing behind.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_kinds(list: &str) -> Result<Vec<ShapeKind>> {
    Ok(list.split(',').map(|s| s.trim().parse()).collect::<pointssm::Result<_>>()?)
}

fn cmd_gen(cfg: &Config, kind: &str, n: usize, out: &Path) -> Result<()> {
    let cloud = synth_shape(kind.parse()?, n, cfg.model.seed)?;
    cloud.write(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_gen_dataset(cfg: &Config, per_kind: usize, kinds: &str, points: Option<usize>, out: &Path) -> Result<()> {
    let kinds = parse_kinds(kinds)?;
    let points = points.unwrap_or(cfg.train.points);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = pointssm::pretrain::toy_dataset(&kinds, per_kind, points, cfg.model.seed)?;
    for (i, (cloud, label)) in data.iter().enumerate() {
        let path = out.join(format!("{}_{:03}.xyz", kinds[*label].name(), i % per_kind));
        cloud.write(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} clouds of {points} points to {}", data.len(), out.display());
    Ok(())
}

fn cmd_check(cfg: &Config, suite: &str, fault: Option<String>) -> Result<bool> {
    let suite: Suite = suite.parse()?;
    if fault.is_some() && suite != Suite::Grad {
        bail!(pointssm::Error::Argument("--inject-fault applies to the grad suite only".into()));
    }
    let checks = run_suite(suite, cfg, fault)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!("{:<width$}  {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn cmd_bench(cfg: &Config, lengths: &[usize], repeats: usize, out: Option<&Path>) -> Result<()> {
    let report = run_bench(&cfg.model, lengths, repeats)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let csv = report.to_csv();
    match out {
        Some(p) => write_atomic(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!("log-log slope {:.4}, R^2 {:.4}", report.slope, report.r2);
    Ok(())
}

fn read_dataset(dir: &Path, cfg: &Config) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        bail!(pointssm::Error::Argument(format!("data directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "xyz" || x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(pointssm::Error::Argument(format!("no .xyz or .txt point files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let cloud = PointCloud::read(p).with_context(|| format!("reading {}", p.display()))?;
            Sample::new(&cloud, &cfg.model).with_context(|| format!("grouping {}", p.display()))
        })
        .collect()
}

fn cmd_pretrain(cfg: Config, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let samples = read_dataset(data, &cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let paths = RunPaths::in_dir(out);
    let mut trainer = if resume && paths.checkpoint.exists() {
        let t = Trainer::load(cfg, &paths.checkpoint).with_context(|| format!("resuming from {}", paths.checkpoint.display()))?;
        eprintln!("resuming at epoch {} (step {})", t.epoch, t.step());
        t
    } else {
        Trainer::new(cfg)?
    };
    let total = trainer.config.train.epochs;
    run(&mut trainer, &samples, &paths, |epoch, steps| {
        let n = steps.len().max(1) as f64;
        let cd = steps.iter().map(|m| m.l_cd).sum::<f64>() / n;
        let ssc = steps.iter().map(|m| m.l_ssc).sum::<f64>() / n;
        eprintln!("epoch {epoch}/{total}  l_cd {cd:.6}  l_ssc {ssc:.3e}");
    })?;
    eprintln!("checkpoint {}", paths.checkpoint.display());
    Ok(())
}

fn cmd_embed(cfg: &Config, ckpt: &Path, cloud: &Path, out: &Path) -> Result<()> {
    let store = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let params = encoder_params(&store);
    let expected = init_model(&cfg.model).subset(&format!("{ENCODER}."));
    check_layout("checkpoint encoder", &expected, &params)?;
    let cloud = PointCloud::read(cloud).with_context(|| format!("reading {}", cloud.display()))?;
    let sample = Sample::new(&cloud, &cfg.model)?;
    let mut tape = Tape::no_grad();
    let enc = encoder(&mut tape, &params, &cfg.model, &sample.grouped, &sample.state_pos)?;
    let d = cfg.model.width;
    let mut csv = String::from("role,index");
    for j in 0..d {
        let _ = write!(csv, ",f{j}");
    }
    csv.push('\n');
    for (role, v) in [("token", enc.tokens), ("state", enc.states)] {
        let t = tape.value(v);
        for i in 0..t.rows() {
            let _ = write!(csv, "{role},{i}");
            for x in t.row(i) {
                let _ = write!(csv, ",{x}");
            }
            csv.push('\n');
        }
    }
    write_atomic(out, &csv)
}

/// 2 for broken internal invariants, 1 for everything the caller can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().any(|e| e.downcast_ref::<pointssm::Error>().is_some_and(pointssm::Error::is_internal));
    if internal {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let fallback = match cli.command {
        Command::Check { .. } | Command::Bench { .. } => Config::tiny,
        _ => Config::default,
    };
    let result = load_config(&cli.global, fallback).and_then(|cfg| match cli.command {
        Command::Gen { kind, n, out } => cmd_gen(&cfg, &kind, n, &out).map(|_| true),
        Command::GenDataset { per_kind, kinds, points, out } => cmd_gen_dataset(&cfg, per_kind, &kinds, points, &out).map(|_| true),
        Command::Check { suite, inject_fault } => cmd_check(&cfg, &suite, inject_fault),
        Command::Bench { lengths, repeats, out } => cmd_bench(&cfg, &lengths, repeats, out.as_deref()).map(|_| true),
        Command::Pretrain { data, out, resume } => cmd_pretrain(cfg, &data, &out, resume).map(|_| true),
        Command::Embed { checkpoint, cloud, out } => cmd_embed(&cfg, &checkpoint, &cloud, &out).map(|_| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
