//! The `come` command line.
//!
//! Every command resolves a [`RunConfig`] from `--config`, `--seed` and
//! repeated `--set key=value` overrides, writes its outputs under `--out`
//! and finishes with a `manifest.json` echoing the resolved config.
//!
//! Exit status is 0 on success, 1 on a validation error (one line on
//! stderr starting with `ERROR:`) and 2 on a runtime failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::clustering::{fine2coarse, multistep};
use crate::container::{decode_dataset, sha256_hex, write_dataset_dir};
use crate::datagen::gen_dataset;
use crate::error::{ComeError, Result};
use crate::harness::{
    ablation_csv, eval_csv, evaluate, gradient_suite, gradsuite_table, load_data, load_model, route_dump,
    run_ablations, sweep, sweep_csv, thread_count, train, write_run, AblationRow, RunConfig, SweepAxis, Variant,
    MANIFEST_FILE,
};
use crate::model::ClusterStrategy;
use crate::numerics::{Mat, Seeds, Stream};

/// Relative-error bound of the gradient suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Finite-difference step of the gradient suite.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "come", version, about = "Collaborative mixture of heterogeneous experts on synthetic multi-source data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config, or a manifest.json from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted config override such as `router.top_k=3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset: train.bin, test.bin, dataset.json.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model: metrics.csv, balance.csv, eval.csv, checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on both splits: eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train the full model and the five single-removal variants: ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// One run per value of an axis: sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `experts` (4, 8, 10) or `topk` (1, 2, 3, 4).
        #[arg(long)]
        axis: String,
    },
    /// Cluster the tokens of a feature file: assignments.csv.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Feature container such as train.bin.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Cluster only the first N samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Finite-difference check of every trainable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Run the full suite over ten seeds instead of only `--seed`.
        #[arg(long)]
        all: bool,
    },
    /// Dump the routing of a checkpoint on the test split: routes.csv, projections.csv.
    RouteDump {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Cluster { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::RouteDump { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::Cluster { .. } => "cluster",
            Command::Gradcheck { .. } => "gradcheck",
            Command::RouteDump { .. } => "route-dump",
        }
    }
}

/// Config from `--config`, then `--set` overrides, then `--seed`.
pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Manifest of a command other than `train`.
#[derive(Debug, Serialize)]
struct CommandManifest<'a> {
    kind: &'static str,
    command: &'a str,
    version: &'static str,
    config: &'a RunConfig,
    /// SHA-256 of every file written, by file name.
    outputs: BTreeMap<String, String>,
}

struct Output {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl Output {
    fn new(c: &Common) -> Result<Self> {
        let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        Ok(Output {
            dir,
            written: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.dir.join(name))?;
        self.written.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let m = CommandManifest {
            kind: "manifest",
            command,
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            outputs: self.written,
        };
        fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(self.dir)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn parse_and_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.kind().as_str().map(str::to_string).unwrap_or_else(|| e.to_string());
            let detail = e.to_string();
            let first = detail
                .lines()
                .find(|l| l.starts_with("error:"))
                .map(|l| l.trim_start_matches("error:").trim().to_string())
                .unwrap_or(msg);
            eprintln!("ERROR: {}", one_line(&first));
            return 1;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR: {}", one_line(&e.to_string()));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs one parsed command.
pub fn run(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = resolve_config(common)?;
    let threads = thread_count()?;
    let name = cmd.name();
    match cmd {
        Command::GenData { .. } => {
            let out = Output::new(common)?;
            let g = gen_dataset(&cfg.data.generator, cfg.data_seed())?;
            let side = write_dataset_dir(&out.dir, &g.train, &g.test, &cfg.data.generator, cfg.data_seed())?;
            let mut out = out;
            for f in [crate::container::TRAIN_FILE, crate::container::TEST_FILE, crate::container::SIDECAR_FILE] {
                out.record(f)?;
            }
            let dir = out.finish(name, &cfg)?;
            println!(
                "wrote {} train / {} test samples to {}",
                side.train_samples,
                side.test_samples,
                dir.display()
            );
        }
        Command::Train { .. } => {
            let data = load_data(&cfg)?;
            let out = train(&cfg, &data)?;
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let m = write_run(&dir, &cfg, &data, &out)?;
            let e = &out.final_eval;
            println!(
                "steps {}  test accuracy {:.4}  purity {:.4}  admitted purity {:.4}  utilization cv {:.4}",
                m.steps_completed, e.accuracy, e.purity, e.admitted_purity, e.utilization_cv
            );
            if let Some(reason) = out.diverged {
                return Err(ComeError::Diverged {
                    step: out.steps_completed,
                    reason: format!("{reason}; last finite checkpoint written to {}", dir.display()),
                });
            }
        }
        Command::Eval { checkpoint, .. } => {
            let data = load_data(&cfg)?;
            let model = load_model(&cfg, &data.generator, checkpoint)?;
            let b = cfg.train.batch_size;
            let tr = evaluate(&model, &data.train, b, cfg.seed, None)?;
            let te = evaluate(&model, &data.test, b, cfg.seed, None)?;
            let mut out = Output::new(common)?;
            out.write("eval.csv", eval_csv(&[("train", &tr), ("test", &te)]).as_bytes())?;
            out.finish(name, &cfg)?;
            println!("train accuracy {:.4}  test accuracy {:.4}  test purity {:.4}", tr.accuracy, te.accuracy, te.purity);
        }
        Command::Ablate { seeds, .. } => {
            if seeds.is_empty() {
                return Err(ComeError::InvalidArgument("--seeds is empty".into()));
            }
            let rows = run_ablations(&cfg, seeds, threads)?;
            let mut out = Output::new(common)?;
            out.write("ablation.csv", ablation_csv(&rows).as_bytes())?;
            out.write("ablation_summary.csv", ablation_summary(&rows).as_bytes())?;
            out.finish(name, &cfg)?;
            print!("{}", ablation_summary(&rows));
        }
        Command::Sweep { axis, .. } => {
            let axis = SweepAxis::parse(axis)?;
            let rows = sweep(&cfg, axis, threads)?;
            let mut out = Output::new(common)?;
            let csv = sweep_csv(&rows);
            out.write("sweep.csv", csv.as_bytes())?;
            out.finish(name, &cfg)?;
            print!("{csv}");
        }
        Command::Cluster { data, samples, .. } => {
            let ds = decode_dataset(&fs::read(data)?)?;
            let n = samples.unwrap_or(ds.len()).min(ds.len());
            if n == 0 {
                return Err(ComeError::InvalidArgument(format!("{} holds no samples", data.display())));
            }
            let (batch, _) = ds.batch(&(0..n).collect::<Vec<_>>())?;
            let csv = cluster_csv(&batch.features, &cfg)?;
            let mut out = Output::new(common)?;
            out.write("assignments.csv", csv.as_bytes())?;
            out.finish(name, &cfg)?;
            println!("clustered {} tokens", batch.len());
        }
        Command::Gradcheck { all, .. } => {
            let seeds: Vec<u64> = if *all { (0..10).collect() } else { vec![cfg.seed] };
            let rows = gradient_suite(&seeds, GRADCHECK_STEP)?;
            let table = gradsuite_table(&rows, GRADCHECK_TOLERANCE);
            print!("{table}");
            if common.out.is_some() {
                let mut out = Output::new(common)?;
                let mut csv = String::from("component,seeds,coords,max_rel_error\n");
                for r in &rows {
                    let _ = writeln!(csv, "{},{},{},{}", r.component, r.seeds, r.coords, r.max_rel_error);
                }
                out.write("gradcheck.csv", csv.as_bytes())?;
                out.finish(name, &cfg)?;
            }
            if let Some(bad) = rows.iter().find(|r| !r.passed(GRADCHECK_TOLERANCE)) {
                return Err(ComeError::CheckFailed(format!(
                    "gradient check failed for {} (max relative error {:e})",
                    bad.component, bad.max_rel_error
                )));
            }
        }
        Command::RouteDump { checkpoint, .. } => {
            let data = load_data(&cfg)?;
            let model = load_model(&cfg, &data.generator, checkpoint)?;
            let dump = route_dump(&model, &data.test, cfg.train.batch_size, cfg.seed)?;
            let mut out = Output::new(common)?;
            out.write("routes.csv", dump.routes_csv().as_bytes())?;
            out.write("projections.csv", dump.projections_csv().as_bytes())?;
            let summary = serde_json::json!({
                "tokens": dump.tokens,
                "rows": dump.rows.len(),
                "overflow_rows": dump.overflow_rows(),
                "purity": dump.purity.purity(),
                "admitted_purity": dump.purity.admitted_purity(),
                "explained_variance_ratio": dump.explained_variance_ratio,
            });
            out.write("route_summary.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
            out.finish(name, &cfg)?;
            println!(
                "{} routes over {} tokens ({} overflow); purity {:.4}",
                dump.rows.len(),
                dump.tokens,
                dump.overflow_rows(),
                dump.purity.purity()
            );
        }
    }
    Ok(())
}

/// Mean accuracy, purity and utilization CV per variant.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seeds,mean_accuracy,mean_purity,mean_utilization_cv\n");
    for v in Variant::ALL {
        let r: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
        if r.is_empty() {
            continue;
        }
        let n = r.len() as f64;
        let mean = |f: fn(&AblationRow) -> f64| r.iter().map(|x| f(x)).sum::<f64>() / n;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            v.name(),
            r.len(),
            mean(|x| x.accuracy),
            mean(|x| x.purity),
            mean(|x| x.utilization_cv)
        );
    }
    s
}

/// Cluster assignments of `points` under the config's strategy: fine and
/// coarse ids for fine2coarse, one column per outer step for multistep.
pub fn cluster_csv(points: &Mat, cfg: &RunConfig) -> Result<String> {
    let c = &cfg.model.clustering;
    let mut rng = Seeds::new(cfg.seed).stream(Stream::Cluster);
    let mut s = String::new();
    match c.strategy {
        ClusterStrategy::Fine2coarse => {
            let m = fine2coarse(points, c.fine, c.coarse, c.max_iters, &mut rng)?;
            s.push_str("token_index,fine_id,coarse_id\n");
            for t in 0..m.len() {
                let (f, k) = m.assignment(t)?;
                let _ = writeln!(s, "{t},{f},{k}");
            }
        }
        ClusterStrategy::Multistep => {
            let (_, state) = multistep(points, c.multistep, &mut rng)?;
            s.push_str("token_index");
            for r in &state.steps {
                let _ = write!(s, ",step_{}", r.step);
            }
            s.push('\n');
            for t in 0..points.rows() {
                let _ = write!(s, "{t}");
                for r in &state.steps {
                    let _ = write!(s, ",{}", r.assignments[t]);
                }
                s.push('\n');
            }
        }
        ClusterStrategy::None => {
            return Err(ComeError::InvalidConfig(
                "clustering strategy is none; set model.clustering.strategy".into(),
            ))
        }
    }
    Ok(s)
}

/// Convenience for examples and tests: runs the CLI on string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    parse_and_dispatch(std::iter::once("come").chain(args.iter().copied()))
}
