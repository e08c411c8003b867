//! Command-line experiment runner: fixture generation, single runs, the
//! ratio/ablation sweeps, and report aggregation over run directories.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::protocol::Setup;
use crate::synthdata::gen_dataset;
use crate::trainer::{
    run_dir_name, run_experiment, write_run_artifacts, ExperimentConfig, ExperimentReport, Method,
};

#[derive(Parser, Debug)]
#[command(
    name = "recall",
    about = "Replay-based class-incremental semantic segmentation benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct CommonArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Forbid HTTP sources; retrieval methods then need a fixture directory.
    #[arg(long)]
    offline: bool,
    /// Reduced step multipliers for CI-scale runs.
    #[arg(long)]
    fast: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset fixture (PNG pairs plus manifest).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Execute one experiment config and write its run directory.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a sweep: the interleave-ratio grid or the method-ablation matrix.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep kind: "ratio" or "table2".
        #[arg(long)]
        kind: String,
    },
    /// Render accumulated run directories into combined CSV/JSON tables.
    Report {
        /// Directories containing report.json files (searched recursively).
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report-out")]
        out: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::from_toml(&text).context("parsing config")?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if common.offline {
        cfg.replay.offline = true;
        cfg.replay.source_url = None;
    } else if cfg.replay.source_url.is_none() {
        if let Ok(url) = std::env::var("RECALL_SOURCE_URL") {
            if !url.is_empty() {
                cfg.replay.source_url = Some(url);
            }
        }
    }
    if common.fast {
        cfg.apply_fast();
    }
    cfg.validate().context("validating config")?;
    Ok(cfg)
}

fn cmd_gen_data(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let (train, test) = gen_dataset(&cfg.scene, cfg.data.n_train, cfg.data.n_test)
        .context("generating dataset")?;
    crate::synthdata::save_dataset(&common.out, &train, &test).context("writing fixture")?;
    println!(
        "wrote {} train + {} test samples to {}",
        train.len(),
        test.len(),
        common.out.display()
    );
    Ok(())
}

fn execute_run(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf> {
    let output = run_experiment(cfg).context("running experiment")?;
    let dir = out_root.join(run_dir_name(cfg));
    write_run_artifacts(&dir, &output).context("writing run artifacts")?;
    let last = output.report.steps.last().expect("at least one step");
    println!(
        "{} {} seed={} steps={} final mIoU(all)={}",
        cfg.method.name(),
        cfg.schedule.setup,
        cfg.run.seed,
        output.report.steps.len(),
        last.miou_all
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(dir)
}

fn cmd_run(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = execute_run(&cfg, &common.out)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

/// The interleave grid: every ratio keeps the batch as small as possible
/// while staying divisible by r_new + r_old.
pub const RATIO_GRID: [(u32, u32); 5] = [(4, 1), (2, 1), (1, 1), (1, 2), (1, 4)];

fn sweep_batch_size(base: usize, r_new: u32, r_old: u32) -> usize {
    let ratio = (r_new + r_old) as usize;
    base.div_ceil(ratio) * ratio
}

fn cmd_sweep(common: &CommonArgs, kind: &str) -> Result<()> {
    let base = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    match kind {
        "ratio" => {
            let mut rows = String::from("r_new,r_old,batch_size,miou_old,miou_new,miou_all\n");
            for (r_new, r_old) in RATIO_GRID {
                let mut cfg = base.clone();
                cfg.training.r_new = r_new;
                cfg.training.r_old = r_old;
                cfg.training.batch_size =
                    sweep_batch_size(base.training.batch_size, r_new, r_old);
                execute_run(&cfg, &common.out)?;
                let report = read_report(&common.out.join(run_dir_name(&cfg)))?;
                let last = report.steps.last().expect("steps");
                rows.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r_new,
                    r_old,
                    cfg.training.batch_size,
                    csv_opt(last.miou_old),
                    csv_opt(last.miou_new),
                    csv_opt(last.miou_all),
                ));
            }
            std::fs::write(common.out.join("sweep_ratio.csv"), rows)?;
            println!("wrote {}", common.out.join("sweep_ratio.csv").display());
        }
        "table2" => {
            let methods = [
                Method::InpaintOnly,
                Method::ReplayOnlyGen,
                Method::ReplayOnlyRetrieval,
                Method::RecallGen,
                Method::RecallRetrieval,
            ];
            let mut rows = String::from("method,setup,miou_old,miou_new,miou_all\n");
            for method in methods {
                for setup in [Setup::Disjoint, Setup::Overlapped] {
                    let mut cfg = base.clone();
                    cfg.method = method;
                    cfg.schedule.setup = setup;
                    execute_run(&cfg, &common.out)?;
                    let report = read_report(&common.out.join(run_dir_name(&cfg)))?;
                    let last = report.steps.last().expect("steps");
                    rows.push_str(&format!(
                        "{},{},{},{},{}\n",
                        method.name(),
                        setup,
                        csv_opt(last.miou_old),
                        csv_opt(last.miou_new),
                        csv_opt(last.miou_all),
                    ));
                }
            }
            std::fs::write(common.out.join("sweep_table2.csv"), rows)?;
            println!("wrote {}", common.out.join("sweep_table2.csv").display());
        }
        other => bail!("unknown sweep kind '{other}' (expected 'ratio' or 'table2')"),
    }
    Ok(())
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn read_report(dir: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(dir.join("report.json"))
        .with_context(|| format!("reading {}", dir.join("report.json").display()))?;
    serde_json::from_str(&text).context("parsing report.json")
}

fn find_reports(root: &Path, found: &mut Vec<PathBuf>) {
    if root.join("report.json").is_file() {
        found.push(root.to_path_buf());
    }
    if let Ok(entries) = std::fs::read_dir(root) {
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for d in dirs {
            find_reports(&d, found);
        }
    }
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut dirs = Vec::new();
    for root in runs {
        find_reports(root, &mut dirs);
    }
    if dirs.is_empty() {
        bail!("no report.json found under the given directories");
    }
    dirs.sort();
    dirs.dedup();
    std::fs::create_dir_all(out)?;
    let mut combined = String::from(
        "run,method,setup,seed,step,miou_old,miou_new,miou_all,pa_new,mem_bytes\n",
    );
    let mut reports = Vec::new();
    for dir in &dirs {
        let report = read_report(dir)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for s in &report.steps {
            combined.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                name,
                report.config.method.name(),
                report.config.schedule.setup,
                report.config.run.seed,
                s.step,
                csv_opt(s.miou_old),
                csv_opt(s.miou_new),
                csv_opt(s.miou_all),
                csv_opt(s.pa_new),
                s.memory.total_bytes,
            ));
        }
        reports.push(report);
    }
    std::fs::write(out.join("combined.csv"), combined)?;
    let json = serde_json::to_string_pretty(&reports)?;
    std::fs::write(out.join("combined.json"), json)?;
    println!(
        "aggregated {} runs into {}",
        dirs.len(),
        out.join("combined.csv").display()
    );
    Ok(())
}

/// Entry point shared by the binary and tests; returns the process exit code.
pub fn cli_run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/diagnostic text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Run { common } => cmd_run(common),
        Command::Sweep { common, kind } => cmd_sweep(common, kind),
        Command::Report { runs, out } => cmd_report(runs, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
