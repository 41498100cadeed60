use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbicross::harness::{
    persist, pivot_table, run_pipeline, sweep, sweep_csv, validate_config, write_atomic, ExperimentConfig, Mode,
    RunReport, SweepGrid,
};
use fedbicross::{Error, Result};

#[derive(Parser)]
#[command(name = "fedbicross", version, about = "One-shot federated learning simulator")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run a grid over alpha x K x mode x seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        clusters: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "fedbicross,fedavg1")]
        modes: Vec<Mode>,
        /// Seeds to run; `--seed` is ignored by sweeps.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Summarize a saved report.
    Inspect {
        /// A report.json file or a run directory containing one.
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "FEDBICROSS_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "FEDBICROSS_OUT")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut cfg = validate_config(&text)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn exit_code(class: &str) -> u8 {
    match class {
        "config" => 2,
        "input" => 3,
        "divergence" => 4,
        "io" => 5,
        "format" => 6,
        _ => 1,
    }
}

fn print_report(r: &RunReport) {
    println!("mode {}  seed {}  version {}", r.mode, r.seed, r.version);
    if let Some(c) = &r.clustering {
        println!(
            "clusters {}  assignment {:?}  inertia {:.6}",
            c.k, c.assignment, c.inertia
        );
    }
    if let Some(e) = &r.entropy {
        let clusters: Vec<String> = e.clusters.iter().map(|v| format!("{v:.4}")).collect();
        println!(
            "ensemble entropy  all {:.4}  per cluster [{}]",
            e.all_clients,
            clusters.join(", ")
        );
    }
    println!(
        "{:>6} {:>7} {:>6} {:>5} {:>9} {:>9}",
        "client", "cluster", "train", "test", "local", "accuracy"
    );
    for c in &r.clients {
        let k = c.cluster.map_or("-".to_string(), |k| k.to_string());
        println!(
            "{:>6} {:>7} {:>6} {:>5} {:>8.2}% {:>8.2}%",
            c.client,
            k,
            c.train_size,
            c.test_size,
            100.0 * c.local_accuracy,
            100.0 * c.accuracy
        );
    }
    if let Some(m) = r.mean_accuracy {
        println!("mean accuracy {:.2}%", 100.0 * m);
    }
    for t in &r.weights {
        if let Some(w) = t.weights.last() {
            let w: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
            println!("cluster {} final weights [{}]", t.cluster, w.join(", "));
        }
    }
    if !r.timings.is_empty() {
        let t: Vec<String> = r.timings.iter().map(|(k, v)| format!("{k} {v:.2}s")).collect();
        println!("timings {}", t.join(", "));
    }
    if let Some(e) = &r.error {
        println!("error ({}, stage {}): {}", e.class, e.stage, e.message);
    }
}

fn run(common: &Common, mode: Option<Mode>) -> Result<u8> {
    let mut cfg = common.load()?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let out = run_pipeline(&cfg)?;
    if let Some(dir) = &cfg.output_dir {
        persist(&out, dir, cfg.dump_trajectories)?;
    }
    print_report(&out.report);
    Ok(out.report.error.as_ref().map_or(0, |e| exit_code(&e.class)))
}

fn run_sweep(common: &Common, grid: SweepGrid) -> Result<u8> {
    let base = common.load()?;
    let rows = sweep(&base, &grid)?;
    let long = sweep_csv(&rows)?;
    let pivot = pivot_table(&rows)?;
    match &base.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_atomic(&dir.join("sweep.csv"), &long)?;
            write_atomic(&dir.join("sweep_pivot.csv"), &pivot)?;
        }
        None => print!("{}", String::from_utf8_lossy(&long)),
    }
    print!("{}", String::from_utf8_lossy(&pivot));
    Ok(if rows.iter().any(|r| r.error.is_some()) { 1 } else { 0 })
}

fn inspect(path: &Path) -> Result<u8> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let report = RunReport::from_json(&fs::read_to_string(&file)?)?;
    print_report(&report);
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Run { common, mode } => run(common, *mode),
        Command::Sweep {
            common,
            alphas,
            clusters,
            modes,
            seeds,
        } => run_sweep(
            common,
            SweepGrid {
                alphas: alphas.clone(),
                clusters: clusters.clone(),
                modes: modes.clone(),
                seeds: seeds.clone(),
            },
        ),
        Command::Inspect { path } => inspect(path),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error ({}): {e}", e.class());
            if let Error::Config(v) = &e {
                for x in v {
                    eprintln!("  {x}");
                }
            }
            ExitCode::from(exit_code(e.class()))
        }
    }
}
