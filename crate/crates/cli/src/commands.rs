use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fedproj::config::ExperimentConfig;
use fedproj::eval::{compare_aggregations, MetricsReport, Setting};
use fedproj::federation::{fedavg_baseline, partition_clients, run_experiment, ExperimentReport};
use fedproj::geometry::validate::{self, Fault, ValidationConfig};
use fedproj::geometry::write_binary;
use fedproj::incremental::run_incremental;
use fedproj::report::{self, Provenance};
use fedproj::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Command, FaultArg, GlobalOpts};

/// Files written by one command, listed in `manifest.json`.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: Option<String>,
    seeds: Vec<u64>,
    threads: usize,
    wall_time_seconds: f64,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Outputs { dir, files: Vec::new() })
    }

    fn create(&mut self, rel: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let path = self.dir.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.as_ref().to_path_buf());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn finish(self, command: &str, prov: Option<&Provenance>, seeds: Vec<u64>, threads: usize, started: Instant) -> Result<()> {
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = fs::read(self.dir.join(rel))?;
            files.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
        let manifest = Manifest {
            tool: "fedproj",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: prov.map(|p| p.config_sha256.clone()),
            seeds,
            threads,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            files,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(self.dir.join("manifest.json"))?), &manifest)?;
        Ok(())
    }
}

fn load_config(path: &Path, opts: &GlobalOpts) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    if opts.threads > 1 {
        cfg.federation.parallel = true;
    }
    Ok(cfg)
}

fn out_dir(opts: &GlobalOpts, cfg: Option<&ExperimentConfig>) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Provenance of the config as written, before command-line overrides that
/// leave results unchanged (thread count).
fn provenance(cfg: &ExperimentConfig) -> Result<Provenance> {
    let mut canonical = cfg.clone();
    canonical.federation.parallel = false;
    Provenance::new(&canonical)
}

pub fn dispatch(opts: &GlobalOpts, command: Command) -> Result<ExitCode> {
    let started = Instant::now();
    match command {
        Command::Run { config, baseline } => cmd_run(opts, &config, baseline, started),
        Command::SweepLambda { config } => cmd_sweep(opts, &config, started),
        Command::CompareAgg { config } => cmd_compare(opts, &config, started),
        Command::Incremental { config } => cmd_incremental(opts, &config, started),
        Command::ValidateGeometry { instances, inject_fault } => cmd_validate(opts, instances, inject_fault, started),
        Command::Partition { config } => cmd_partition(opts, &config, started),
    }
}

fn print_summary(rep: &ExperimentReport) {
    let mean = |s, l| rep.mean_accuracy(s, l);
    println!(
        "seed {} {}: GM-GD {:.2}  GM-LD {:.2}",
        rep.seed,
        rep.method,
        mean(Setting::GlobalGlobal, None),
        mean(Setting::GlobalLocal, None),
    );
    for &l in &rep.lambdas {
        println!(
            "  lambda {:>5}: PM-LD {:.2}  PM-GD {:.2}",
            l.to_string(),
            mean(Setting::PersonalizedLocal, Some(l)),
            mean(Setting::PersonalizedGlobal, Some(l)),
        );
    }
}

fn write_posteriors(out: &mut Outputs, rep: &ExperimentReport) -> Result<()> {
    let dir = PathBuf::from("posteriors").join(format!("{}-seed-{}", rep.method, rep.seed));
    if let Some(g) = &rep.global {
        write_binary(g, out.create(dir.join("global.bflg"))?)?;
        serde_json::to_writer(out.create(dir.join("global.json"))?, g)?;
    }
    for (k, p) in rep.locals.iter().enumerate() {
        write_binary(p, out.create(dir.join(format!("client-{k}.bflg")))?)?;
    }
    Ok(())
}

fn run_all(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}

fn cmd_run(opts: &GlobalOpts, path: &Path, baseline: bool, started: Instant) -> Result<ExitCode> {
    let cfg = load_config(path, opts)?;
    let prov = provenance(&cfg)?;
    let mut out = Outputs::new(out_dir(opts, Some(&cfg)))?;
    let mut reports = run_all(&cfg)?;
    if baseline {
        for &s in &cfg.seeds {
            reports.push(fedavg_baseline(&cfg, s)?);
        }
    }
    for rep in &reports {
        print_summary(rep);
        write_posteriors(&mut out, rep)?;
    }
    report::write_metrics_csv(&prov, &reports, out.create("metrics.csv")?)?;
    report::write_rounds_csv(&prov, &reports, out.create("rounds.csv")?)?;
    report::write_json(&prov, &reports, out.create("report.json")?)?;
    out.finish("run", Some(&prov), cfg.seeds.clone(), opts.threads, started)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(opts: &GlobalOpts, path: &Path, started: Instant) -> Result<ExitCode> {
    let cfg = load_config(path, opts)?;
    let prov = provenance(&cfg)?;
    let mut out = Outputs::new(out_dir(opts, Some(&cfg)))?;
    let reports = run_all(&cfg)?;
    for rep in &reports {
        println!("seed {} ({}):", rep.seed, rep.method);
        println!("  {:>6} {:>10} {:>10}", "lambda", "local acc", "global acc");
        for p in rep.sweep() {
            println!("  {:>6} {:>10.2} {:>10.2}", p.lambda.to_string(), p.local_acc, p.global_acc);
        }
    }
    report::write_sweep_csv(&prov, &reports, out.create("sweep.csv")?)?;
    report::write_metrics_csv(&prov, &reports, out.create("metrics.csv")?)?;
    out.finish("sweep-lambda", Some(&prov), cfg.seeds.clone(), opts.threads, started)?;
    Ok(ExitCode::SUCCESS)
}

/// Minimum number of seeds for a pairwise comparison.
const COMPARE_MIN_SEEDS: usize = 5;

fn cmd_compare(opts: &GlobalOpts, path: &Path, started: Instant) -> Result<ExitCode> {
    let cfg = load_config(path, opts)?;
    if cfg.compare.methods.len() < 2 {
        return Err(Error::Config {
            field: "compare.methods".into(),
            message: "at least two methods are required".into(),
        });
    }
    if cfg.seeds.len() < COMPARE_MIN_SEEDS {
        return Err(Error::Config {
            field: "seeds".into(),
            message: format!("compare-agg needs at least {COMPARE_MIN_SEEDS} seeds, got {}", cfg.seeds.len()),
        });
    }
    let prov = provenance(&cfg)?;
    let mut out = Outputs::new(out_dir(opts, Some(&cfg)))?;
    let mut reports = Vec::new();
    let mut per_method = Vec::new();
    for &m in &cfg.compare.methods {
        let mut c = cfg.clone();
        c.federation.method = m;
        let reps = run_all(&c)?;
        per_method.push((m.name().to_string(), reps.clone()));
        reports.extend(reps);
    }
    let metrics: [(&str, fn(&MetricsReport) -> f64); 3] =
        [("acc", |m| m.accuracy), ("ece", |m| m.ece), ("nll", |m| m.nll)];
    let mut tests = Vec::new();
    for (name, f) in metrics {
        let scores: Vec<(String, Vec<f64>)> = per_method
            .iter()
            .map(|(m, reps)| {
                let v = reps.iter().map(|r| r.mean_metric(Setting::GlobalGlobal, None, f)).collect();
                (m.clone(), v)
            })
            .collect();
        tests.extend(compare_aggregations(&scores, name)?);
    }
    for t in &tests {
        match &t.result {
            Some(r) => println!("{:>5} vs {:<5} {:<4} p = {:.4}", t.method_a, t.method_b, t.metric, r.p_value),
            None => println!("{:>5} vs {:<5} {:<4} degenerate", t.method_a, t.method_b, t.metric),
        }
    }
    report::write_pvalues_csv(&prov, &tests, out.create("pvalues.csv")?)?;
    report::write_metrics_csv(&prov, &reports, out.create("metrics.csv")?)?;
    out.finish("compare-agg", Some(&prov), cfg.seeds.clone(), opts.threads, started)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_incremental(opts: &GlobalOpts, path: &Path, started: Instant) -> Result<ExitCode> {
    let cfg = load_config(path, opts)?;
    let prov = provenance(&cfg)?;
    let mut out = Outputs::new(out_dir(opts, Some(&cfg)))?;
    let reports = cfg
        .seeds
        .iter()
        .map(|&s| run_incremental(&cfg, s))
        .collect::<Result<Vec<_>>>()?;
    for rep in &reports {
        println!("seed {} ({}):", rep.seed, rep.method);
        println!("  {:>6} {:>8} {:>8}", "w", "task A", "task B");
        for r in &rep.rows {
            println!("  {:>6} {:>8.2} {:>8.2}", r.weight, r.task_a.accuracy, r.task_b.accuracy);
        }
        println!("  dominating interior weights: {:?}", rep.dominating_weights());
    }
    report::write_incremental_csv(&prov, &reports, out.create("incremental.csv")?)?;
    report::write_json(&prov, &reports, out.create("incremental.json")?)?;
    out.finish("incremental", Some(&prov), cfg.seeds.clone(), opts.threads, started)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(opts: &GlobalOpts, instances: usize, fault: Option<FaultArg>, started: Instant) -> Result<ExitCode> {
    let cfg = ValidationConfig {
        instances,
        seed: opts.seed.unwrap_or(0),
        fault: fault.map(|f| match f {
            FaultArg::W2bUsesEaaVariance => Fault::W2bUsesEaaVariance,
        }),
    };
    let result = validate::run(&cfg)?;
    print!("{result}");
    let mut out = Outputs::new(out_dir(opts, None))?;
    write!(out.create("validation.txt")?, "{result}")?;
    out.finish("validate-geometry", None, vec![cfg.seed], opts.threads, started)?;
    Ok(if result.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_partition(opts: &GlobalOpts, path: &Path, started: Instant) -> Result<ExitCode> {
    let cfg = load_config(path, opts)?;
    let prov = provenance(&cfg)?;
    let mut out = Outputs::new(out_dir(opts, Some(&cfg)))?;
    let (train, _) = cfg.load_datasets()?;
    for &s in &cfg.seeds {
        let part = partition_clients(&cfg, &train, s)?;
        let manifests = part.manifests(&train);
        println!("seed {s}: {} clients after {} attempt(s)", manifests.len(), part.attempts);
        for m in &manifests {
            println!("  client {:>3}: {:>6} examples {:?}", m.client_id, m.indices.len(), m.class_histogram);
        }
        report::write_json(&prov, &manifests, out.create(format!("shards-seed-{s}.json"))?)?;
    }
    out.finish("partition", Some(&prov), cfg.seeds.clone(), opts.threads, started)?;
    Ok(ExitCode::SUCCESS)
}
