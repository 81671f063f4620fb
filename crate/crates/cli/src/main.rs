use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use diffirm::config::Method;
use diffirm::diffusion::{augment, NoiseSchedule};
use diffirm::gradsuite::{run_suite, TOLERANCE};
use diffirm::io::{hash_json, write_json, write_window_features, Manifest, MetricsDoc, RunConfig};
use diffirm::mask::{generate_mask, MaskReport};
use diffirm::scm::{self, GraphRun, GraphScmSpec, MotivatingConfig, ScmSpec};
use diffirm::trainer::{evaluate, mask_report, prepare, Checkpoint, Prepared, Trainer};
use diffirm::{Error, Tape, Tensor};

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;
const THRESHOLD: u8 = 3;

#[derive(Parser)]
#[command(name = "diffirm", version, about = "Diffusion-augmented invariant learning for graph time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-feature structural model: coefficient table and conditional checks.
    ScmBench(ScmArgs),
    /// Planted-causal graph fixture: method comparison and mask identification.
    GraphBench(GraphArgs),
    /// Train on CSV data described by a run config.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Finite-difference sweep over every differentiable op and backbone.
    Gradcheck(GradArgs),
    /// Feature-by-lag mean of the learned mask.
    MaskReport(CheckpointArgs),
    /// Original and augmented training windows as CSV.
    AugmentPreview(PreviewArgs),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct ScmArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    n_per_env: usize,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct GraphArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods; all when omitted.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed of the generated fixture.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    config: PathBuf,
    /// A checkpoint file, or `best` / `last` inside the configured output directory.
    #[arg(long, default_value = "best")]
    checkpoint: String,
    /// Output file; defaults to a file in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreviewArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Number of training windows to augment.
    #[arg(long, default_value_t = 8)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Runtime(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::ScmBench(a) => scm_bench(a),
        Command::GraphBench(a) => graph_bench(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::MaskReport(a) => mask(a),
        Command::AugmentPreview(a) => preview(a),
        Command::Version => {
            println!("diffirm {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            RUNTIME
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("threshold failure: {msg}");
            THRESHOLD
        }
    }
}

fn create(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn csv_file(path: &Path) -> Result<std::fs::File, Failure> {
    Ok(std::fs::File::create(path)?)
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(checks: &[Check]) -> Outcome {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(failed.join(", ")))
    }
}

#[derive(Serialize)]
struct ScmSummary<'a> {
    seed: u64,
    config_hash: String,
    table: &'a scm::Table1,
    gaps: &'a [(f64, f64, usize, usize)],
    max_gap: f64,
    max_identity_z: f64,
    checks: &'a [Check],
}

fn scm_bench(a: ScmArgs) -> Outcome {
    let mut cfg = MotivatingConfig::new(a.seed);
    cfg.n_per_env = a.n_per_env;
    if let Some(it) = a.iterations {
        cfg.train.iterations = it;
    }
    let hash = hash_json(&cfg)?;
    create(&a.out)?;
    let (table, ck, data) = scm::run_motivating_experiment(&cfg)?;
    let test = scm::generate_scm(&ScmSpec::test(cfg.n_per_env, cfg.seed.wrapping_add(1000)))?;
    let (x1, x2) = scm::augmented_features(&ck, &data, cfg.seed.wrapping_add(3000))?;
    let cond = scm::conditional_checks(&x1, &x2, &data.y, &[data.clone(), test]);

    table.write_csv(csv_file(&a.out.join("table1.csv"))?)?;
    cond.write_csv(csv_file(&a.out.join("conditionals.csv"))?)?;

    let row = |m: &str| table.row(m).expect("row present");
    let (om, erm, dif) = (row("ominous"), row("erm"), row("diffirm"));
    let (t1, t2) = table.analytic_erm;
    let checks = vec![
        Check {
            name: "ominous",
            passed: (om.theta1 - 1.0).abs() <= 0.02,
            detail: format!("theta1 = {:.4}", om.theta1),
        },
        Check {
            name: "erm",
            passed: (erm.theta1 - t1).abs() <= 0.03 && (erm.theta2 - t2).abs() <= 0.03,
            detail: format!("({:.4}, {:.4}) vs ({t1:.4}, {t2:.4})", erm.theta1, erm.theta2),
        },
        Check {
            name: "diffirm",
            passed: dif.theta1 >= 0.8 && dif.theta2 <= 0.2,
            detail: format!("({:.4}, {:.4})", dif.theta1, dif.theta2),
        },
        Check {
            name: "augmented_invariance",
            passed: cond.max_gap < 0.1,
            detail: format!("max occupancy-weighted gap {:.4}", cond.max_gap),
        },
        Check {
            name: "variance_invariance",
            passed: cond.max_identity_z < scm::IDENTITY_Z_LIMIT,
            detail: format!("max |z| {:.3}", cond.max_identity_z),
        },
    ];
    let summary = ScmSummary {
        seed: a.seed,
        config_hash: hash.clone(),
        table: &table,
        gaps: &cond.gaps,
        max_gap: cond.max_gap,
        max_identity_z: cond.max_identity_z,
        checks: &checks,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    Manifest {
        command: "scm-bench".into(),
        seed: a.seed,
        config_hash: hash,
        files: vec!["table1.csv".into(), "conditionals.csv".into(), "summary.json".into()],
    }
    .write(&a.out)?;
    verdict(&checks)
}

#[derive(Serialize)]
struct GraphSummary<'a> {
    data_seed: u64,
    config_hash: String,
    audit_passed: bool,
    correlations: Vec<f64>,
    runs: &'a [GraphRun],
    checks: &'a [Check],
}

fn graph_bench(a: GraphArgs) -> Outcome {
    let spec = GraphScmSpec { seed: a.data_seed, ..GraphScmSpec::default() };
    let methods = if a.methods.is_empty() { Method::ALL.to_vec() } else { a.methods.clone() };
    let mut configs = Vec::new();
    for &m in &methods {
        for &s in &a.seeds {
            let mut c = scm::graph_train_config(&spec, m, s);
            if let Some(it) = a.iterations {
                c.iterations = it;
            }
            configs.push(c);
        }
    }
    let hash = hash_json(&(&spec, &configs))?;
    create(&a.out)?;
    let fixture = scm::generate_graph_scm(&spec)?;
    let (audit, corr) = scm::audit_fixture(&fixture)?;
    let mut runs = Vec::new();
    for cfg in configs {
        let (run, _) = scm::run_graph_method(&fixture, cfg)?;
        println!("{} seed {}: test MAE {:.4}", run.method, run.seed, run.test_mae);
        runs.push(run);
    }
    scm::write_runs_csv(&runs, csv_file(&a.out.join("results.csv"))?)?;

    let mut checks = vec![Check { name: "fixture_audit", passed: audit, detail: format!("{corr:.3?}") }];
    let of = |m: Method| runs.iter().filter(|r| r.method == m).collect::<Vec<_>>();
    let dif = of(Method::Diffirm);
    if !dif.is_empty() {
        let ok = dif.iter().filter(|r| r.mask_gap.is_some_and(|g| g >= 0.3)).count();
        let need = (dif.len() * 4).div_ceil(5);
        checks.push(Check {
            name: "identification",
            passed: ok >= need,
            detail: format!("{ok} of {} seeds with causal-minus-spurious mask gap >= 0.3", dif.len()),
        });
    }
    let med = |m: Method| {
        let mut v: Vec<f64> = of(m).iter().map(|r| r.test_mae).collect();
        (!v.is_empty()).then(|| scm::median(&mut v))
    };
    if let (Some(d), Some(dm), Some(e)) = (med(Method::Diffirm), med(Method::DiffirmMinus), med(Method::Erm)) {
        checks.push(Check {
            name: "ood_ordering",
            passed: d < dm && dm < e && d <= 0.9 * e,
            detail: format!("median test MAE diffirm {d:.4}, diffirm_minus {dm:.4}, erm {e:.4}"),
        });
    }
    write_json(
        &a.out.join("summary.json"),
        &GraphSummary {
            data_seed: a.data_seed,
            config_hash: hash.clone(),
            audit_passed: audit,
            correlations: corr,
            runs: &runs,
            checks: &checks,
        },
    )?;
    Manifest {
        command: "graph-bench".into(),
        seed: a.data_seed,
        config_hash: hash,
        files: vec!["results.csv".into(), "summary.json".into()],
    }
    .write(&a.out)?;
    verdict(&checks)
}

fn load_run(path: &Path) -> Result<(RunConfig, Prepared), Failure> {
    let rc = RunConfig::load(path)?;
    let ing = rc.dataset()?;
    for w in &ing.warnings {
        eprintln!("warning: {w}");
    }
    let prep = prepare(&ing.dataset, &rc.split, &rc.train)?;
    Ok((rc, prep))
}

fn train(a: TrainArgs) -> Outcome {
    let (rc, prep) = load_run(&a.config)?;
    create(&rc.out_dir)?;
    let mut t = Trainer::new(rc.train.clone(), &prep.data)?;
    t.run()?;
    let ck = t.into_checkpoint();
    ck.save(&rc.out_dir.join("checkpoint.json"))?;
    ck.best_params().save(&rc.out_dir.join("best.json"))?;
    let mut lines = String::new();
    for h in &ck.history {
        lines.push_str(&serde_json::to_string(h).map_err(Error::from)?);
        lines.push('\n');
    }
    std::fs::write(rc.out_dir.join("history.jsonl"), lines)?;
    Manifest {
        command: "train".into(),
        seed: rc.train.seed,
        config_hash: ck.config_hash.clone(),
        files: vec!["checkpoint.json".into(), "best.json".into(), "history.jsonl".into()],
    }
    .write(&rc.out_dir)?;
    match &ck.best {
        Some(b) => println!("trained {} iterations; best validation MAE {:.4} at {}", ck.iteration, b.val_mae, b.iteration),
        None => println!("trained {} iterations", ck.iteration),
    }
    Ok(())
}

fn resolve_checkpoint(rc: &RunConfig, name: &str) -> PathBuf {
    match name {
        "best" => rc.out_dir.join("best.json"),
        "last" => rc.out_dir.join("checkpoint.json"),
        other => PathBuf::from(other),
    }
}

/// Loads a checkpoint and checks it was trained on this run config.
fn load_checkpoint(a: &CheckpointArgs) -> Result<(RunConfig, Prepared, Checkpoint), Failure> {
    let (rc, prep) = load_run(&a.config)?;
    let ck = Checkpoint::load(&resolve_checkpoint(&rc, &a.checkpoint))?;
    if ck.channels != prep.data.channels || ck.standardizer != prep.data.standardizer {
        return Err(Error::Config("checkpoint was trained on different data".into()).into());
    }
    Ok((rc, prep, ck))
}

fn eval(a: CheckpointArgs) -> Outcome {
    let (rc, prep, ck) = load_checkpoint(&a)?;
    let table = evaluate(&ck.predictor, &ck.theta, &prep.test, &prep.data.a_hat, &ck.standardizer)?;
    let doc = MetricsDoc::new(&ck.config, &table);
    let out = a.out.unwrap_or_else(|| rc.out_dir.join("metrics.json"));
    write_json(&out, &doc)?;
    println!("test MAE {:.4} RMSE {:.4}", doc.average.mae, doc.average.rmse);
    Ok(())
}

fn gradcheck(a: GradArgs) -> Outcome {
    let rows = run_suite(a.instances, a.seed)?;
    for r in &rows {
        println!("{:<32} {:.3e}", r.name, r.max_error);
    }
    let bad: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("relative error >= {TOLERANCE:e} in {}", bad.join(", "))))
    }
}

fn mask(a: CheckpointArgs) -> Outcome {
    let (rc, prep, ck) = load_checkpoint(&a)?;
    let rep: MaskReport = mask_report(&ck, &prep.data.train)?;
    let out = a.out.unwrap_or_else(|| rc.out_dir.join("mask.csv"));
    rep.write_csv(csv_file(&out)?)?;
    for (name, row) in rep.features.iter().zip(&rep.values) {
        println!("{name:<20} {:.3}", row.iter().sum::<f64>() / row.len() as f64);
    }
    Ok(())
}

fn preview(a: PreviewArgs) -> Outcome {
    let (rc, prep, ck) = load_checkpoint(&a.ck)?;
    let psi = ck.psi.as_ref().ok_or_else(|| Error::Config(format!("method {} has no augmentor", ck.config.method)))?;
    if ck.config.method == Method::Advaug {
        return Err(Error::Config("preview supports diffusion augmentors only".into()).into());
    }
    let out = a.ck.out.clone().unwrap_or_else(|| rc.out_dir.join("preview"));
    create(&out)?;
    let w = &prep.data.train;
    let idx: Vec<usize> = (0..a.windows.min(w.len())).collect();
    let (x, _) = w.batch(&idx);
    let c = &ck.config;
    let sched = NoiseSchedule::linear(c.alpha_min, c.alpha_max, c.diffusion_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let batch = augment(&ck.denoiser_spec(), psi, &x, &prep.data.a_hat, &sched, c.depth(), c.k_envs, &mut rng)?;
    let mask = match &ck.phi {
        Some(phi) => {
            let mut tape = Tape::new();
            let vars = phi.load_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let m = generate_mask(&ck.mask_spec(), &mut tape, &vars, xv)?;
            tape.value(m).clone()
        }
        None => Tensor::zeros(x.shape()),
    };
    let names = &ck.feature_names;
    let mut files = vec!["original.csv".to_string()];
    write_window_features(&out.join("original.csv"), &x, w.n_nodes, w.tau, names)?;
    for (k, xh) in batch.samples.iter().enumerate() {
        let blended: Vec<f64> = x
            .data()
            .iter()
            .zip(xh.data())
            .zip(mask.data())
            .map(|((x, h), m)| m * x + (1.0 - m) * h)
            .collect();
        let xt = Tensor::new(x.shape().to_vec(), blended)?;
        let name = format!("augmented_{k}.csv");
        write_window_features(&out.join(&name), &xt, w.n_nodes, w.tau, names)?;
        files.push(name);
    }
    Manifest { command: "augment-preview".into(), seed: a.seed, config_hash: ck.config_hash.clone(), files }.write(&out)?;
    println!("wrote {} augmented copies of {} windows to {}", batch.samples.len(), idx.len(), out.display());
    Ok(())
}
