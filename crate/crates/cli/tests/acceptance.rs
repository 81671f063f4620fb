//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use diffirm::config::{MaskMode, Method, PenaltyMode};
use diffirm::diffusion::{forward_diffuse, forward_step, NoiseSchedule};
use diffirm::gradsuite::run_suite;
use diffirm::mask::combine;
use diffirm::nn::standard_normal;
use diffirm::objectives::{metrics, penalty_exact, penalty_firstorder};
use diffirm::scm::{self, GraphRun, GraphScm, GraphScmSpec, MotivatingConfig, ScmData, ScmSpec};
use diffirm::trainer::{train, Checkpoint, TrainData};
use diffirm::{Graph, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const N_PER_ENV: usize = 200_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn ominous() -> Outcome {
    let start = Instant::now();
    let d = scm::generate_scm(&ScmSpec::train(N_PER_ENV, 0)).unwrap();
    let t = scm::ominous_solution(&d).unwrap();
    let took = start.elapsed();
    outcome(
        (t - 1.0).abs() <= 0.02 && took < Duration::from_secs(10),
        format!("theta1 = {t:.4} in {}", secs(took)),
    )
}

fn erm() -> Outcome {
    let start = Instant::now();
    let d = scm::generate_scm(&ScmSpec::train(N_PER_ENV, 0)).unwrap();
    let (c1, c2) = scm::closed_form_erm(&d).unwrap();
    let (a1, a2) = (2.0 / 13.0, 11.0 / 13.0);
    let mut cfg = scm::scm_train_config(0);
    cfg.method = Method::Erm;
    cfg.batch_size = 2048;
    cfg.lr_theta = 2e-3;
    cfg.iterations = 2000;
    let ck = scm::train_scm(&d, cfg).unwrap();
    let (t1, t2, _) = scm::linear_coefficients(&ck).unwrap();
    let took = start.elapsed();
    let closed_ok = (c1 - a1).abs() <= 0.03 && (c2 - a2).abs() <= 0.03;
    let trained_ok = (t1 - c1).abs() <= 0.01 && (t2 - c2).abs() <= 0.01;
    outcome(
        closed_ok && trained_ok && took < Duration::from_secs(60),
        format!("closed form ({c1:.4}, {c2:.4}), trained ({t1:.4}, {t2:.4}), analytic ({a1:.4}, {a2:.4}) in {}", secs(took)),
    )
}

struct ScmRun {
    seed: u64,
    theta: (f64, f64),
    took: Duration,
    ck: Checkpoint,
    data: ScmData,
}

fn scm_runs() -> Vec<ScmRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let (table, ck, data) = scm::run_motivating_experiment(&MotivatingConfig::new(seed)).unwrap();
            let row = table.row("diffirm").unwrap();
            ScmRun { seed, theta: (row.theta1, row.theta2), took: start.elapsed(), ck, data }
        })
        .collect()
}

fn diffirm_band(runs: &[ScmRun]) -> Outcome {
    let good = runs
        .iter()
        .filter(|r| r.theta.0 >= 0.8 && r.theta.1 <= 0.2 && r.took < Duration::from_secs(600))
        .count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: ({:.3}, {:.3}) {}", r.seed, r.theta.0, r.theta.1, secs(r.took)))
        .collect();
    outcome(good >= 4, format!("{good} of {} in band; {}", runs.len(), detail.join("; ")))
}

fn invariance(run: &ScmRun) -> Outcome {
    let test = scm::generate_scm(&ScmSpec::test(N_PER_ENV, run.seed + 1000)).unwrap();
    let (x1, x2) = scm::augmented_features(&run.ck, &run.data, run.seed + 3000).unwrap();
    let rep = scm::conditional_checks(&x1, &x2, &run.data.y, &[run.data.clone(), test]);
    let gaps: Vec<String> = rep.gaps.iter().map(|g| format!("c={}: {:.3}", g.0, g.1)).collect();
    outcome(
        rep.max_gap < 0.1 && rep.max_identity_z < scm::IDENTITY_Z_LIMIT,
        format!("gaps [{}], identity max |z| {:.2} (limit {})", gaps.join(", "), rep.max_identity_z, scm::IDENTITY_Z_LIMIT),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = run_suite(20, 0).unwrap();
    let took = start.elapsed();
    let worst = rows.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let bad: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    outcome(
        bad.is_empty() && took < Duration::from_secs(120),
        format!("{} cases, worst {} at {:.2e}, failing {bad:?}, {}", rows.len(), worst.name, worst.max_error, secs(took)),
    )
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

fn marginals() -> Outcome {
    const STEPS: usize = 100;
    let sched = NoiseSchedule::linear(1e-4, 0.1, STEPS).unwrap();
    let alpha = |l: usize| 1e-4 + (0.1 - 1e-4) * (l - 1) as f64 / (STEPS - 1) as f64;
    let alpha_bar = |l: usize| (1..=l).map(|j| 1.0 - alpha(j)).product::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // standardized, skewed data pushed through the whole chain
    let raw: Vec<f64> = (0..10_000).map(|_| -rng.random::<f64>().ln()).collect();
    let x0 = Tensor::vector(raw.iter().map(|e| e - 1.0).collect()).unwrap();
    let mut x = x0.clone();
    for l in 1..=STEPS {
        x = forward_step(&x, l, &sched, &mut rng).unwrap();
    }
    let (tm, tv) = moments(x.data());
    let terminal_ok = tm.abs() <= 0.05 && (tv - 1.0).abs() <= 0.05;

    // a point mass at 2 through both routes, against the analytic marginal
    let mut worst = 0.0f64;
    let start = Tensor::vector(vec![2.0; 100_000]).unwrap();
    let mut chain = start.clone();
    for l in 1..=STEPS {
        chain = forward_step(&chain, l, &sched, &mut rng).unwrap();
        if [10, 25, 50, 100].contains(&l) {
            let direct = forward_diffuse(&start, l, &sched, &mut rng).unwrap();
            let (m0, v0) = (alpha_bar(l).sqrt() * 2.0, 1.0 - alpha_bar(l));
            for (m, v) in [moments(chain.data()), moments(direct.data())] {
                worst = worst.max(((m - m0) / m0).abs()).max(((v - v0) / v0).abs());
            }
        }
    }
    outcome(
        terminal_ok && worst <= 0.05,
        format!("terminal mean {tm:.4} var {tv:.4}; worst relative moment error {:.2}%", 100.0 * worst),
    )
}

fn linear_risk(x: Tensor, y: Tensor) -> impl Fn(&ParamSet) -> diffirm::Result<(f64, ParamSet)> {
    move |theta: &ParamSet| {
        let mut tape = Tape::new();
        let v = theta.load(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let h = tape.matmul(xv, v[0])?;
        let p = tape.add_bias(h, v[1])?;
        let l = tape.mse(p, yv)?;
        let g = theta.grads_from(&v, &tape.backward(l)?)?;
        Ok((tape.item(l), g))
    }
}

fn linear_theta(w: &[f64], b: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", Tensor::matrix(w.len(), 1, w.to_vec()).unwrap());
    p.push("b", Tensor::matrix(1, 1, vec![b]).unwrap());
    p
}

/// Least squares with intercept for two features, by Cramer's rule on the
/// centered normal equations.
fn ols2(x: &Tensor, y: &Tensor) -> ([f64; 2], f64) {
    let n = x.rows() as f64;
    let col = |j: usize| (0..x.rows()).map(|i| x.at(i, j)).collect::<Vec<_>>();
    let (a, b, t) = (col(0), col(1), y.data().to_vec());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let cov = |u: &[f64], v: &[f64]| {
        let (mu, mv) = (mean(u), mean(v));
        u.iter().zip(v).map(|(p, q)| (p - mu) * (q - mv)).sum::<f64>()
    };
    let (saa, sbb, sab, sat, sbt) = (cov(&a, &a), cov(&b, &b), cov(&a, &b), cov(&a, &t), cov(&b, &t));
    let det = saa * sbb - sab * sab;
    let w = [(sat * sbb - sbt * sab) / det, (sbt * saa - sat * sab) / det];
    (w, mean(&t) - w[0] * mean(&a) - w[1] * mean(&b))
}

fn penalties() -> Outcome {
    let mut notes = Vec::new();
    let shared = [0.4, 1.1, 0.9];
    let zero_ok = penalty_exact(&shared, &shared).unwrap() == 0.0;
    notes.push(format!("shared bank {}", if zero_ok { "0" } else { "nonzero" }));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_exact = f64::INFINITY;
    let mut min_first = f64::INFINITY;
    for _ in 0..10 {
        let theta = linear_theta(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], 0.0);
        let (mut sh, mut bank, mut risks) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..3 {
            let x = Tensor::matrix(30, 2, (0..60).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let y = Tensor::matrix(
                30,
                1,
                (0..30).map(|i| (k as f64 + 0.5) * x.at(i, 0) - x.at(i, 1) + rng.random_range(-0.3..0.3)).collect(),
            )
            .unwrap();
            let (w, b) = ols2(&x, &y);
            let risk = linear_risk(x, y);
            sh.push(risk(&theta).unwrap().0);
            bank.push(risk(&linear_theta(&w, b)).unwrap().0);
            risks.push(risk);
        }
        min_exact = min_exact.min(penalty_exact(&sh, &bank).unwrap());
        min_first = min_first.min(penalty_firstorder(&risks, &theta).unwrap().value);
    }
    notes.push(format!("min exact with least-squares bank {min_exact:.3e}, min first-order {min_first:.3e}"));

    let identical = zero_penalty_matches_erm();
    notes.push(format!("lambda=0 trajectory {}", if identical { "identical to ERM" } else { "differs from ERM" }));
    outcome(zero_ok && min_exact >= -1e-6 && min_first >= 0.0 && identical, notes.join("; "))
}

fn zero_penalty_matches_erm() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (nodes, tau, feats, hz, windows) = (3, 2, 2, 1, 32);
    let x = standard_normal(&mut rng, &[windows * nodes, tau * feats]);
    let y: Vec<f64> = x.data().chunks(tau * feats).map(|r| r[0] - 0.5 * r[3] + 0.1 * rng.random::<f64>()).collect();
    let w = diffirm::data::WindowSet::new(nodes, tau, feats, hz, x.into_data(), y, (0..windows).collect()).unwrap();
    let a = diffirm::graph::normalize_adjacency(&Graph::ring(nodes).unwrap());
    let d = TrainData::new(w, None, a, vec!["a".into(), "b".into()]);
    let base = diffirm::config::TrainConfig {
        backbone: diffirm::predictor::Backbone::StgcnLite,
        tau,
        horizon: hz,
        iterations: 40,
        batch_size: 8,
        eval_every: 1,
        diffusion_steps: 12,
        penalty: PenaltyMode::Exact,
        seed: 9,
        ..Default::default()
    };
    let erm = train(diffirm::config::TrainConfig { method: Method::Erm, ..base.clone() }, &d).unwrap();
    let dif = train(
        diffirm::config::TrainConfig {
            method: Method::Diffirm,
            lambda: 0.0,
            mask_mode: MaskMode::Ones,
            k_envs: 1,
            ..base
        },
        &d,
    )
    .unwrap();
    let totals = |c: &Checkpoint| c.history.iter().map(|h| h.report.total.to_bits()).collect::<Vec<_>>();
    totals(&erm) == totals(&dif) && erm.theta == dif.theta
}

fn boundaries() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    for _ in 0..20 {
        let x = standard_normal(&mut rng, &[16, 6]).map(|v| v * 1e3);
        let xh = standard_normal(&mut rng, &[16, 6]).map(|v| v * 1e-3);
        for (fill, expect) in [(1.0, &x), (0.0, &xh)] {
            let mut tape = Tape::new();
            let (xv, hv) = (tape.constant(x.clone()), tape.constant(xh.clone()));
            let m = tape.constant(Tensor::full(&[16, 6], fill));
            let out = combine(&mut tape, xv, hv, m).unwrap();
            ok &= tape.value(out).data() == expect.data();
        }
    }
    outcome(ok, "mask of ones returns the input, mask of zeros the augmentation, bit for bit over 20 draws")
}

struct GraphRuns {
    audit: (bool, Vec<f64>),
    runs: Vec<(GraphRun, Duration)>,
}

fn graph_runs() -> GraphRuns {
    let spec = GraphScmSpec::default();
    let fixture: GraphScm = scm::generate_graph_scm(&spec).unwrap();
    let audit = scm::audit_fixture(&fixture).unwrap();
    let mut runs = Vec::new();
    for m in [Method::Diffirm, Method::DiffirmMinus, Method::Erm] {
        for &s in &SEEDS {
            let start = Instant::now();
            let (run, _) = scm::run_graph_method(&fixture, scm::graph_train_config(&spec, m, s)).unwrap();
            runs.push((run, start.elapsed()));
        }
    }
    GraphRuns { audit, runs }
}

fn identification(g: &GraphRuns) -> Outcome {
    let dif: Vec<_> = g.runs.iter().filter(|(r, _)| r.method == Method::Diffirm).collect();
    let good = dif
        .iter()
        .filter(|(r, t)| r.mask_gap.is_some_and(|m| m >= 0.3) && *t < Duration::from_secs(900))
        .count();
    let gaps: Vec<String> = dif.iter().map(|(r, t)| format!("{:.3} ({})", r.mask_gap.unwrap_or(f64::NAN), secs(*t))).collect();
    outcome(
        g.audit.0 && good >= 4,
        format!(
            "audit {} {:.3?}; {good} of 5 seeds with causal-minus-spurious mask gap >= 0.3: [{}]",
            if g.audit.0 { "ok" } else { "failed" },
            g.audit.1,
            gaps.join(", ")
        ),
    )
}

fn ood_ordering(g: &GraphRuns) -> Outcome {
    let med = |m: Method| {
        let mut v: Vec<f64> = g.runs.iter().filter(|(r, _)| r.method == m).map(|(r, _)| r.test_mae).collect();
        scm::median(&mut v)
    };
    let (d, dm, e) = (med(Method::Diffirm), med(Method::DiffirmMinus), med(Method::Erm));
    outcome(
        d < dm && dm < e && d <= 0.9 * e,
        format!("median test MAE diffirm {d:.4}, diffirm_minus {dm:.4}, erm {e:.4}"),
    )
}

fn metric_checks() -> Outcome {
    let m = metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
    let hand = m.mae == 1.0 && m.rmse == (5.0f64 / 3.0).sqrt() && (m.mape.unwrap() - 30.0).abs() < 1e-12;
    let m2 = metrics(&[0.0, 4.0], &[1.0, 2.0]).unwrap();
    let hand2 = m2.mae == 1.5 && m2.rmse == 2.5f64.sqrt() && m2.mape == Some(100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ordered = (0..1000).all(|_| {
        let n = rng.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let m = metrics(&p, &t).unwrap();
        m.mae <= m.rmse * (1.0 + 1e-12)
    });
    outcome(hand && hand2 && ordered, format!("hand triples {}, mae <= rmse on 1000 draws {ordered}", hand && hand2))
}

fn run_bench(args: &[&str], out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_diffirm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DIFFIRM_SEED")
        .output()
        .unwrap()
        .status;
    // threshold failures are expected at these sizes; only a crash is fatal
    assert!(matches!(status.code(), Some(0 | 3)), "{args:?}: {status}");
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        if std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let benches: [&[&str]; 2] = [
        &["scm-bench", "--seed", "4", "--n-per-env", "3000", "--iterations", "30"],
        &["graph-bench", "--seeds", "1", "--methods", "diffirm,erm,irmv1", "--iterations", "8"],
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (i, args) in benches.iter().enumerate() {
        let (a, b) = (dir.path().join(format!("{i}a")), dir.path().join(format!("{i}b")));
        run_bench(args, &a);
        run_bench(args, &b);
        match same_tree(&a, &b) {
            Ok(n) => notes.push(format!("{}: {n} files identical", args[0])),
            Err(e) => {
                ok = false;
                notes.push(format!("{}: {e}", args[0]));
            }
        }
    }
    outcome(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |c: usize| wanted.is_empty() || wanted.contains(&c);
    let mut failed = Vec::new();
    let mut report = |c: usize, o: Outcome| {
        println!("criterion {c:>2}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(c);
        }
    };
    if on(1) {
        report(1, ominous());
    }
    if on(2) {
        report(2, erm());
    }
    if on(3) || on(4) {
        let runs = scm_runs();
        if on(3) {
            report(3, diffirm_band(&runs));
        }
        if on(4) {
            report(4, invariance(&runs[0]));
        }
    }
    if on(5) {
        report(5, gradients());
    }
    if on(6) {
        report(6, marginals());
    }
    if on(7) {
        report(7, penalties());
    }
    if on(8) {
        report(8, boundaries());
    }
    if on(9) || on(10) {
        let g = graph_runs();
        if on(9) {
            report(9, identification(&g));
        }
        if on(10) {
            report(10, ood_ordering(&g));
        }
    }
    if on(11) {
        report(11, metric_checks());
    }
    if on(12) {
        report(12, determinism());
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
