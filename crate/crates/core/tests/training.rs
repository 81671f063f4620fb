use diffirm::config::{Method, MaskMode, PenaltyMode, TrainConfig};
use diffirm::data::WindowSet;
use diffirm::graph::normalize_adjacency;
use diffirm::nn::standard_normal;
use diffirm::predictor::{init_params, Backbone};
use diffirm::trainer::{predictor_spec, train, Checkpoint, TrainData, Trainer};
use diffirm::{Graph, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NODES: usize = 2;
const TAU: usize = 2;
const FEATS: usize = 2;
const HZ: usize = 2;

fn data(windows: usize, seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = standard_normal(&mut rng, &[windows * NODES, TAU * FEATS]);
    let noise = standard_normal(&mut rng, &[windows * NODES, HZ]);
    let y: Vec<f64> = x
        .data()
        .chunks(TAU * FEATS)
        .zip(noise.data().chunks(HZ))
        .flat_map(|(r, e)| [r[0] - 0.5 * r[3] + 0.1 * e[0], 0.3 * r[1] + r[2] + 0.1 * e[1]])
        .collect();
    let w = WindowSet::new(NODES, TAU, FEATS, HZ, x.into_data(), y, (0..windows).collect()).unwrap();
    let a = normalize_adjacency(&Graph::ring(NODES).unwrap());
    TrainData::new(w, None, a, vec!["a".into(), "b".into()])
}

fn config(method: Method, backbone: Backbone) -> TrainConfig {
    TrainConfig {
        method,
        backbone,
        tau: TAU,
        horizon: HZ,
        iterations: 30,
        batch_size: 8,
        lr_theta: 1e-2,
        k_envs: 2,
        diffusion_steps: 12,
        eval_every: 5,
        mlp_hidden: 6,
        gcn_hidden: 4,
        emb_dim: 4,
        denoiser_hidden: 6,
        mask_hidden: 6,
        bank_refresh: 4,
        bank_steps: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Linear ERM with minibatches, clipping and Adam, written out by hand.
fn oracle_erm(cfg: &TrainConfig, d: &TrainData) -> ParamSet {
    let spec = predictor_spec(cfg, NODES, TAU, FEATS, HZ);
    let init = init_params(&spec, cfg.seed).unwrap();
    let mut w = init.get(0).data().to_vec(); // [TAU*FEATS, HZ]
    let mut b = init.get(1).data().to_vec(); // [1, HZ]
    let din = TAU * FEATS;
    let (mut mw, mut vw) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (mut mb, mut vb) = (vec![0.0; b.len()], vec![0.0; b.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = d.train.len();
    let mut perm: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for t in 1..=cfg.iterations {
        if perm.len() != n || cursor + cfg.batch_size > n {
            perm = (0..n).collect();
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &perm[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let rows: Vec<(&[f64], &[f64])> = idx
            .iter()
            .flat_map(|&i| {
                let x = d.train.window_x(i);
                let y = d.train.window_y(i);
                (0..NODES).map(move |k| (&x[k * din..(k + 1) * din], &y[k * HZ..(k + 1) * HZ]))
            })
            .collect();
        let count = (rows.len() * HZ) as f64;
        let (mut gw, mut gb) = (vec![0.0; w.len()], vec![0.0; b.len()]);
        for (x, y) in &rows {
            for h in 0..HZ {
                let pred: f64 = (0..din).map(|i| x[i] * w[i * HZ + h]).sum::<f64>() + b[h];
                let r = 2.0 * (pred - y[h]) / count;
                for i in 0..din {
                    gw[i * HZ + h] += r * x[i];
                }
                gb[h] += r;
            }
        }
        let norm = (gw.iter().chain(&gb).map(|g| g * g).sum::<f64>()).sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= s);
        }
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, cfg.lr_theta);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for (p, g, m, v) in [(&mut w, &gw, &mut mw, &mut vw), (&mut b, &gb, &mut mb, &mut vb)] {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
    }
    let mut out = ParamSet::new();
    out.push("head.w", Tensor::matrix(din, HZ, w).unwrap());
    out.push("head.b", Tensor::matrix(1, HZ, b).unwrap());
    out
}

#[test]
fn erm_matches_hand_rolled_loop() {
    let d = data(20, 1);
    let mut cfg = config(Method::Erm, Backbone::Linear);
    cfg.iterations = 40;
    cfg.clip_norm = 0.5; // small enough that clipping triggers
    let ck = train(cfg.clone(), &d).unwrap();
    let oracle = oracle_erm(&cfg, &d);
    for i in 0..2 {
        for (a, b) in ck.theta.get(i).data().iter().zip(oracle.get(i).data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn diffirm_without_penalty_or_augmentation_is_erm() {
    let d = data(24, 2);
    for backbone in [Backbone::Linear, Backbone::StgcnLite] {
        let erm = train(config(Method::Erm, backbone), &d).unwrap();
        let mut cfg = config(Method::Diffirm, backbone);
        cfg.lambda = 0.0;
        cfg.mask_mode = MaskMode::Ones;
        cfg.k_envs = 1;
        let dif = train(cfg, &d).unwrap();
        assert_eq!(erm.theta, dif.theta);
        let totals = |c: &Checkpoint| c.history.iter().map(|h| h.report.total).collect::<Vec<_>>();
        assert_eq!(totals(&erm), totals(&dif));
        assert!(dif.psi.is_some());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data(24, 3);
    for penalty in [PenaltyMode::Firstorder, PenaltyMode::Exact] {
        let mut cfg = config(Method::Diffirm, Backbone::StgcnLite);
        cfg.iterations = 14;
        cfg.penalty = penalty;
        let full = train(cfg.clone(), &d).unwrap();

        let mut t = Trainer::new(cfg, &d).unwrap();
        t.run_until(7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        t.into_checkpoint().save(&path).unwrap();
        let mut t = Trainer::resume(Checkpoint::load(&path).unwrap(), &d).unwrap();
        t.run().unwrap();
        let resumed = t.into_checkpoint();
        assert_eq!(full.theta, resumed.theta);
        assert_eq!(full.phi, resumed.phi);
        assert_eq!(full.psi, resumed.psi);
        assert_eq!(full.history, resumed.history);
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let d = data(10, 4);
    let ck = train(config(Method::Erm, Backbone::Linear), &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"lambda\":1.0"));
    let text = text.replacen("\"lambda\":1.0", "\"lambda\":2.0", 1);
    std::fs::write(&path, text).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn augmentor_step_ascends_most_of_the_time() {
    let d = data(32, 5);
    let mut cfg = config(Method::Diffirm, Backbone::Mlp);
    cfg.iterations = 60;
    cfg.eval_every = 1;
    cfg.lr_psi = 1e-2;
    cfg.denoise_weight = 0.0;
    let ck = train(cfg, &d).unwrap();
    let flags: Vec<bool> = ck.history.iter().filter_map(|h| h.ascent).collect();
    let up = flags.iter().filter(|&&f| f).count();
    assert!(up * 10 >= flags.len() * 6, "{up} of {}", flags.len());
}

#[test]
fn methods_touch_the_right_parameter_groups() {
    let d = data(24, 6).with_segments(2).unwrap();
    let fresh = |m: Method| Trainer::new(config(m, Backbone::Mlp), &d).unwrap().into_checkpoint();
    let stepped = |m: Method| {
        let mut t = Trainer::new(config(m, Backbone::Mlp), &d).unwrap();
        t.step().unwrap();
        t.into_checkpoint()
    };
    for m in Method::ALL {
        if m == Method::ErmAr {
            continue;
        }
        let (a, b) = (fresh(m), stepped(m));
        assert_ne!(a.theta, b.theta, "{m}: theta frozen");
        let learned_mask = matches!(m, Method::Diffirm | Method::Diffaug | Method::Advaug);
        assert_eq!(b.phi.is_some(), learned_mask, "{m}: mask presence");
        if learned_mask {
            assert_ne!(a.phi, b.phi, "{m}: mask frozen");
        }
        let augments = matches!(m, Method::Diffirm | Method::Diffaug | Method::Advaug | Method::DiffirmMinus);
        assert_eq!(b.psi.is_some(), augments, "{m}: augmentor presence");
        if augments {
            assert_ne!(a.psi, b.psi, "{m}: augmentor frozen");
        }
        // the rationale gap starts at zero because recalibration starts at identity
        if m != Method::Invrat {
            let penalized = b.history[0].report.penalty != 0.0;
            let expect_penalty = matches!(m, Method::Diffirm | Method::DiffirmMinus | Method::Irmv1 | Method::Rex);
            assert_eq!(penalized, expect_penalty, "{m}: penalty");
        }
    }
}
