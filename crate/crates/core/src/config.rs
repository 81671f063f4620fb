//! Training configuration and method selection.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::RexForm;
use crate::predictor::Backbone;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Diffirm,
    Advaug,
    Diffaug,
    DiffirmMinus,
    Erm,
    Irmv1,
    Rex,
    Invrat,
    ErmAr,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Diffirm,
        Method::Advaug,
        Method::Diffaug,
        Method::DiffirmMinus,
        Method::Erm,
        Method::Irmv1,
        Method::Rex,
        Method::Invrat,
        Method::ErmAr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Diffirm => "diffirm",
            Method::Advaug => "advaug",
            Method::Diffaug => "diffaug",
            Method::DiffirmMinus => "diffirm_minus",
            Method::Erm => "erm",
            Method::Irmv1 => "irmv1",
            Method::Rex => "rex",
            Method::Invrat => "invrat",
            Method::ErmAr => "erm_ar",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    Firstorder,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Learned,
    /// Keep every original feature.
    Ones,
    /// Replace every feature by its augmentation.
    Zeros,
}

/// Every hyperparameter of the training loop. Unknown keys are rejected when
/// parsing from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub backbone: Backbone,
    pub mlp_hidden: usize,
    pub gcn_hidden: usize,
    pub adaptive_adjacency: bool,
    pub tau: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub lambda: f64,
    /// Fraction of iterations over which the penalty weight ramps up from 0.
    pub lambda_warmup: f64,
    pub k_envs: usize,
    pub seed: u64,
    pub penalty: PenaltyMode,
    pub mask_mode: MaskMode,
    pub diffusion_steps: usize,
    /// Partial noising depth; `0` means a quarter of the chain.
    pub aug_depth: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub eta_adv: f64,
    pub denoise_weight: f64,
    pub emb_dim: usize,
    pub denoiser_hidden: usize,
    pub mask_hidden: usize,
    pub mask_target: f64,
    pub mask_reg_weight: f64,
    pub perturb_hidden: usize,
    pub bank_refresh: usize,
    pub bank_steps: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Contiguous training segments treated as environments by the baselines.
    pub baseline_envs: usize,
    pub rex_form: RexForm,
    pub standardize: bool,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Diffirm,
            backbone: Backbone::StgcnLite,
            mlp_hidden: 32,
            gcn_hidden: 16,
            adaptive_adjacency: false,
            tau: 3,
            horizon: 3,
            iterations: 1000,
            batch_size: 32,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            lr_psi: 1e-3,
            lambda: 1.0,
            lambda_warmup: 0.2,
            k_envs: 5,
            seed: 0,
            penalty: PenaltyMode::Firstorder,
            mask_mode: MaskMode::Learned,
            diffusion_steps: 100,
            aug_depth: 0,
            alpha_min: 1e-4,
            alpha_max: 0.1,
            eta_adv: 1.0,
            denoise_weight: 1.0,
            emb_dim: 16,
            denoiser_hidden: 32,
            mask_hidden: 32,
            mask_target: 0.5,
            mask_reg_weight: 0.1,
            perturb_hidden: 32,
            bank_refresh: 20,
            bank_steps: 50,
            clip_norm: 5.0,
            eval_every: 50,
            baseline_envs: 2,
            rex_form: RexForm::Variance,
            standardize: true,
            divergence_threshold: 1e6,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.k_envs == 0 {
            return config_err("iterations, batch_size and k_envs must be at least 1");
        }
        if self.tau == 0 || self.horizon == 0 {
            return config_err("tau and horizon must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return config_err("lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda_warmup) {
            return config_err("lambda_warmup must lie in [0, 1]");
        }
        for (name, lr) in [("lr_theta", self.lr_theta), ("lr_phi", self.lr_phi), ("lr_psi", self.lr_psi)] {
            if !(lr > 0.0) {
                return config_err(format!("{name} must be positive"));
            }
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max < 1.0) {
            return config_err("need 0 < alpha_min <= alpha_max < 1");
        }
        if self.diffusion_steps == 0 || self.aug_depth > self.diffusion_steps {
            return config_err("aug_depth must not exceed diffusion_steps");
        }
        if !self.emb_dim.is_multiple_of(2) || self.emb_dim == 0 {
            return config_err("emb_dim must be even and positive");
        }
        if !(self.mask_target > 0.0 && self.mask_target < 1.0) {
            return config_err("mask_target must lie in (0, 1)");
        }
        if self.eta_adv < 0.0 || self.denoise_weight < 0.0 || self.mask_reg_weight < 0.0 {
            return config_err("loss weights must be non-negative");
        }
        if self.bank_refresh == 0 || self.eval_every == 0 {
            return config_err("bank_refresh and eval_every must be at least 1");
        }
        if !(self.clip_norm >= 0.0) {
            return config_err("clip_norm must be non-negative (0 disables clipping)");
        }
        if matches!(self.method, Method::Irmv1 | Method::Rex | Method::Invrat) && self.baseline_envs < 2 {
            return config_err(format!("{} needs at least two environments", self.method));
        }
        Ok(())
    }

    /// Partial noising depth after resolving the default.
    pub fn depth(&self) -> usize {
        if self.aug_depth == 0 {
            (self.diffusion_steps / 4).max(1)
        } else {
            self.aug_depth
        }
    }

    /// Penalty weight at a given iteration, after warm-up.
    pub fn lambda_at(&self, iteration: usize) -> f64 {
        let ramp = self.lambda_warmup * self.iterations as f64;
        if ramp <= 0.0 {
            self.lambda
        } else {
            self.lambda * (iteration as f64 / ramp).min(1.0)
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which sub-losses a method activates.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveLosses {
    pub augmentor: Augmentor,
    pub mask: MaskMode,
    pub lambda: f64,
    pub baseline: Option<Baseline>,
    /// Restrict inputs to the target channel.
    pub target_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentor {
    None,
    Diffusion,
    Perturbation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Erm,
    Irmv1,
    Rex,
    Invrat,
}

pub fn dispatch(cfg: &TrainConfig) -> ActiveLosses {
    let aug = |augmentor, mask, lambda| ActiveLosses { augmentor, mask, lambda, baseline: None, target_only: false };
    let base = |b, target_only| ActiveLosses {
        augmentor: Augmentor::None,
        mask: MaskMode::Ones,
        lambda: if b == Baseline::Erm { 0.0 } else { cfg.lambda },
        baseline: Some(b),
        target_only,
    };
    match cfg.method {
        Method::Diffirm => aug(Augmentor::Diffusion, cfg.mask_mode, cfg.lambda),
        Method::Diffaug => aug(Augmentor::Diffusion, cfg.mask_mode, 0.0),
        Method::DiffirmMinus => aug(Augmentor::Diffusion, MaskMode::Zeros, cfg.lambda),
        Method::Advaug => aug(Augmentor::Perturbation, cfg.mask_mode, 0.0),
        Method::Erm => base(Baseline::Erm, false),
        Method::ErmAr => base(Baseline::Erm, true),
        Method::Irmv1 => base(Baseline::Irmv1, false),
        Method::Rex => base(Baseline::Rex, false),
        Method::Invrat => base(Baseline::Invrat, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.depth(), 25);
        assert_eq!(c.k_envs, 5);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::from_toml("method = \"rex\"\nlambda = 2.5\nseed = 4\n").unwrap();
        assert_eq!(c.method, Method::Rex);
        assert_eq!(c.lambda, 2.5);
        assert!(TrainConfig::from_toml("bogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("method = \"magic\"\n").is_err());
        assert!(TrainConfig::from_toml("method = \"rex\"\nbaseline_envs = 1\n").is_err());
    }

    #[test]
    fn warmup_ramp() {
        let c = TrainConfig { iterations: 100, lambda: 2.0, ..Default::default() };
        assert_eq!(c.lambda_at(0), 0.0);
        assert_eq!(c.lambda_at(10), 1.0);
        assert_eq!(c.lambda_at(50), 2.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn variant_table() {
        let with = |m| dispatch(&TrainConfig { method: m, ..Default::default() });
        assert_eq!(with(Method::Diffaug).lambda, 0.0);
        assert_eq!(with(Method::DiffirmMinus).mask, MaskMode::Zeros);
        assert_eq!(with(Method::Advaug).augmentor, Augmentor::Perturbation);
        assert!(with(Method::ErmAr).target_only);
        assert_eq!(with(Method::Diffirm).lambda, 1.0);
    }
}
