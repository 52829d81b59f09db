//! Plain-text run configuration.
//!
//! Format: `[section]` headers over flat `key = value` pairs, `#` comments.
//! Unknown sections or keys are rejected. Every field has a default; where a
//! published operating point exists it is the default (τ=0.1, γ=-0.3,
//! λ_fg=10, m=10, kernel 31³, lr 0.002 dropped 10x at epoch 50, 60 epochs
//! with 10 warm-up, batch of one crop, threshold 0.5).
//!
//! [`RunConfig::hash`] is a SHA-256 over the canonical rendering of the
//! fully resolved configuration and is embedded in every artifact the CLI
//! produces.

use sha2::{Digest, Sha256};

use crate::cdt::CdtParams;
use crate::error::{Error, Result};
use crate::losses::{TpsParams, TverskyParams, WeightMapParams};
use crate::model::ToyUNetConfig;
use crate::synth::{RenderParams, SynthParams};
use crate::train::{AucprConfig, LossMode, TrainConfig};

#[derive(Debug, Clone)]
pub struct SynthSection {
    pub seed: u64,
    pub count: usize,
    pub dims: usize,
    pub generations: usize,
    pub root_radius: f64,
    pub radius_decay: f64,
    pub length_decay: f64,
    pub branch_angle_deg: f64,
    pub jitter_deg: f64,
    pub root_length: f64,
    pub noise_sigma: f64,
    pub contrast_min: f64,
    pub edge_width: f64,
}

#[derive(Debug, Clone)]
pub struct ModelSection {
    pub levels: usize,
    pub base_channels: usize,
    pub crop: usize,
    pub instance_norm: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub crops_per_epoch: usize,
    pub augment: bool,
    pub seed: u64,
    pub loss: LossMode,
    pub val_stride: usize,
    pub eval_stride: usize,
}

#[derive(Debug, Clone)]
pub struct LossSection {
    pub alpha_t: f64,
    pub lambda_fg: f64,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `None` = per-crop foreground fraction.
    pub delta0: Option<f64>,
    pub m: usize,
    pub nu_lr: f64,
}

#[derive(Debug, Clone)]
pub struct CdtSection {
    pub tau: f64,
    pub gamma: f64,
    pub kernel_size: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsSection {
    pub threshold: f64,
    pub bd_frac: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub cdt: CdtSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthSection {
                seed: 0,
                count: 20,
                dims: 64,
                generations: 4,
                root_radius: 3.0,
                radius_decay: 0.75,
                length_decay: 0.75,
                branch_angle_deg: 30.0,
                jitter_deg: 8.0,
                root_length: 14.0,
                noise_sigma: 0.22,
                contrast_min: 0.30,
                edge_width: 1.0,
            },
            model: ModelSection {
                levels: 2,
                base_channels: 8,
                crop: 32,
                instance_norm: true,
            },
            train: TrainSection {
                epochs: 60,
                warmup_epochs: 10,
                lr: 0.002,
                lr_drop_epoch: 50,
                lr_drop_factor: 10.0,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                crops_per_epoch: 20,
                augment: true,
                seed: 0,
                loss: LossMode::Dtpdt,
                val_stride: 32,
                eval_stride: 16,
            },
            loss: LossSection {
                alpha_t: 0.3,
                lambda_fg: 10.0,
                epsilon: 1e-6,
                lambda1: 1.0,
                lambda2: 1.0,
                delta0: None,
                m: 10,
                nu_lr: 0.01,
            },
            cdt: CdtSection {
                tau: 0.1,
                gamma: -0.3,
                kernel_size: 31,
            },
            metrics: MetricsSection {
                threshold: 0.5,
                bd_frac: 0.8,
            },
        }
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected unsigned integer, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses the `key = value` text onto the defaults, rejecting unknown
    /// sections and keys.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "synth" | "model" | "train" | "loss" | "cdt" | "metrics" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        match (section, key) {
            ("synth", "seed") => self.synth.seed = parse_u64(&full, v)?,
            ("synth", "count") => self.synth.count = parse_usize(&full, v)?,
            ("synth", "dims") => self.synth.dims = parse_usize(&full, v)?,
            ("synth", "generations") => self.synth.generations = parse_usize(&full, v)?,
            ("synth", "root_radius") => self.synth.root_radius = parse_f64(&full, v)?,
            ("synth", "radius_decay") => self.synth.radius_decay = parse_f64(&full, v)?,
            ("synth", "length_decay") => self.synth.length_decay = parse_f64(&full, v)?,
            ("synth", "branch_angle_deg") => self.synth.branch_angle_deg = parse_f64(&full, v)?,
            ("synth", "jitter_deg") => self.synth.jitter_deg = parse_f64(&full, v)?,
            ("synth", "root_length") => self.synth.root_length = parse_f64(&full, v)?,
            ("synth", "noise_sigma") => self.synth.noise_sigma = parse_f64(&full, v)?,
            ("synth", "contrast_min") => self.synth.contrast_min = parse_f64(&full, v)?,
            ("synth", "edge_width") => self.synth.edge_width = parse_f64(&full, v)?,
            ("model", "levels") => self.model.levels = parse_usize(&full, v)?,
            ("model", "base_channels") => self.model.base_channels = parse_usize(&full, v)?,
            ("model", "crop") => self.model.crop = parse_usize(&full, v)?,
            ("model", "instance_norm") => self.model.instance_norm = parse_bool(&full, v)?,
            ("train", "epochs") => self.train.epochs = parse_usize(&full, v)?,
            ("train", "warmup_epochs") => self.train.warmup_epochs = parse_usize(&full, v)?,
            ("train", "lr") => self.train.lr = parse_f64(&full, v)?,
            ("train", "lr_drop_epoch") => self.train.lr_drop_epoch = parse_usize(&full, v)?,
            ("train", "lr_drop_factor") => self.train.lr_drop_factor = parse_f64(&full, v)?,
            ("train", "adam_beta1") => self.train.adam_beta1 = parse_f64(&full, v)?,
            ("train", "adam_beta2") => self.train.adam_beta2 = parse_f64(&full, v)?,
            ("train", "adam_eps") => self.train.adam_eps = parse_f64(&full, v)?,
            ("train", "crops_per_epoch") => self.train.crops_per_epoch = parse_usize(&full, v)?,
            ("train", "augment") => self.train.augment = parse_bool(&full, v)?,
            ("train", "seed") => self.train.seed = parse_u64(&full, v)?,
            ("train", "loss") => {
                self.train.loss = match v {
                    "dtpdt" => LossMode::Dtpdt,
                    "dice-only" => LossMode::DiceOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "{full}: expected dtpdt or dice-only, got {other:?}"
                        )))
                    }
                }
            }
            ("train", "val_stride") => self.train.val_stride = parse_usize(&full, v)?,
            ("train", "eval_stride") => self.train.eval_stride = parse_usize(&full, v)?,
            ("loss", "alpha_t") => self.loss.alpha_t = parse_f64(&full, v)?,
            ("loss", "lambda_fg") => self.loss.lambda_fg = parse_f64(&full, v)?,
            ("loss", "epsilon") => self.loss.epsilon = parse_f64(&full, v)?,
            ("loss", "lambda1") => self.loss.lambda1 = parse_f64(&full, v)?,
            ("loss", "lambda2") => self.loss.lambda2 = parse_f64(&full, v)?,
            ("loss", "delta0") => {
                self.loss.delta0 = if v == "auto" {
                    None
                } else {
                    Some(parse_f64(&full, v)?)
                }
            }
            ("loss", "m") => self.loss.m = parse_usize(&full, v)?,
            ("loss", "nu_lr") => self.loss.nu_lr = parse_f64(&full, v)?,
            ("cdt", "tau") => self.cdt.tau = parse_f64(&full, v)?,
            ("cdt", "gamma") => self.cdt.gamma = parse_f64(&full, v)?,
            ("cdt", "kernel_size") => self.cdt.kernel_size = parse_usize(&full, v)?,
            ("metrics", "threshold") => self.metrics.threshold = parse_f64(&full, v)?,
            ("metrics", "bd_frac") => self.metrics.bd_frac = parse_f64(&full, v)?,
            _ => return Err(Error::Config(format!("unknown key {full}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_params(0)?.validate()?;
        self.model_cfg()?.validate()?;
        self.train_cfg()?.validate()?;
        if !(self.metrics.threshold > 0.0 && self.metrics.threshold < 1.0) {
            return Err(Error::Config("metrics.threshold must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Canonical rendering: every key, sorted, fully resolved. Hash input.
    pub fn canonical(&self) -> String {
        let s = &self.synth;
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        let c = &self.cdt;
        let mm = &self.metrics;
        let loss_mode = match t.loss {
            LossMode::Dtpdt => "dtpdt",
            LossMode::DiceOnly => "dice-only",
        };
        let delta0 = match l.delta0 {
            Some(d) => format!("{d:?}"),
            None => "auto".into(),
        };
        let mut lines = vec![
            format!("cdt.gamma = {:?}", c.gamma),
            format!("cdt.kernel_size = {}", c.kernel_size),
            format!("cdt.tau = {:?}", c.tau),
            format!("loss.alpha_t = {:?}", l.alpha_t),
            format!("loss.delta0 = {delta0}"),
            format!("loss.epsilon = {:?}", l.epsilon),
            format!("loss.lambda1 = {:?}", l.lambda1),
            format!("loss.lambda2 = {:?}", l.lambda2),
            format!("loss.lambda_fg = {:?}", l.lambda_fg),
            format!("loss.m = {}", l.m),
            format!("loss.nu_lr = {:?}", l.nu_lr),
            format!("metrics.bd_frac = {:?}", mm.bd_frac),
            format!("metrics.threshold = {:?}", mm.threshold),
            format!("model.base_channels = {}", m.base_channels),
            format!("model.crop = {}", m.crop),
            format!("model.instance_norm = {}", m.instance_norm),
            format!("model.levels = {}", m.levels),
            format!("synth.branch_angle_deg = {:?}", s.branch_angle_deg),
            format!("synth.contrast_min = {:?}", s.contrast_min),
            format!("synth.count = {}", s.count),
            format!("synth.dims = {}", s.dims),
            format!("synth.edge_width = {:?}", s.edge_width),
            format!("synth.generations = {}", s.generations),
            format!("synth.jitter_deg = {:?}", s.jitter_deg),
            format!("synth.length_decay = {:?}", s.length_decay),
            format!("synth.noise_sigma = {:?}", s.noise_sigma),
            format!("synth.radius_decay = {:?}", s.radius_decay),
            format!("synth.root_length = {:?}", s.root_length),
            format!("synth.root_radius = {:?}", s.root_radius),
            format!("synth.seed = {}", s.seed),
            format!("train.adam_beta1 = {:?}", t.adam_beta1),
            format!("train.adam_beta2 = {:?}", t.adam_beta2),
            format!("train.adam_eps = {:?}", t.adam_eps),
            format!("train.augment = {}", t.augment),
            format!("train.crops_per_epoch = {}", t.crops_per_epoch),
            format!("train.epochs = {}", t.epochs),
            format!("train.eval_stride = {}", t.eval_stride),
            format!("train.loss = {loss_mode}"),
            format!("train.lr = {:?}", t.lr),
            format!("train.lr_drop_epoch = {}", t.lr_drop_epoch),
            format!("train.lr_drop_factor = {:?}", t.lr_drop_factor),
            format!("train.seed = {}", t.seed),
            format!("train.val_stride = {}", t.val_stride),
            format!("train.warmup_epochs = {}", t.warmup_epochs),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Synthesis parameters for the i-th volume of a dataset.
    pub fn synth_params(&self, index: usize) -> Result<SynthParams> {
        Ok(SynthParams {
            seed: self.synth.seed.wrapping_add(index as u64),
            dims: (self.synth.dims, self.synth.dims, self.synth.dims),
            generations: self.synth.generations,
            root_radius: self.synth.root_radius,
            radius_decay: self.synth.radius_decay,
            length_decay: self.synth.length_decay,
            branch_angle_deg: self.synth.branch_angle_deg,
            jitter_deg: self.synth.jitter_deg,
            root_length: self.synth.root_length,
        })
    }

    pub fn render_params(&self) -> RenderParams {
        RenderParams {
            noise_sigma: self.synth.noise_sigma,
            contrast_min: self.synth.contrast_min,
            edge_width: self.synth.edge_width,
        }
    }

    pub fn model_cfg(&self) -> Result<ToyUNetConfig> {
        Ok(ToyUNetConfig {
            levels: self.model.levels,
            base_channels: self.model.base_channels,
            crop: (self.model.crop, self.model.crop, self.model.crop),
            instance_norm: self.model.instance_norm,
            seed: self.train.seed,
        })
    }

    pub fn train_cfg(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            warmup_epochs: self.train.warmup_epochs,
            lr: self.train.lr,
            lr_drop_epoch: self.train.lr_drop_epoch,
            lr_drop_factor: self.train.lr_drop_factor,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_eps: self.train.adam_eps,
            crops_per_epoch: self.train.crops_per_epoch,
            augment: self.train.augment,
            seed: self.train.seed,
            loss_mode: self.train.loss,
            tversky: TverskyParams::new(self.loss.alpha_t, 1.0 - self.loss.alpha_t)?,
            weight: WeightMapParams::new(self.loss.lambda_fg, self.loss.epsilon)?,
            tps: TpsParams::new(self.loss.lambda1, self.loss.lambda2)?,
            aucpr: AucprConfig {
                delta0_override: self.loss.delta0,
                m: self.loss.m,
                nu_lr: self.loss.nu_lr,
            },
            cdt: CdtParams::new(self.cdt.gamma, self.cdt.kernel_size)?,
            gumbel_tau: self.cdt.tau,
            val_stride: self.train.val_stride,
            threshold: self.metrics.threshold,
            bd_frac: self.metrics.bd_frac,
        })
    }
}
