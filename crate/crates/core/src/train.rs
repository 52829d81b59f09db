//! Training loop: warm-up on the completeness loss, then joint optimization
//! of completeness + correctness + distance-map losses with Adam, one
//! multiplier ascent per step after the parameter update.
//!
//! Determinism contract: all randomness flows through seeded ChaCha streams
//! in a fixed consumption order, convolution reductions are per-output
//! serial, and parallel work never reorders accumulation, so identical
//! seeds and configs reproduce loss curves bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cdt::{self, CdtParams, GumbelParams};
use crate::error::{Error, Result};
use crate::losses::{self, AucprState, TpsParams, TverskyParams, WeightMapParams};
use crate::metrics;
use crate::model::{Parameter, ToyUNet, ToyUNetConfig};
use crate::rvol;
use crate::synth::Sample;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Warm-up + completeness + correctness + distance-map loss.
    Dtpdt,
    /// Balanced Tversky only (the dice-style ablation baseline).
    DiceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Joint,
}

#[derive(Debug, Clone)]
pub struct AucprConfig {
    /// Fixed positive prior; `None` recomputes it per crop as the foreground
    /// fraction.
    pub delta0_override: Option<f64>,
    pub m: usize,
    pub nu_lr: f64,
}

impl Default for AucprConfig {
    fn default() -> Self {
        AucprConfig {
            delta0_override: None,
            m: 10,
            nu_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
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
    pub loss_mode: LossMode,
    pub tversky: TverskyParams,
    pub weight: WeightMapParams,
    pub tps: TpsParams,
    pub aucpr: AucprConfig,
    pub cdt: CdtParams,
    pub gumbel_tau: f64,
    /// Sliding-window stride for validation prediction.
    pub val_stride: usize,
    pub threshold: f64,
    pub bd_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
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
            loss_mode: LossMode::Dtpdt,
            tversky: TverskyParams::new(0.3, 0.7).expect("valid defaults"),
            weight: WeightMapParams::default(),
            tps: TpsParams::default(),
            aucpr: AucprConfig::default(),
            cdt: CdtParams::default(),
            gumbel_tau: 0.1,
            val_stride: 32,
            threshold: 0.5,
            bd_frac: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidParam(
                "warmup_epochs must be smaller than epochs".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidParam("lr must be positive".into()));
        }
        if self.crops_per_epoch == 0 {
            return Err(Error::InvalidParam("crops_per_epoch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }

    pub fn phase_at(&self, epoch: usize) -> Phase {
        if epoch < self.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Joint
        }
    }
}

/// Adam with bias correction. Slot layout: model parameters first, then the
/// per-anchor thresholds.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        cfg: &TrainConfig,
        lr: f64,
        grads: &[Vec<f64>],
        mut apply: impl FnMut(usize, usize, f64),
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        for (slot, g) in grads.iter().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for (j, &gj) in g.iter().enumerate() {
                m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
                v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                apply(slot, j, update);
            }
        }
    }
}

/// One training crop with the ground-truth pieces the losses consume.
/// `dc_max` comes from the full volume so the distance weighting stays
/// consistent across crops of one sample.
#[derive(Debug, Clone)]
pub struct CropBatch {
    pub input: Volume,
    pub mask: Volume,
    pub dc_map: Volume,
    pub dc_max: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub topo_com: f64,
    pub topo_cor: f64,
    pub cdt: f64,
    pub total: f64,
}

/// Schedule instrumentation for the acceptance suite.
#[derive(Debug, Clone, Copy, Default)]
pub struct Counters {
    pub steps: u64,
    pub topo_cor_evals: u64,
    pub cdt_evals: u64,
    pub skipped_crops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_topo_com: f64,
    pub l_topo_cor: f64,
    pub l_cdt: f64,
    pub val_dsc: f64,
    pub val_td: f64,
    pub val_bd: f64,
    pub val_fpr: f64,
    pub lr: f64,
}

pub struct FitResult {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub best_params: Vec<Parameter>,
    pub counters: Counters,
    pub aucpr: AucprState,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ToyUNet,
    pub aucpr: AucprState,
    pub counters: Counters,
    adam: Adam,
    gumbel_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_cfg: ToyUNetConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ToyUNet::new(model_cfg)?;
        let aucpr = AucprState::new(
            cfg.aucpr.delta0_override.unwrap_or(0.5),
            cfg.aucpr.m,
            cfg.aucpr.nu_lr,
        )?;
        let mut sizes: Vec<usize> = model.params.iter().map(|p| p.value.len()).collect();
        sizes.extend(std::iter::repeat(1).take(aucpr.m));
        let adam = Adam::new(&sizes);
        let gumbel_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6775_6d62_656c_0001);
        Ok(Trainer {
            cfg,
            model,
            aucpr,
            counters: Counters::default(),
            adam,
            gumbel_rng,
        })
    }

    /// One optimization step on a crop. Warm-up evaluates the completeness
    /// loss only; the joint phase adds the correctness and distance-map
    /// losses, and runs the multiplier ascent after the Adam update using
    /// this step's prediction snapshot.
    pub fn train_step(&mut self, batch: &CropBatch, phase: Phase, lr: f64) -> Result<StepLosses> {
        if batch.mask.sum() <= 0.0 {
            return Err(Error::EmptyGroundTruth);
        }
        let n_model = self.model.params.len();
        let mut tape = Tape::new();
        let fwd = self.model.forward(&mut tape, &batch.input, true)?;
        let (prob_bg, prob_fg) = tape.channel_softmax(fwd.logits.0, fwd.logits.1)?;

        let dtpdt = self.cfg.loss_mode == LossMode::Dtpdt;
        let joint = dtpdt && phase == Phase::Joint;

        let mut losses = StepLosses::default();
        let topo_com = if dtpdt {
            let weights = losses_weight_map(batch, &self.cfg.weight);
            let tv = losses::tversky_loss(&mut tape, prob_fg, &batch.mask, &self.cfg.tversky)?;
            let ce = losses::weighted_ce_loss(&mut tape, prob_fg, &batch.mask, &weights)?;
            tape.add(tv, ce)?
        } else {
            losses::tversky_loss(&mut tape, prob_fg, &batch.mask, &TverskyParams::balanced())?
        };
        losses.topo_com = tape.scalar_value(topo_com);

        let mut threshold_ids = Vec::new();
        let total = if joint {
            if self.cfg.aucpr.delta0_override.is_none() {
                let frac = batch.mask.sum() / batch.mask.len() as f64;
                self.aucpr.set_delta0(frac.clamp(1e-6, 1.0 - 1e-6))?;
            }
            threshold_ids = self
                .aucpr
                .thresholds
                .iter()
                .map(|&t| tape.scalar_param(t))
                .collect();
            let topo_cor =
                losses::topo_cor_loss(&mut tape, prob_fg, &batch.mask, &self.aucpr, &threshold_ids)?;
            self.counters.topo_cor_evals += 1;
            losses.topo_cor = tape.scalar_value(topo_cor);

            let gp = GumbelParams {
                tau: self.cfg.gumbel_tau,
                rng_seed: 0,
                frozen_noise: None,
                eval_mode: false,
            };
            let (_z_bg, z_fg) =
                cdt::gumbel_softmax(&mut tape, (prob_bg, prob_fg), &gp, &mut self.gumbel_rng)?;
            let boundary = cdt::soft_boundary(&mut tape, z_fg, &batch.mask)?;
            let pred_dist = cdt::cdt_transform(&mut tape, z_fg, boundary, &self.cfg.cdt)?;
            let gt_boundary = crate::synth::hard_boundary(&batch.mask)?;
            let gt_dist = cdt::cdt_map(&batch.mask, &gt_boundary, &self.cfg.cdt)?;
            let l_cdt = cdt::cdt_loss(&mut tape, pred_dist, &gt_dist, &batch.mask)?;
            self.counters.cdt_evals += 1;
            losses.cdt = tape.scalar_value(l_cdt);

            let com_w = tape.scale(topo_com, self.cfg.tps.lambda1)?;
            let cor_w = tape.scale(topo_cor, self.cfg.tps.lambda2)?;
            let tps = tape.add(com_w, cor_w)?;
            tape.add(tps, l_cdt)?
        } else {
            topo_com
        };
        losses.total = tape.scalar_value(total);
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {}",
                losses.total
            )));
        }

        let pred_snapshot = if joint {
            Some(tape.value(prob_fg).clone())
        } else {
            None
        };

        tape.backward(total)?;

        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_model + self.aucpr.m);
        for &id in &fwd.param_ids {
            grads.push(match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(id).len()],
            });
        }
        for k in 0..self.aucpr.m {
            grads.push(match threshold_ids.get(k) {
                Some(&id) => tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0]),
                None => vec![0.0],
            });
        }
        drop(tape);

        let model_params = &mut self.model.params;
        let thresholds = &mut self.aucpr.thresholds;
        self.adam.step(&self.cfg, lr, &grads, |slot, j, update| {
            if slot < n_model {
                model_params[slot].value.data_mut()[j] -= update;
            } else {
                thresholds[slot - n_model] -= update;
            }
        });
        self.aucpr.clamp_thresholds();

        if let Some(snapshot) = pred_snapshot {
            self.aucpr.update_multipliers(&snapshot, &batch.mask)?;
        }
        self.counters.steps += 1;
        Ok(losses)
    }
}

fn losses_weight_map(batch: &CropBatch, p: &WeightMapParams) -> Volume {
    losses::weight_map_parts(&batch.mask, &batch.dc_map, batch.dc_max, p)
}

/// Runs the full schedule and returns the log plus the best-validation-DSC
/// parameter snapshot.
pub fn fit(
    train: &[Sample],
    val: &[Sample],
    model_cfg: ToyUNetConfig,
    cfg: TrainConfig,
) -> Result<FitResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fit needs non-empty train and val sets".into()));
    }
    let crop = model_cfg.crop;
    for s in train.iter().chain(val) {
        let d = s.input.dims();
        if d.0 < crop.0 || d.1 < crop.1 || d.2 < crop.2 {
            return Err(Error::Data(format!(
                "sample dims {:?} smaller than crop {:?}",
                d, crop
            )));
        }
    }
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let cfg = trainer.cfg.clone();
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x63726f_70_0001);

    // foreground voxel lists for crop biasing
    let fg_lists: Vec<Vec<usize>> = train
        .iter()
        .map(|s| {
            s.bundle
                .mask
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_val_dsc = f64::NEG_INFINITY;
    let mut best_params = trainer.model.params.clone();

    for epoch in 0..cfg.epochs {
        let phase = cfg.phase_at(epoch);
        let lr = cfg.lr_at(epoch);
        let mut sums = StepLosses::default();
        let mut executed = 0usize;
        for _ in 0..cfg.crops_per_epoch {
            let si = crop_rng.gen_range(0..train.len());
            let batch = sample_crop(&train[si], &fg_lists[si], crop, &cfg, &mut crop_rng);
            if batch.mask.sum() <= 0.0 {
                trainer.counters.skipped_crops += 1;
                continue;
            }
            let l = trainer.train_step(&batch, phase, lr)?;
            sums.topo_com += l.topo_com;
            sums.topo_cor += l.topo_cor;
            sums.cdt += l.cdt;
            sums.total += l.total;
            executed += 1;
        }
        let denom = executed.max(1) as f64;

        let mut val_metrics = [0.0f64; 4];
        for s in val {
            let prob = predict_volume(&trainer.model, &s.input, crop, cfg.val_stride)?;
            let rep = metrics::evaluate(&prob, &s.bundle, cfg.threshold, cfg.bd_frac, false)?;
            val_metrics[0] += rep.dsc;
            val_metrics[1] += rep.td;
            val_metrics[2] += rep.bd;
            val_metrics[3] += rep.fpr;
        }
        let nv = val.len() as f64;
        let row = EpochLog {
            epoch,
            l_topo_com: sums.topo_com / denom,
            l_topo_cor: sums.topo_cor / denom,
            l_cdt: sums.cdt / denom,
            val_dsc: val_metrics[0] / nv,
            val_td: val_metrics[1] / nv,
            val_bd: val_metrics[2] / nv,
            val_fpr: val_metrics[3] / nv,
            lr,
        };
        if row.val_dsc > best_val_dsc {
            best_val_dsc = row.val_dsc;
            best_epoch = epoch;
            best_params = trainer.model.params.clone();
        }
        log.push(row);
    }

    Ok(FitResult {
        log,
        best_epoch,
        best_val_dsc,
        best_params,
        counters: trainer.counters,
        aucpr: trainer.aucpr,
    })
}

/// Draw one augmented training crop. Consumption order of the RNG stream is
/// fixed: center bias, center, flips, rotation angle.
fn sample_crop(
    sample: &Sample,
    fg: &[usize],
    crop: (usize, usize, usize),
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> CropBatch {
    let dims = sample.input.dims();
    let center = if !fg.is_empty() && rng.gen::<f64>() < 0.8 {
        let idx = fg[rng.gen_range(0..fg.len())];
        sample.input.coords(idx)
    } else {
        (
            rng.gen_range(0..dims.0),
            rng.gen_range(0..dims.1),
            rng.gen_range(0..dims.2),
        )
    };
    let origin = (
        center.0.saturating_sub(crop.0 / 2).min(dims.0 - crop.0),
        center.1.saturating_sub(crop.1 / 2).min(dims.1 - crop.1),
        center.2.saturating_sub(crop.2 / 2).min(dims.2 - crop.2),
    );
    let mut input = sample.input.crop(origin, crop).expect("validated crop");
    let mut mask = sample.bundle.mask.crop(origin, crop).expect("validated crop");
    let mut dc = sample.bundle.dc_map.crop(origin, crop).expect("validated crop");

    if cfg.augment {
        let flip_x = rng.gen_bool(0.5);
        let flip_y = rng.gen_bool(0.5);
        let theta = (rng.gen::<f64>() * 2.0 - 1.0) * 10f64.to_radians();
        for v in [&mut input, &mut mask, &mut dc] {
            if flip_x {
                *v = flip(v, 0);
            }
            if flip_y {
                *v = flip(v, 1);
            }
            *v = rotate_z_nearest(v, theta);
        }
    }
    CropBatch {
        input,
        mask,
        dc_map: dc,
        dc_max: sample.bundle.dc_max,
    }
}

fn flip(v: &Volume, axis: usize) -> Volume {
    let (nx, ny, nz) = v.dims();
    Volume::from_fn((nx, ny, nz), |x, y, z| match axis {
        0 => v.get(nx - 1 - x, y, z),
        1 => v.get(x, ny - 1 - y, z),
        _ => v.get(x, y, nz - 1 - z),
    })
}

/// Rotation about the z axis with nearest-neighbor resampling; voxels whose
/// source falls outside the crop become background.
fn rotate_z_nearest(v: &Volume, theta: f64) -> Volume {
    let (nx, ny, nz) = v.dims();
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    Volume::from_fn((nx, ny, nz), |x, y, z| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = (cx + dx * c + dy * s).round();
        let sy = (cy - dx * s + dy * c).round();
        if sx < 0.0 || sy < 0.0 || sx >= nx as f64 || sy >= ny as f64 {
            0.0
        } else {
            v.get(sx as usize, sy as usize, z)
        }
    })
}

/// Sliding-window prediction with overlap averaging; deterministic (eval
/// mode, no sampling). Inputs smaller than the crop are zero-padded and the
/// result cropped back.
pub fn predict_volume(
    model: &ToyUNet,
    input: &Volume,
    crop: (usize, usize, usize),
    stride: usize,
) -> Result<Volume> {
    if stride == 0 || stride > crop.0 || stride > crop.1 || stride > crop.2 {
        return Err(Error::InvalidParam(format!(
            "stride {stride} must lie in [1, crop dims {crop:?}]"
        )));
    }
    predict_with(
        |patch| {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, patch, false)?;
            let (_bg, fg) = tape.channel_softmax(fwd.logits.0, fwd.logits.1)?;
            Ok(tape.value(fg).clone())
        },
        input,
        crop,
        stride,
    )
}

/// Window scheduling and overlap averaging, generic over the per-crop
/// predictor so the mechanics are testable without a model.
pub fn predict_with(
    mut predict: impl FnMut(&Volume) -> Result<Volume>,
    input: &Volume,
    crop: (usize, usize, usize),
    stride: usize,
) -> Result<Volume> {
    let dims = input.dims();
    let padded_dims = (
        dims.0.max(crop.0),
        dims.1.max(crop.1),
        dims.2.max(crop.2),
    );
    let padded = if padded_dims != dims {
        let mut p = Volume::zeros(padded_dims);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    p.set(x, y, z, input.get(x, y, z));
                }
            }
        }
        p
    } else {
        input.clone()
    };

    let starts = |dim: usize, c: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + c < dim).collect();
        v.push(dim - c);
        v
    };
    let xs = starts(padded_dims.0, crop.0);
    let ys = starts(padded_dims.1, crop.1);
    let zs = starts(padded_dims.2, crop.2);

    let mut sum = vec![0.0; padded.len()];
    let mut count = vec![0.0; padded.len()];
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let patch = padded.crop((x0, y0, z0), crop)?;
                let prob = predict(&patch)?;
                if prob.dims() != crop {
                    return Err(Error::ShapeMismatch(prob.dims(), crop));
                }
                for z in 0..crop.2 {
                    for y in 0..crop.1 {
                        for x in 0..crop.0 {
                            let i = (x0 + x) + padded_dims.0 * ((y0 + y) + padded_dims.1 * (z0 + z));
                            sum[i] += prob.get(x, y, z);
                            count[i] += 1.0;
                        }
                    }
                }
            }
        }
    }
    let mut out = Volume::new(
        padded_dims,
        sum.iter().zip(&count).map(|(s, &c): (&f64, &f64)| s / c.max(1.0)).collect(),
    )?;
    if padded_dims != dims {
        out = out.crop((0, 0, 0), dims)?;
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub names: Vec<String>,
    pub shapes: Vec<[usize; 3]>,
    pub epoch: usize,
    pub config_hash: String,
}

/// Writes all parameter volumes concatenated in declaration order as one
/// RVOL file plus a JSON manifest next to it.
pub fn save_checkpoint(
    path: &Path,
    params: &[Parameter],
    epoch: usize,
    config_hash: &str,
) -> Result<()> {
    let manifest = CheckpointManifest {
        names: params.iter().map(|p| p.name.clone()).collect(),
        shapes: params
            .iter()
            .map(|p| {
                let d = p.value.dims();
                [d.0, d.1, d.2]
            })
            .collect(),
        epoch,
        config_hash: config_hash.to_string(),
    };
    let total: usize = params.iter().map(|p| p.value.len()).sum();
    let mut flat = Vec::with_capacity(total);
    for p in params {
        flat.extend_from_slice(p.value.data());
    }
    rvol::export_volume(&Volume::new((total, 1, 1), flat)?, path)?;
    let mut manifest_path = path.as_os_str().to_os_string();
    manifest_path.push(".manifest.json");
    std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint into freshly named parameters; shapes and names must
/// match the model the config describes.
pub fn load_checkpoint(path: &Path, model: &ToyUNet) -> Result<(Vec<Parameter>, CheckpointManifest)> {
    let mut manifest_path = path.as_os_str().to_os_string();
    manifest_path.push(".manifest.json");
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(std::path::PathBuf::from(&manifest_path))?)?;
    if manifest.names.len() != model.params.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, model expects {}",
            manifest.names.len(),
            model.params.len()
        )));
    }
    for (i, p) in model.params.iter().enumerate() {
        let d = p.value.dims();
        if manifest.names[i] != p.name || manifest.shapes[i] != [d.0, d.1, d.2] {
            return Err(Error::Data(format!(
                "checkpoint parameter {i} is {}{:?}, model expects {}{:?}",
                manifest.names[i], manifest.shapes[i], p.name, d
            )));
        }
    }
    let flat = rvol::import_volume(path, false)?;
    let total: usize = manifest.shapes.iter().map(|s| s[0] * s[1] * s[2]).sum();
    if flat.len() != total {
        return Err(Error::Data(format!(
            "checkpoint data holds {} values, manifest implies {}",
            flat.len(),
            total
        )));
    }
    let mut params = Vec::with_capacity(manifest.names.len());
    let mut off = 0usize;
    for (name, shape) in manifest.names.iter().zip(&manifest.shapes) {
        let n = shape[0] * shape[1] * shape[2];
        let data = flat.data()[off..off + n].to_vec();
        off += n;
        params.push(Parameter {
            name: name.clone(),
            value: Volume::new((shape[0], shape[1], shape[2]), data)?,
        });
    }
    Ok((params, manifest))
}
