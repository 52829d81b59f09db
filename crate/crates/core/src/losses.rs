//! Topology-surrogate losses.
//!
//! Two halves: a completeness objective (Tversky + distance-weighted
//! cross-entropy, which boosts thin peripheral branches) and a correctness
//! objective (a hinge-bounded precision-at-recall surrogate integrated over
//! a recall anchor grid, driven by Lagrangian multipliers). Their weighted
//! sum is the combined surrogate used by the trainer.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::synth::GroundTruthBundle;
use crate::volume::Volume;

/// Anchors never reach exactly 1; recall-at-1 is a degenerate operating point.
const ANCHOR_CAP: f64 = 1.0 - 1e-6;

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct TverskyParams {
    pub alpha_t: f64,
    pub beta_t: f64,
}

impl TverskyParams {
    /// `alpha_t + beta_t` must equal 1; both strictly inside (0,1).
    pub fn new(alpha_t: f64, beta_t: f64) -> Result<Self> {
        if !(alpha_t > 0.0 && alpha_t < 1.0 && beta_t > 0.0 && beta_t < 1.0) {
            return Err(Error::InvalidParam(
                "tversky weights must lie in (0,1)".into(),
            ));
        }
        if (alpha_t + beta_t - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!(
                "tversky weights must sum to 1, got {}",
                alpha_t + beta_t
            )));
        }
        Ok(TverskyParams { alpha_t, beta_t })
    }

    pub fn balanced() -> Self {
        TverskyParams {
            alpha_t: 0.5,
            beta_t: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WeightMapParams {
    pub lambda_fg: f64,
    pub epsilon: f64,
}

impl WeightMapParams {
    pub fn new(lambda_fg: f64, epsilon: f64) -> Result<Self> {
        if lambda_fg <= 0.0 {
            return Err(Error::InvalidParam("lambda_fg must be positive".into()));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidParam("epsilon must lie in (0,1)".into()));
        }
        Ok(WeightMapParams { lambda_fg, epsilon })
    }
}

impl Default for WeightMapParams {
    fn default() -> Self {
        WeightMapParams {
            lambda_fg: 10.0,
            epsilon: 1e-6,
        }
    }
}

/// Mixing weights of the combined surrogate.
#[derive(Debug, Clone, Copy)]
pub struct TpsParams {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for TpsParams {
    fn default() -> Self {
        TpsParams {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl TpsParams {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::InvalidParam("loss weights must be >= 0".into()));
        }
        Ok(TpsParams { lambda1, lambda2 })
    }
}

/// `1 - Σ(pred·gt) / (α_t·Σpred + β_t·Σgt)`, differentiable in `pred`.
pub fn tversky_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    p: &TverskyParams,
) -> Result<NodeId> {
    tape.value(pred).check_same_shape(gt)?;
    if !gt.is_binary() {
        return Err(Error::InvalidVolume("tversky ground truth must be binary".into()));
    }
    let gt_sum = gt.sum();
    if gt_sum <= 0.0 {
        return Err(Error::EmptyGroundTruth);
    }
    let gt_node = tape.constant(gt.clone());
    let inter = tape.mul(pred, gt_node)?;
    let num = tape.reduce_sum(inter, None)?;
    let pred_sum = tape.reduce_sum(pred, None)?;
    let den = tape.scale(pred_sum, p.alpha_t)?;
    let den = tape.add_c(den, p.beta_t * gt_sum)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    tape.add_c(neg, 1.0)
}

/// Distance-based voxel weights: foreground voxels get
/// `max(0, -λ_fg · ln(dc/dc_max + ε))`, background voxels 1. The clamp at 0
/// removes the slightly negative weight the raw formula assigns at
/// `dc == dc_max`.
pub fn weight_map(bundle: &GroundTruthBundle, p: &WeightMapParams) -> Volume {
    weight_map_parts(&bundle.mask, &bundle.dc_map, bundle.dc_max, p)
}

pub fn weight_map_parts(
    mask: &Volume,
    dc_map: &Volume,
    dc_max: f64,
    p: &WeightMapParams,
) -> Volume {
    let dc_max = if dc_max > 0.0 { dc_max } else { 1.0 };
    let mut out = Volume::zeros(mask.dims());
    for i in 0..mask.len() {
        out.data_mut()[i] = if mask.data()[i] != 0.0 {
            (-p.lambda_fg * (dc_map.data()[i] / dc_max + p.epsilon).ln()).max(0.0)
        } else {
            1.0
        };
    }
    out
}

/// Weighted binary cross-entropy, normalized by voxel count so the mixing
/// weights stay resolution independent. Probabilities are floored at
/// [`PROB_FLOOR`] on both sides before the logs.
pub fn weighted_ce_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    weights: &Volume,
) -> Result<NodeId> {
    tape.value(pred).check_same_shape(gt)?;
    tape.value(pred).check_same_shape(weights)?;
    let n = gt.len() as f64;
    let p_pos = tape.clamp_min(pred, PROB_FLOOR)?;
    let log_p = tape.log(p_pos)?;
    let neg_pred = tape.neg(pred)?;
    let one_minus = tape.add_c(neg_pred, 1.0)?;
    let q = tape.clamp_min(one_minus, PROB_FLOOR)?;
    let log_q = tape.log(q)?;

    let y = tape.constant(gt.clone());
    let not_y = tape.constant(gt.map(|v| 1.0 - v));
    let term_pos = tape.mul(y, log_p)?;
    let term_neg = tape.mul(not_y, log_q)?;
    let ce = tape.add(term_pos, term_neg)?;
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(ce, w)?;
    let total = tape.reduce_sum(weighted, None)?;
    tape.scale(total, -1.0 / n)
}

/// Completeness objective: Tversky plus distance-weighted cross-entropy.
pub fn topo_com_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    bundle: &GroundTruthBundle,
    tversky_p: &TverskyParams,
    weight_p: &WeightMapParams,
) -> Result<NodeId> {
    let weights = weight_map_parts(gt, &bundle.dc_map, bundle.dc_max, weight_p);
    let tv = tversky_loss(tape, pred, gt, tversky_p)?;
    let ce = weighted_ce_loss(tape, pred, gt, &weights)?;
    tape.add(tv, ce)
}

/// Hinge-bounded confusion sums; see [`Tape::hinge_sums`]. Thin wrapper that
/// keeps the loss-level naming.
pub fn hinge_bounds(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    threshold: NodeId,
) -> Result<(NodeId, NodeId)> {
    tape.hinge_sums(pred, gt, threshold)
}

/// State of the precision-at-recall surrogate: anchor grid, per-anchor
/// learnable thresholds, and the nonnegative Lagrangian multipliers.
#[derive(Debug, Clone)]
pub struct AucprState {
    /// Positive class prior; the base of the anchor grid.
    pub delta0: f64,
    pub m: usize,
    pub nu: Vec<f64>,
    /// Per-anchor thresholds, learned alongside the model and clamped to
    /// (0.01, 0.99).
    pub thresholds: Vec<f64>,
    pub nu_lr: f64,
}

impl AucprState {
    pub fn new(delta0: f64, m: usize, nu_lr: f64) -> Result<Self> {
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::InvalidParam("delta0 must lie in (0,1)".into()));
        }
        if m < 1 {
            return Err(Error::InvalidParam("anchor count m must be >= 1".into()));
        }
        Ok(AucprState {
            delta0,
            m,
            nu: vec![0.0; m],
            thresholds: vec![0.5; m],
            nu_lr,
        })
    }

    /// Anchor values `δ_k = δ₀ + (1-δ₀)k/m` for k = 1..m, capped strictly
    /// below 1.
    pub fn anchors(&self) -> Vec<f64> {
        (1..=self.m)
            .map(|k| (self.delta0 + (1.0 - self.delta0) * k as f64 / self.m as f64).min(ANCHOR_CAP))
            .collect()
    }

    /// Riemann weight `δ_k - δ_{k-1}` of the un-capped grid: constant
    /// `(1-δ₀)/m`, so the weights telescope to exactly `1-δ₀`.
    pub fn anchor_weight(&self) -> f64 {
        (1.0 - self.delta0) / self.m as f64
    }

    /// Reseat the grid on a new positive prior, keeping ν and thresholds.
    pub fn set_delta0(&mut self, delta0: f64) -> Result<()> {
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::InvalidParam("delta0 must lie in (0,1)".into()));
        }
        self.delta0 = delta0;
        Ok(())
    }

    pub fn clamp_thresholds(&mut self) {
        for t in &mut self.thresholds {
            *t = t.clamp(0.01, 0.99);
        }
    }

    /// Multiplier ascent on the recall constraints, evaluated on a
    /// gradient-free snapshot of the predictions, projected onto ν ≥ 0:
    /// `ν_k ← max(0, ν_k + nu_lr·(δ_k - tp_lower/|Y⁺|))`.
    pub fn update_multipliers(&mut self, pred_snapshot: &Volume, gt: &Volume) -> Result<()> {
        pred_snapshot.check_same_shape(gt)?;
        let y_pos = gt.sum();
        if y_pos <= 0.0 {
            return Err(Error::EmptyGroundTruth);
        }
        let anchors = self.anchors();
        for k in 0..self.m {
            let t = self.thresholds[k];
            let mut tp_lower = 0.0;
            for (&v, &y) in pred_snapshot.data().iter().zip(gt.data()) {
                if y != 0.0 {
                    tp_lower += 1.0 - (1.0 - (v - t)).max(0.0);
                }
            }
            let violation = anchors[k] - tp_lower / y_pos;
            self.nu[k] = (self.nu[k] + self.nu_lr * violation).max(0.0);
        }
        Ok(())
    }
}

/// Per-anchor Lagrangian
/// `L_k = -δ_k|Y⁺| / (δ_k|Y⁺| + FPᵘ) - ν_k·(TPˡ/|Y⁺| - δ_k)`,
/// differentiable in the predictions and the anchor threshold; ν_k enters as
/// a constant. The multiplier term is subtracted: the dual ascent on
/// `ν ≥ 0` maximizes it, the model update minimizes it.
pub fn par_lagrangian(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    k: usize,
    state: &AucprState,
    threshold: NodeId,
) -> Result<NodeId> {
    let y_pos = gt.sum();
    if y_pos <= 0.0 {
        return Err(Error::EmptyGroundTruth);
    }
    let delta_k = state.anchors()[k];
    let (tp_lower, fp_upper) = tape.hinge_sums(pred, gt, threshold)?;
    let c = delta_k * y_pos;
    let den = tape.add_c(fp_upper, c)?;
    let num = tape.scalar(c);
    let precision = tape.div(num, den)?;
    let term1 = tape.neg(precision)?;
    let recall = tape.scale(tp_lower, 1.0 / y_pos)?;
    let constraint = tape.add_c(recall, -delta_k)?;
    let term2 = tape.scale(constraint, state.nu[k])?;
    tape.sub(term1, term2)
}

/// Correctness objective: Riemann sum of the per-anchor Lagrangians over the
/// recall grid, `Σ_k (δ_k - δ_{k-1}) · L_k`. Minimizing it maximizes the
/// precision-recall area surrogate.
pub fn topo_cor_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    state: &AucprState,
    thresholds: &[NodeId],
) -> Result<NodeId> {
    if thresholds.len() != state.m {
        return Err(Error::InvalidParam(format!(
            "expected {} threshold nodes, got {}",
            state.m,
            thresholds.len()
        )));
    }
    let w = state.anchor_weight();
    let mut total: Option<NodeId> = None;
    for k in 0..state.m {
        let lk = par_lagrangian(tape, pred, gt, k, state, thresholds[k])?;
        let weighted = tape.scale(lk, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("m >= 1"))
}

/// Combined surrogate `λ₁·L_com + λ₂·L_cor`.
#[allow(clippy::too_many_arguments)]
pub fn tps_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Volume,
    bundle: &GroundTruthBundle,
    tversky_p: &TverskyParams,
    weight_p: &WeightMapParams,
    tps_p: &TpsParams,
    state: &AucprState,
    thresholds: &[NodeId],
) -> Result<NodeId> {
    let com = topo_com_loss(tape, pred, gt, bundle, tversky_p, weight_p)?;
    let cor = topo_cor_loss(tape, pred, gt, state, thresholds)?;
    let a = tape.scale(com, tps_p.lambda1)?;
    let b = tape.scale(cor, tps_p.lambda2)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_graph;
    use crate::synth::{generate_tree, SynthParams};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(dims: (usize, usize, usize), seed: u64, lo: f64, hi: f64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()).unwrap()
    }

    fn rand_mask(dims: (usize, usize, usize), seed: u64, fg_prob: f64) -> Volume {
        rand_vol(dims, seed, 0.0, 1.0).map(|v| (v < fg_prob) as i64 as f64)
    }

    fn eval_scalar(
        build: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
        pred: &Volume,
    ) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone(), false);
        let root = build(&mut tape, p).unwrap();
        tape.scalar_value(root)
    }

    #[test]
    fn tversky_perfect_prediction_is_zero() {
        let gt = rand_mask((4, 4, 4), 1, 0.4);
        let p = TverskyParams::new(0.3, 0.7).unwrap();
        let v = eval_scalar(|t, pred| tversky_loss(t, pred, &gt, &p), &gt);
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tversky_zero_prediction_is_one() {
        let gt = rand_mask((4, 4, 4), 2, 0.4);
        let p = TverskyParams::balanced();
        let v = eval_scalar(|t, pred| tversky_loss(t, pred, &gt, &p), &Volume::zeros((4, 4, 4)));
        assert_relative_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tversky_hand_case() {
        // pred = [0.5, 0.5], gt = [1, 0], alpha_t = 0.1:
        // 1 - 0.5 / (0.1*1.0 + 0.9*1.0) = 0.5
        let gt = Volume::new((2, 1, 1), vec![1.0, 0.0]).unwrap();
        let pred = Volume::new((2, 1, 1), vec![0.5, 0.5]).unwrap();
        let p = TverskyParams::new(0.1, 0.9).unwrap();
        let v = eval_scalar(|t, pr| tversky_loss(t, pr, &gt, &p), &pred);
        assert_relative_eq!(v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn tversky_rejects_empty_ground_truth() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Volume::filled((2, 2, 2), 0.5), false);
        let gt = Volume::zeros((2, 2, 2));
        assert!(matches!(
            tversky_loss(&mut tape, pred, &gt, &TverskyParams::balanced()),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn tversky_stays_in_unit_interval_on_random_inputs() {
        for seed in 0..40 {
            let gt = rand_mask((5, 5, 5), 100 + seed, 0.3);
            if gt.sum() == 0.0 {
                continue;
            }
            let pred = rand_vol((5, 5, 5), 200 + seed, 0.0, 1.0);
            let alpha = 0.05 + 0.9 * (seed as f64 / 40.0);
            let p = TverskyParams::new(alpha, 1.0 - alpha).unwrap();
            let v = eval_scalar(|t, pr| tversky_loss(t, pr, &gt, &p), &pred);
            assert!((0.0..=1.0).contains(&v), "seed {seed}: {v}");
        }
    }

    #[test]
    fn weight_map_values_match_the_formula() {
        let p = WeightMapParams::new(10.0, 1e-6).unwrap();
        let mask = Volume::new((3, 1, 1), vec![0.0, 1.0, 1.0]).unwrap();
        let dc = Volume::new((3, 1, 1), vec![0.0, 0.0, 2.0]).unwrap();
        let w = weight_map_parts(&mask, &dc, 4.0, &p);
        assert_eq!(w.data()[0], 1.0); // background
        assert_relative_eq!(w.data()[1], -10.0 * 1e-6f64.ln(), max_relative = 1e-12); // ~138.155
        assert_relative_eq!(w.data()[2], -10.0 * (0.5 + 1e-6f64).ln(), max_relative = 1e-12); // ~6.931
        assert!(w.data()[1] > 138.0 && w.data()[1] < 138.5);
        assert!(w.data()[2] > 6.9 && w.data()[2] < 6.94);
    }

    #[test]
    fn weight_map_is_monotone_and_clamped() {
        let p = WeightMapParams::new(10.0, 1e-6).unwrap();
        let n = 32;
        let mask = Volume::filled((n, 1, 1), 1.0);
        let dc = Volume::from_fn((n, 1, 1), |x, _, _| x as f64 / (n - 1) as f64 * 5.0);
        let w = weight_map_parts(&mask, &dc, 5.0, &p);
        for pair in w.data().windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        // at dc == dc_max the raw value is negative and must clamp to 0
        assert_eq!(w.data()[n - 1], 0.0);
        assert!(w.data()[0] <= -10.0 * 1e-6f64.ln() + 1e-9);
    }

    #[test]
    fn weighted_ce_perfect_prediction_is_tiny() {
        let gt = rand_mask((4, 4, 4), 3, 0.4);
        let weights = gt.map(|y| if y != 0.0 { 7.0 } else { 1.0 });
        let v = eval_scalar(|t, pr| weighted_ce_loss(t, pr, &gt, &weights), &gt);
        let bound = 1e-6 * weights.sum() / gt.len() as f64;
        assert!(v >= 0.0 && v <= bound, "{v} vs {bound}");
    }

    #[test]
    fn weighted_ce_with_unit_weights_is_mean_bce() {
        let gt = rand_mask((3, 3, 3), 4, 0.5);
        let pred = rand_vol((3, 3, 3), 5, 0.05, 0.95);
        let ones = Volume::filled((3, 3, 3), 1.0);
        let v = eval_scalar(|t, pr| weighted_ce_loss(t, pr, &gt, &ones), &pred);
        let mut hand = 0.0;
        for (&p, &y) in pred.data().iter().zip(gt.data()) {
            hand += -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
        }
        hand /= gt.len() as f64;
        assert_relative_eq!(v, hand, max_relative = 1e-12);
    }

    #[test]
    fn weighted_ce_single_voxel_hand_case() {
        // y = 1, pred = 0.5, alpha = 2 -> 2 ln 2
        let gt = Volume::new((1, 1, 1), vec![1.0]).unwrap();
        let w = Volume::new((1, 1, 1), vec![2.0]).unwrap();
        let pred = Volume::new((1, 1, 1), vec![0.5]).unwrap();
        let v = eval_scalar(|t, pr| weighted_ce_loss(t, pr, &gt, &w), &pred);
        assert_relative_eq!(v, 2.0 * 2f64.ln(), max_relative = 1e-12);
    }

    fn tiny_bundle() -> crate::synth::GroundTruthBundle {
        generate_tree(&SynthParams {
            seed: 5,
            dims: (24, 24, 24),
            generations: 2,
            root_radius: 2.0,
            radius_decay: 0.8,
            length_decay: 0.6,
            branch_angle_deg: 25.0,
            jitter_deg: 4.0,
            root_length: 7.0,
        })
        .unwrap()
    }

    #[test]
    fn topo_com_is_exactly_the_sum_of_its_parts() {
        let bundle = tiny_bundle();
        let pred = rand_vol(bundle.mask.dims(), 6, 0.05, 0.95);
        let tv_p = TverskyParams::new(0.3, 0.7).unwrap();
        let w_p = WeightMapParams::default();

        let combined = eval_scalar(
            |t, pr| topo_com_loss(t, pr, &bundle.mask, &bundle, &tv_p, &w_p),
            &pred,
        );
        let tv = eval_scalar(|t, pr| tversky_loss(t, pr, &bundle.mask, &tv_p), &pred);
        let weights = weight_map(&bundle, &w_p);
        let ce = eval_scalar(|t, pr| weighted_ce_loss(t, pr, &bundle.mask, &weights), &pred);
        assert_relative_eq!(combined, tv + ce, max_relative = 1e-12);

        let perfect = eval_scalar(
            |t, pr| topo_com_loss(t, pr, &bundle.mask, &bundle, &tv_p, &w_p),
            &bundle.mask,
        );
        assert!(perfect.abs() < 1e-4, "perfect prediction gives {perfect}");
    }

    #[test]
    fn anchors_are_strictly_increasing_and_capped() {
        let st = AucprState::new(0.37, 10, 0.01).unwrap();
        let a = st.anchors();
        for w in a.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(*a.last().unwrap() <= 1.0 - 1e-6 + 1e-15);
        assert_relative_eq!(st.anchor_weight() * st.m as f64, 1.0 - 0.37, max_relative = 1e-12);
    }

    #[test]
    fn par_lagrangian_feasible_optimum_is_minus_one() {
        // anchors for delta0=0.5, m=2: [0.75, cap]; use k=0.
        // 4 positives: three at margin >= 1, one exactly at the threshold
        // contributes 0, so tp_lower = 3 = 0.75 * 4 and the constraint is met.
        let gt = Volume::filled((4, 1, 1), 1.0);
        let pred = Volume::new((4, 1, 1), vec![1.47, 1.47, 1.47, 0.47]).unwrap();
        let mut st = AucprState::new(0.5, 2, 0.01).unwrap();
        st.nu[0] = 0.8; // multiplier must not matter at the feasible optimum
        st.thresholds[0] = 0.47;
        let mut tape = Tape::new();
        let p = tape.leaf(pred, false);
        let t = tape.scalar(0.47);
        let l = par_lagrangian(&mut tape, p, &gt, 0, &st, t).unwrap();
        assert_relative_eq!(tape.scalar_value(l), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn par_lagrangian_hand_precision_term() {
        // |Y+| = 10, delta_k = 0.5, fp_upper = 5 -> precision term -0.5
        let mut data = vec![1.0; 10];
        data.extend(vec![0.0; 5]);
        let gt = Volume::new((15, 1, 1), data).unwrap();
        let mut pred = vec![1.5; 10]; // positives: margin >= 1
        pred.extend(vec![0.5; 5]); // negatives at T: hinge = 1 each
        let pred = Volume::new((15, 1, 1), pred).unwrap();
        let st = AucprState::new(0.25, 3, 0.01).unwrap(); // anchors 0.5, 0.75, cap
        let mut tape = Tape::new();
        let p = tape.leaf(pred, false);
        let t = tape.scalar(0.5);
        let l = par_lagrangian(&mut tape, p, &gt, 0, &st, t).unwrap();
        // nu = 0, constraint satisfied (recall 1): pure precision term
        assert_relative_eq!(tape.scalar_value(l), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn topo_cor_perfect_separator_reaches_minus_one_minus_delta0() {
        let delta0 = 0.3;
        let st = AucprState::new(delta0, 10, 0.01).unwrap();
        let gt = rand_mask((4, 4, 4), 7, 0.3);
        // margin >= 1 at every threshold in (0,1): positives at 2.0, negatives at -1.0
        let pred = gt.map(|y| if y != 0.0 { 2.0 } else { -1.0 });
        let mut tape = Tape::new();
        let p = tape.leaf(pred, false);
        let ts: Vec<NodeId> = st.thresholds.iter().map(|&t| tape.scalar(t)).collect();
        let l = topo_cor_loss(&mut tape, p, &gt, &st, &ts).unwrap();
        assert_relative_eq!(tape.scalar_value(l), -(1.0 - delta0), epsilon = 1e-9);
    }

    #[test]
    fn topo_cor_single_anchor_degenerates() {
        let st = AucprState::new(0.4, 1, 0.01).unwrap();
        let gt = rand_mask((3, 3, 3), 8, 0.4);
        let pred = rand_vol((3, 3, 3), 9, 0.05, 0.95);
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone(), false);
        let t0 = tape.scalar(st.thresholds[0]);
        let whole = topo_cor_loss(&mut tape, p, &gt, &st, &[t0]).unwrap();
        let p2 = tape.leaf(pred, false);
        let t1 = tape.scalar(st.thresholds[0]);
        let single = par_lagrangian(&mut tape, p2, &gt, 0, &st, t1).unwrap();
        assert_relative_eq!(
            tape.scalar_value(whole),
            (1.0 - 0.4) * tape.scalar_value(single),
            max_relative = 1e-12
        );
    }

    #[test]
    fn topo_cor_decreases_when_false_positives_shrink() {
        let st = AucprState::new(0.3, 4, 0.01).unwrap();
        let mut data = vec![1.0; 8];
        data.extend(vec![0.0; 19]);
        let gt = Volume::new((27, 1, 1), data).unwrap();
        let loss_at = |neg_score: f64| {
            let pred = gt.map(|y| if y != 0.0 { 0.9 } else { neg_score });
            let mut tape = Tape::new();
            let p = tape.leaf(pred, false);
            let ts: Vec<NodeId> = st.thresholds.iter().map(|&t| tape.scalar(t)).collect();
            let l = topo_cor_loss(&mut tape, p, &gt, &st, &ts).unwrap();
            tape.scalar_value(l)
        };
        assert!(loss_at(0.2) < loss_at(0.6));
    }

    #[test]
    fn multiplier_updates_project_and_fix() {
        let gt = Volume::new((4, 1, 1), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        // constraint satisfied with slack: recall 1 at margin >= 1
        let good = Volume::new((4, 1, 1), vec![1.6, 1.6, 1.6, 1.6]).unwrap();
        let mut st = AucprState::new(0.5, 2, 0.1).unwrap();
        st.thresholds = vec![0.5, 0.5];
        st.update_multipliers(&good, &gt).unwrap();
        assert_eq!(st.nu, vec![0.0, 0.0]);

        // violation of 0.2 at nu_lr 0.1 adds 0.02
        let mut st = AucprState::new(0.5, 1, 0.1).unwrap();
        st.thresholds = vec![0.5];
        // tp_lower/|Y+| = 0.8 - 1e-6... use scores at margin>=1 on 4/5... build:
        let gt5 = Volume::new((5, 1, 1), vec![1.0; 5]).unwrap();
        // one positive at threshold (contributes 0), four at margin >= 1
        let snap = Volume::new((5, 1, 1), vec![1.6, 1.6, 1.6, 1.6, 0.5]).unwrap();
        // anchor for delta0=0.5, m=1 is the cap ~1.0: violation = 1.0 - 0.8 = 0.2
        st.update_multipliers(&snap, &gt5).unwrap();
        assert_relative_eq!(st.nu[0], 0.1 * ((1.0 - 1e-6) - 0.8), epsilon = 1e-12);
        assert!((st.nu[0] - 0.02).abs() < 1e-6);

        // never negative under any sequence
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut st = AucprState::new(0.4, 3, 0.5).unwrap();
        for i in 0..50 {
            let snap = rand_vol((4, 4, 4), 300 + i, 0.0, 1.0);
            let gt = rand_mask((4, 4, 4), 400 + i, 0.3 + 0.4 * rng.gen::<f64>());
            if gt.sum() == 0.0 {
                continue;
            }
            st.update_multipliers(&snap, &gt).unwrap();
            assert!(st.nu.iter().all(|&n| n >= 0.0));
        }
    }

    #[test]
    fn multipliers_unchanged_iff_all_constraints_satisfied() {
        let gt = Volume::new((4, 1, 1), vec![1.0; 4]).unwrap();
        let snap = Volume::new((4, 1, 1), vec![1.6; 4]).unwrap();
        let mut st = AucprState::new(0.5, 3, 0.1).unwrap();
        st.nu = vec![0.3, 0.0, 0.1];
        let before = st.nu.clone();
        st.update_multipliers(&snap, &gt).unwrap();
        // recall = 1 >= every anchor: satisfied constraints shrink positive nu
        assert!(st.nu[0] < before[0]);
        assert_eq!(st.nu[1], 0.0);
    }

    #[test]
    fn tps_loss_mixes_linearly() {
        let bundle = tiny_bundle();
        let gt = &bundle.mask;
        let pred = rand_vol(gt.dims(), 11, 0.05, 0.95);
        let tv_p = TverskyParams::new(0.3, 0.7).unwrap();
        let w_p = WeightMapParams::default();
        let st = AucprState::new(0.2, 4, 0.01).unwrap();

        let run = |l1: f64, l2: f64| {
            let mut tape = Tape::new();
            let p = tape.leaf(pred.clone(), false);
            let ts: Vec<NodeId> = st.thresholds.iter().map(|&t| tape.scalar(t)).collect();
            let tps_p = TpsParams::new(l1, l2).unwrap();
            let l = tps_loss(&mut tape, p, gt, &bundle, &tv_p, &w_p, &tps_p, &st, &ts).unwrap();
            tape.scalar_value(l)
        };
        let com = eval_scalar(|t, pr| topo_com_loss(t, pr, gt, &bundle, &tv_p, &w_p), &pred);
        let cor = {
            let mut tape = Tape::new();
            let p = tape.leaf(pred.clone(), false);
            let ts: Vec<NodeId> = st.thresholds.iter().map(|&t| tape.scalar(t)).collect();
            let l = topo_cor_loss(&mut tape, p, gt, &st, &ts).unwrap();
            tape.scalar_value(l)
        };
        assert_relative_eq!(run(1.0, 0.0), com, max_relative = 1e-12);
        assert_relative_eq!(run(0.0, 1.0), cor, max_relative = 1e-12);
        assert_relative_eq!(run(1.0, 1.0), com + cor, max_relative = 1e-12);
    }

    #[test]
    fn hinge_bounds_bracket_the_zero_one_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..200 {
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let labels: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() < 0.4) as i64 as f64).collect();
            let t = 0.05 + 0.9 * rng.gen::<f64>();
            let pred = Volume::new((n, 1, 1), scores.clone()).unwrap();
            let gt = Volume::new((n, 1, 1), labels.clone()).unwrap();
            let mut tape = Tape::new();
            let p = tape.leaf(pred, false);
            let tn = tape.scalar(t);
            let (tp_l, fp_u) = hinge_bounds(&mut tape, p, &gt, tn).unwrap();
            let tp_zero_one = scores
                .iter()
                .zip(&labels)
                .filter(|(&s, &y)| y != 0.0 && s >= t)
                .count() as f64;
            let fp_zero_one = scores
                .iter()
                .zip(&labels)
                .filter(|(&s, &y)| y == 0.0 && s >= t)
                .count() as f64;
            assert!(
                tape.scalar_value(tp_l) <= tp_zero_one + 1e-12,
                "case {case}: tp bound broken"
            );
            assert!(
                tape.scalar_value(fp_u) >= fp_zero_one - 1e-12,
                "case {case}: fp bound broken"
            );
        }
    }

    #[test]
    fn all_losses_pass_finite_difference_checks() {
        let bundle = tiny_bundle();
        let dims = (6, 6, 6);
        let gt = bundle.mask.crop((9, 9, 4), dims).unwrap();
        assert!(gt.sum() > 0.0);
        let dc = bundle.dc_map.crop((9, 9, 4), dims).unwrap();
        let pred0 = rand_vol(dims, 12, 0.05, 0.95);
        let tv_p = TverskyParams::new(0.3, 0.7).unwrap();
        let w_p = WeightMapParams::default();
        let weights = weight_map_parts(&gt, &dc, bundle.dc_max, &w_p);
        let st = AucprState::new(0.25, 3, 0.01).unwrap();

        let r = check_graph(&[pred0.clone()], 1e-5, |t, ids| {
            tversky_loss(t, ids[0], &gt, &tv_p)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "tversky {r:?}");

        let r = check_graph(&[pred0.clone()], 1e-5, |t, ids| {
            weighted_ce_loss(t, ids[0], &gt, &weights)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "weighted ce {r:?}");

        // correctness loss: gradients flow into pred and the thresholds
        let t_init = Volume::scalar(0.41);
        let r = check_graph(&[pred0.clone(), t_init.clone(), t_init.clone(), t_init], 1e-5, |t, ids| {
            topo_cor_loss(t, ids[0], &gt, &st, &ids[1..4])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "topo_cor {r:?}");
    }
}
