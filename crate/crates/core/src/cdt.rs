//! Differentiable convolutional distance transform.
//!
//! The pipeline: Gumbel-Softmax turns the two-channel probability map into a
//! (soft) binary decision, soft morphology extracts a boundary indicator,
//! and a single convolution with a pre-exponentiated Euclidean distance
//! kernel followed by a scaled log realizes a smooth minimum over boundary
//! distances. With `β = 1/γ → -∞` the log-sum-exp collapses to the true
//! minimum; at finite `γ` the result is sandwiched between the exact
//! distance and the exact distance minus `|γ|·ln(n)`.
//!
//! The kernel has finite reach, so a voxel farther than the kernel radius
//! from every boundary voxel would see `log(0)`. A constant floor term
//! `exp(d_cap/γ)` — a virtual boundary at the kernel radius — is added to
//! the convolution, which both totalizes the operator and caps the output at
//! `d_cap`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::PROB_FLOOR;
use crate::volume::{Kernel3, Volume};

#[derive(Debug, Clone)]
pub struct GumbelParams {
    /// Softmax temperature; small values approach hard argmax.
    pub tau: f64,
    /// Seed for the noise stream owned by the caller.
    pub rng_seed: u64,
    /// Pre-sampled noise per channel for deterministic tests.
    pub frozen_noise: Option<(Volume, Volume)>,
    /// Hard one-hot argmax, no noise (test-time behavior).
    pub eval_mode: bool,
}

impl GumbelParams {
    pub fn new(tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::InvalidParam("gumbel tau must be positive".into()));
        }
        Ok(GumbelParams {
            tau,
            rng_seed: 0,
            frozen_noise: None,
            eval_mode: false,
        })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CdtParams {
    /// Log-sum-exp temperature, strictly negative (β = 1/γ).
    pub gamma: f64,
    /// Odd cubic kernel extent in voxels.
    pub kernel_size: usize,
}

impl CdtParams {
    pub fn new(gamma: f64, kernel_size: usize) -> Result<Self> {
        if gamma >= 0.0 {
            return Err(Error::InvalidParam("gamma must be negative".into()));
        }
        if kernel_size % 2 == 0 || kernel_size < 3 {
            return Err(Error::InvalidParam(
                "kernel_size must be odd and >= 3".into(),
            ));
        }
        Ok(CdtParams { gamma, kernel_size })
    }

    /// Distance saturation: the kernel radius acts as a virtual boundary.
    pub fn d_cap(&self) -> f64 {
        (self.kernel_size / 2) as f64
    }
}

impl Default for CdtParams {
    fn default() -> Self {
        CdtParams {
            gamma: -0.3,
            kernel_size: 31,
        }
    }
}

/// Gumbel noise `g = -ln(-ln u)`, one sample per voxel.
fn gumbel_noise(dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Volume {
    let n = dims.0 * dims.1 * dims.2;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Volume::new(dims, data).expect("dims validated")
}

/// Differentiable binarization of a two-channel probability pair:
/// `ẑ_i = softmax((ln ŷ_i + g_i)/τ)`. The noise enters as a constant, so
/// gradients flow exactly as through the softmax. In eval mode the result is
/// the hard per-voxel argmax (foreground wins ties) with no noise and no
/// gradient.
pub fn gumbel_softmax(
    tape: &mut Tape,
    probs: (NodeId, NodeId),
    p: &GumbelParams,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, NodeId)> {
    if p.tau <= 0.0 {
        return Err(Error::InvalidParam("gumbel tau must be positive".into()));
    }
    let (pa, pb) = probs;
    let dims = tape.value(pa).dims();
    tape.value(pa).check_same_shape(tape.value(pb))?;

    if p.eval_mode {
        let a = tape.value(pa).data().to_vec();
        let b = tape.value(pb).data().to_vec();
        let hard_b: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| if y >= x { 1.0 } else { 0.0 })
            .collect();
        let hard_a: Vec<f64> = hard_b.iter().map(|&v| 1.0 - v).collect();
        let na = tape.constant(Volume::new(dims, hard_a)?);
        let nb = tape.constant(Volume::new(dims, hard_b)?);
        return Ok((na, nb));
    }

    let (ga, gb) = match &p.frozen_noise {
        Some((na, nb)) => {
            na.check_same_shape(tape.value(pa))?;
            nb.check_same_shape(tape.value(pb))?;
            (na.clone(), nb.clone())
        }
        None => (gumbel_noise(dims, rng), gumbel_noise(dims, rng)),
    };

    let mut channel = |prob: NodeId, noise: Volume| -> Result<NodeId> {
        let floored = tape.clamp_min(prob, PROB_FLOOR)?;
        let logp = tape.log(floored)?;
        let n = tape.constant(noise);
        let shifted = tape.add(logp, n)?;
        tape.scale(shifted, 1.0 / p.tau)
    };
    let la = channel(pa, ga)?;
    let lb = channel(pb, gb)?;
    tape.channel_softmax(la, lb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphKind {
    Erosion,
    Dilation,
}

/// One iteration of soft morphology with a 3³ window and zero padding:
/// dilation is max pooling, erosion is `-maxpool(-x)`. The zero pad makes
/// the volume border behave as background for both.
pub fn soft_morphology(tape: &mut Tape, kind: MorphKind, mask: NodeId) -> Result<NodeId> {
    match kind {
        MorphKind::Dilation => tape.maxpool3d(mask),
        MorphKind::Erosion => {
            let n = tape.neg(mask)?;
            let p = tape.maxpool3d(n)?;
            tape.neg(p)
        }
    }
}

/// Soft boundary `Φ = [dilation(z_fg) - erosion(z_fg)] ⊙ y`.
/// On hard inputs with `z_fg == y` this coincides with the hard 26-neighbor
/// boundary.
pub fn soft_boundary(tape: &mut Tape, z_fg: NodeId, gt: &Volume) -> Result<NodeId> {
    tape.value(z_fg).check_same_shape(gt)?;
    if !gt.is_binary() {
        return Err(Error::InvalidVolume("soft_boundary gt must be binary".into()));
    }
    let dil = soft_morphology(tape, MorphKind::Dilation, z_fg)?;
    let ero = soft_morphology(tape, MorphKind::Erosion, z_fg)?;
    let ring = tape.sub(dil, ero)?;
    let y = tape.constant(gt.clone());
    tape.mul(ring, y)
}

/// Distance kernel with pre-exponentiated taps `exp(d/γ)` where `d` is the
/// Euclidean offset to the center, so the smooth-minimum convolution is a
/// single pass. Constant: no tap gradients.
pub fn build_distance_kernel(p: &CdtParams) -> Kernel3 {
    let k = p.kernel_size;
    let r = (k / 2) as isize;
    let mut weights = Vec::with_capacity(k * k * k);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                weights.push((d / p.gamma).exp());
            }
        }
    }
    Kernel3::new((k, k, k), weights).expect("odd size by construction")
}

/// Reference log-sum-exp smooth minimum `(1/β)·ln Σ exp(β·dᵢ)`, `β < 0`.
/// This is the enumeration-based semantic of the convolutional path; the
/// test suites hold the convolution output against it.
pub fn lse_min(values: &[f64], beta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidParam("lse_min needs a non-empty list".into()));
    }
    if beta >= 0.0 {
        return Err(Error::InvalidParam("lse_min needs beta < 0".into()));
    }
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = values.iter().map(|&d| (beta * (d - m)).exp()).sum();
    Ok(m + s.ln() / beta)
}

/// Smooth distance transform
/// `Dist = z_fg ⊙ γ·ln(conv(Φ, K) + exp(d_cap/γ))`.
/// The floor term caps the output at `d_cap` and keeps the log total; the
/// `z_fg` mask zeroes the background. Fully differentiable in both `z_fg`
/// and `boundary`.
pub fn cdt_transform(
    tape: &mut Tape,
    z_fg: NodeId,
    boundary: NodeId,
    p: &CdtParams,
) -> Result<NodeId> {
    tape.value(z_fg).check_same_shape(tape.value(boundary))?;
    let kernel = build_distance_kernel(p);
    let conv = tape.conv3d(boundary, &kernel)?;
    let floor = (p.d_cap() / p.gamma).exp();
    let lifted = tape.add_c(conv, floor)?;
    let logged = tape.log(lifted)?;
    let dist = tape.scale(logged, p.gamma)?;
    tape.mul(z_fg, dist)
}

/// Plain-volume transform for constant inputs (ground-truth maps, CLI
/// export): identical arithmetic to [`cdt_transform`], no tape.
pub fn cdt_map(mask: &Volume, boundary: &Volume, p: &CdtParams) -> Result<Volume> {
    mask.check_same_shape(boundary)?;
    let kernel = build_distance_kernel(p);
    let mut conv = vec![0.0; mask.len()];
    crate::autodiff::conv_same(
        boundary.data(),
        boundary.dims(),
        kernel.weights(),
        kernel.size(),
        &mut conv,
    );
    let floor = (p.d_cap() / p.gamma).exp();
    let data: Vec<f64> = conv
        .iter()
        .zip(mask.data())
        .map(|(&c, &m)| m * p.gamma * (c + floor).ln())
        .collect();
    Volume::new(mask.dims(), data)
}

/// Distance-map loss `Σ ωᵢ (Dist(y)ᵢ - Dist(ẑ)ᵢ)² / N`, with foreground
/// voxels upweighted by the background/foreground count ratio.
pub fn cdt_loss(
    tape: &mut Tape,
    pred_dist: NodeId,
    gt_dist: &Volume,
    gt: &Volume,
) -> Result<NodeId> {
    tape.value(pred_dist).check_same_shape(gt_dist)?;
    tape.value(pred_dist).check_same_shape(gt)?;
    if !gt.is_binary() {
        return Err(Error::InvalidVolume("cdt_loss gt must be binary".into()));
    }
    let n_fg = gt.count_foreground();
    if n_fg == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let n = gt.len() as f64;
    let ratio = (n - n_fg as f64) / n_fg as f64;
    let omega = gt.map(|y| if y != 0.0 { ratio } else { 1.0 });

    let target = tape.constant(gt_dist.clone());
    let diff = tape.sub(target, pred_dist)?;
    let sq = tape.mul(diff, diff)?;
    let w = tape.constant(omega);
    let weighted = tape.mul(sq, w)?;
    let total = tape.reduce_sum(weighted, None)?;
    tape.scale(total, 1.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_graph;
    use crate::synth::{exact_edt, hard_boundary};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn rand_vol(dims: (usize, usize, usize), seed: u64, lo: f64, hi: f64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()).unwrap()
    }

    fn solid_cube(outer: usize, side: usize) -> Volume {
        let lo = (outer - side) / 2;
        let hi = lo + side;
        Volume::from_fn((outer, outer, outer), |x, y, z| {
            ((lo..hi).contains(&x) && (lo..hi).contains(&y) && (lo..hi).contains(&z)) as i64 as f64
        })
    }

    /// Enumeration-based reference for the convolutional path: per voxel,
    /// the smooth minimum over boundary distances within the kernel window
    /// plus the virtual cap boundary.
    fn lse_reference(mask: &Volume, boundary: &Volume, p: &CdtParams) -> Volume {
        let r = (p.kernel_size / 2) as i64;
        let (nx, ny, nz) = mask.dims();
        Volume::from_fn(mask.dims(), |x, y, z| {
            if mask.get(x, y, z) == 0.0 {
                return 0.0;
            }
            let mut dists = vec![p.d_cap()];
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let xx = x as i64 + dx;
                        let yy = y as i64 + dy;
                        let zz = z as i64 + dz;
                        if xx < 0 || yy < 0 || zz < 0 {
                            continue;
                        }
                        let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                        if xx < nx && yy < ny && zz < nz && boundary.get(xx, yy, zz) != 0.0 {
                            dists.push(((dx * dx + dy * dy + dz * dz) as f64).sqrt());
                        }
                    }
                }
            }
            lse_min(&dists, 1.0 / p.gamma).unwrap()
        })
    }

    #[test]
    fn gumbel_frozen_equal_noise_matches_closed_form() {
        let dims = (2, 2, 2);
        let noise = (Volume::filled(dims, 0.37), Volume::filled(dims, 0.37));
        let p = GumbelParams {
            tau: 0.1,
            rng_seed: 0,
            frozen_noise: Some(noise),
            eval_mode: false,
        };
        let mut rng = p.rng();
        let mut tape = Tape::new();
        let a = tape.leaf(Volume::filled(dims, 0.2), false);
        let b = tape.leaf(Volume::filled(dims, 0.8), false);
        let (_za, zb) = gumbel_softmax(&mut tape, (a, b), &p, &mut rng).unwrap();
        let expect = 0.8f64.powi(10) / (0.2f64.powi(10) + 0.8f64.powi(10));
        for &v in tape.value(zb).data() {
            assert_relative_eq!(v, expect, max_relative = 1e-10);
            assert!(v > 0.999_999 && v < 1.0);
        }
    }

    #[test]
    fn gumbel_symmetric_input_stays_symmetric() {
        for tau in [0.05, 0.1, 1.0, 5.0] {
            let dims = (2, 1, 1);
            let p = GumbelParams {
                tau,
                rng_seed: 0,
                frozen_noise: Some((Volume::filled(dims, 1.3), Volume::filled(dims, 1.3))),
                eval_mode: false,
            };
            let mut rng = p.rng();
            let mut tape = Tape::new();
            let a = tape.leaf(Volume::filled(dims, 0.5), false);
            let b = tape.leaf(Volume::filled(dims, 0.5), false);
            let (za, zb) = gumbel_softmax(&mut tape, (a, b), &p, &mut rng).unwrap();
            for (&x, &y) in tape.value(za).data().iter().zip(tape.value(zb).data()) {
                assert_relative_eq!(x, 0.5, epsilon = 1e-14);
                assert_relative_eq!(y, 0.5, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gumbel_eval_mode_is_hard_argmax() {
        let dims = (3, 1, 1);
        let p = GumbelParams {
            tau: 0.1,
            rng_seed: 0,
            frozen_noise: None,
            eval_mode: true,
        };
        let mut rng = p.rng();
        let mut tape = Tape::new();
        let a = tape.leaf(Volume::new(dims, vec![0.3, 0.7, 0.5]).unwrap(), false);
        let b = tape.leaf(Volume::new(dims, vec![0.7, 0.3, 0.5]).unwrap(), false);
        let (za, zb) = gumbel_softmax(&mut tape, (a, b), &p, &mut rng).unwrap();
        assert_eq!(tape.value(zb).data(), &[1.0, 0.0, 1.0]); // fg wins ties
        assert_eq!(tape.value(za).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gumbel_channels_sum_to_one_and_resampling_is_reproducible() {
        let dims = (4, 4, 4);
        let pa = rand_vol(dims, 1, 0.05, 0.95);
        let pb = pa.map(|v| 1.0 - v);
        let run = |seed: u64| {
            let p = GumbelParams {
                tau: 0.1,
                rng_seed: seed,
                frozen_noise: None,
                eval_mode: false,
            };
            let mut rng = p.rng();
            let mut tape = Tape::new();
            let a = tape.leaf(pa.clone(), false);
            let b = tape.leaf(pb.clone(), false);
            let (za, zb) = gumbel_softmax(&mut tape, (a, b), &p, &mut rng).unwrap();
            (tape.value(za).clone(), tape.value(zb).clone())
        };
        let (a1, b1) = run(9);
        let (a2, b2) = run(9);
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
        let (a3, _) = run(10);
        assert_ne!(a1.data(), a3.data());
        for (&x, &y) in a1.data().iter().zip(b1.data()) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_rejects_bad_tau() {
        assert!(GumbelParams::new(0.0).is_err());
        assert!(GumbelParams::new(-1.0).is_err());
    }

    #[test]
    fn soft_morphology_on_hard_cube() {
        let cube = solid_cube(7, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(cube.clone(), false);
        let dil = soft_morphology(&mut tape, MorphKind::Dilation, x).unwrap();
        let ero = soft_morphology(&mut tape, MorphKind::Erosion, x).unwrap();
        assert_eq!(tape.value(dil).data(), solid_cube(7, 5).data());
        let mut center_only = Volume::zeros((7, 7, 7));
        center_only.set(3, 3, 3, 1.0);
        assert_eq!(tape.value(ero).data(), center_only.data());

        // zeros are fixed points
        let z = tape.leaf(Volume::zeros((5, 5, 5)), false);
        let dz = soft_morphology(&mut tape, MorphKind::Dilation, z).unwrap();
        let ez = soft_morphology(&mut tape, MorphKind::Erosion, z).unwrap();
        assert_eq!(tape.value(dz).sum(), 0.0);
        assert_eq!(tape.value(ez).sum(), 0.0);

        // envelope on a soft input
        let soft = rand_vol((6, 6, 6), 2, 0.0, 1.0);
        let s = tape.leaf(soft.clone(), false);
        let ds = soft_morphology(&mut tape, MorphKind::Dilation, s).unwrap();
        let es = soft_morphology(&mut tape, MorphKind::Erosion, s).unwrap();
        for i in 0..soft.len() {
            assert!(tape.value(es).data()[i] <= soft.data()[i] + 1e-15);
            assert!(soft.data()[i] <= tape.value(ds).data()[i] + 1e-15);
        }
    }

    #[test]
    fn soft_boundary_matches_hard_boundary_on_hard_inputs() {
        let cube = solid_cube(7, 3);
        let mut tape = Tape::new();
        let z = tape.leaf(cube.clone(), false);
        let phi = soft_boundary(&mut tape, z, &cube).unwrap();
        let hard = hard_boundary(&cube).unwrap();
        assert_eq!(tape.value(phi).data(), hard.data());
        assert_eq!(hard.count_foreground(), 26);

        let mut single = Volume::zeros((5, 5, 5));
        single.set(2, 2, 2, 1.0);
        let zs = tape.leaf(single.clone(), false);
        let phi_s = soft_boundary(&mut tape, zs, &single).unwrap();
        assert_eq!(tape.value(phi_s).data(), single.data());

        // gt == 0 absorbs everything
        let soft = rand_vol((5, 5, 5), 3, 0.0, 1.0);
        let zf = tape.leaf(soft, false);
        let phi_0 = soft_boundary(&mut tape, zf, &Volume::zeros((5, 5, 5))).unwrap();
        assert_eq!(tape.value(phi_0).sum(), 0.0);
    }

    #[test]
    fn distance_kernel_taps_are_exponentiated_distances() {
        let p = CdtParams::new(-0.3, 5).unwrap();
        let k = build_distance_kernel(&p);
        assert_eq!(k.at(0, 0, 0), 1.0);
        assert_relative_eq!(k.at(1, 0, 0), (-1.0 / 0.3f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(
            k.at(1, 1, 1),
            (-(3.0f64).sqrt() / 0.3).exp(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            k.at(-2, 1, 2),
            (-(9.0f64).sqrt() / 0.3).exp(),
            max_relative = 1e-12
        );
        assert!(CdtParams::new(0.3, 5).is_err());
        assert!(CdtParams::new(-0.3, 4).is_err());
    }

    #[test]
    fn lse_min_closed_forms_and_bounds() {
        let gamma: f64 = -0.3;
        let beta = 1.0 / gamma;
        // LSE_beta(d, d) = d + ln2/beta = d + gamma ln 2
        for d in [0.0, 1.0, 2.5, 7.0] {
            let v = lse_min(&[d, d], beta).unwrap();
            assert_relative_eq!(v, d + gamma * 2f64.ln(), epsilon = 1e-12);
        }
        // limit behavior: beta -> -inf recovers the minimum
        let v = lse_min(&[1.0, 50.0], -50.0).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 10.0).collect();
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let v = lse_min(&vals, beta).unwrap();
            assert!(v <= min + 1e-12);
            assert!(v >= min - gamma.abs() * (n as f64).ln() - 1e-12);
        }
        assert!(lse_min(&[], beta).is_err());
        assert!(lse_min(&[1.0], 2.0).is_err());
    }

    fn cdt_on_hard(mask: &Volume, p: &CdtParams) -> (Volume, Volume) {
        let boundary = hard_boundary(mask).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(mask.clone(), false);
        let b = tape.leaf(boundary.clone(), false);
        let d = cdt_transform(&mut tape, z, b, p).unwrap();
        (tape.value(d).clone(), boundary)
    }

    #[test]
    fn cdt_without_boundary_saturates_at_the_cap() {
        let p = CdtParams::new(-0.3, 7).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(Volume::filled((4, 4, 4), 1.0), false);
        let b = tape.leaf(Volume::zeros((4, 4, 4)), false);
        let d = cdt_transform(&mut tape, z, b, &p).unwrap();
        for &v in tape.value(d).data() {
            assert_relative_eq!(v, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cdt_cube_center_lands_in_the_lse_band() {
        // 5^3 cube: exact center distance 2, 98 surface voxels
        let mask = solid_cube(9, 5);
        let p = CdtParams::new(-0.3, 7).unwrap();
        let (dist, boundary) = cdt_on_hard(&mask, &p);
        assert_eq!(boundary.count_foreground(), 98);
        let center = dist.get(4, 4, 4);
        assert!(center <= 2.0 + 1e-9, "center {center}");
        assert!(center >= 2.0 - 0.3 * 98f64.ln(), "center {center}");
    }

    #[test]
    fn cdt_boundary_voxels_sit_just_below_zero() {
        let mask = solid_cube(9, 5);
        let p = CdtParams::new(-0.3, 7).unwrap();
        let (dist, boundary) = cdt_on_hard(&mask, &p);
        let cap_term = (p.d_cap() / p.gamma).exp();
        let bound = p.gamma * (1.0 + cap_term).ln();
        for i in 0..mask.len() {
            if boundary.data()[i] != 0.0 {
                assert!(dist.data()[i] <= bound + 1e-12);
                assert!(dist.data()[i] < 0.0 && dist.data()[i] > -1.0);
            }
        }
    }

    #[test]
    fn cdt_convolution_equals_windowed_lse_enumeration() {
        // dual route: the conv+log path must agree with brute-force
        // enumeration of boundary distances within the kernel window
        for (seed, ks) in [(5u64, 5usize), (6, 7), (7, 9)] {
            let mask = rand_vol((10, 9, 8), seed, 0.0, 1.0).map(|v| (v < 0.45) as i64 as f64);
            if mask.sum() == 0.0 {
                continue;
            }
            let p = CdtParams::new(-0.3, ks).unwrap();
            let (dist, boundary) = cdt_on_hard(&mask, &p);
            let reference = lse_reference(&mask, &boundary, &p);
            for i in 0..mask.len() {
                assert_relative_eq!(dist.data()[i], reference.data()[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn cdt_error_against_exact_edt_shrinks_as_gamma_approaches_zero() {
        // tube of radius 2.5: interior depths stay below the cap
        let mask = Volume::from_fn((16, 16, 16), |x, y, z| {
            let dx = x as f64 - 7.5;
            let dy = y as f64 - 7.5;
            let _ = z;
            ((dx * dx + dy * dy).sqrt() <= 2.5) as i64 as f64
        });
        let boundary = hard_boundary(&mask).unwrap();
        let edt = exact_edt(&mask, &boundary).unwrap();
        let mut last = f64::INFINITY;
        for gamma in [-0.3, -0.1, -0.03] {
            let p = CdtParams::new(gamma, 9).unwrap();
            let (dist, _) = cdt_on_hard(&mask, &p);
            let mut max_err = 0.0f64;
            for i in 0..mask.len() {
                if mask.data()[i] != 0.0 {
                    max_err = max_err.max((dist.data()[i] - edt.data()[i]).abs());
                }
            }
            assert!(max_err <= last + 1e-12, "gamma {gamma}: {max_err} > {last}");
            last = max_err;
        }
        assert!(last < 0.1, "tightest gamma should nearly match the oracle");
    }

    #[test]
    fn cdt_loss_cases() {
        let gt = Volume::from_fn((10, 10, 10), |x, _, _| (x < 1) as i64 as f64); // 100 fg of 1000
        let gt_dist = rand_vol((10, 10, 10), 8, 0.0, 3.0);
        let mut tape = Tape::new();
        let same = tape.leaf(gt_dist.clone(), false);
        let l = cdt_loss(&mut tape, same, &gt_dist, &gt).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        // single background discrepancy of magnitude 1 -> 1/N
        let mut off = gt_dist.clone();
        let bg_idx = gt.len() - 1;
        assert_eq!(gt.data()[bg_idx], 0.0);
        off.data_mut()[bg_idx] += 1.0;
        let mut tape = Tape::new();
        let p = tape.leaf(off, false);
        let l = cdt_loss(&mut tape, p, &gt_dist, &gt).unwrap();
        assert_relative_eq!(tape.scalar_value(l), 1.0 / 1000.0, max_relative = 1e-12);

        // foreground discrepancy carries the bg/fg ratio (900/100 = 9)
        let fg_idx = 0;
        let mut off = gt_dist.clone();
        off.data_mut()[fg_idx] += 1.0;
        let mut tape = Tape::new();
        let p = tape.leaf(off, false);
        let l = cdt_loss(&mut tape, p, &gt_dist, &gt).unwrap();
        assert_relative_eq!(tape.scalar_value(l), 9.0 / 1000.0, max_relative = 1e-12);

        let empty = Volume::zeros((10, 10, 10));
        let mut tape = Tape::new();
        let p = tape.leaf(gt_dist.clone(), false);
        assert!(matches!(
            cdt_loss(&mut tape, p, &gt_dist, &empty),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn cdt_pipeline_passes_finite_differences_with_frozen_noise() {
        let dims = (6, 6, 6);
        let gt = rand_vol(dims, 9, 0.0, 1.0).map(|v| (v < 0.4) as i64 as f64);
        assert!(gt.sum() > 0.0);
        let p = CdtParams::new(-0.3, 5).unwrap();
        let gt_boundary = hard_boundary(&gt).unwrap();
        let gt_dist = cdt_map(&gt, &gt_boundary, &p).unwrap();
        let noise = (rand_vol(dims, 10, 0.0, 1.5), rand_vol(dims, 11, 0.0, 1.5));
        let gp = GumbelParams {
            tau: 0.5,
            rng_seed: 0,
            frozen_noise: Some(noise),
            eval_mode: false,
        };
        let pa = rand_vol(dims, 12, 0.1, 0.9);
        let pb = pa.map(|v| 1.0 - v);

        let r = check_graph(&[pa, pb], 1e-5, |t, ids| {
            let mut rng = gp.rng();
            let (_za, zb) = gumbel_softmax(t, (ids[0], ids[1]), &gp, &mut rng)?;
            let phi = soft_boundary(t, zb, &gt)?;
            let dist = cdt_transform(t, zb, phi, &p)?;
            cdt_loss(t, dist, &gt_dist, &gt)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn cdt_map_matches_tape_transform() {
        let mask = solid_cube(8, 4);
        let boundary = hard_boundary(&mask).unwrap();
        let p = CdtParams::new(-0.3, 5).unwrap();
        let direct = cdt_map(&mask, &boundary, &p).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(mask, false);
        let b = tape.leaf(boundary, false);
        let d = cdt_transform(&mut tape, z, b, &p).unwrap();
        assert_eq!(direct.data(), tape.value(d).data());
    }
}
