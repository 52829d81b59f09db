//! Synthetic bifurcating tubular trees with exact centerlines.
//!
//! The generator knows the true centerline, so the distance-to-centerline
//! map and the branch/length bookkeeping needed by the topology metrics are
//! exact by construction rather than skeletonized. The brute-force
//! Euclidean distance transform here is the oracle the differentiable
//! transform is audited against; it is deliberately O(foreground x
//! boundary) and only meant for desk-scale volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// One straight branch of the tree. Child polylines start at the last point
/// of their parent; radii are constant within a branch and non-increasing
/// from root to leaf.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    /// `None` for the root.
    pub parent_id: Option<usize>,
    /// Ordered points in voxel coordinates, roughly one voxel apart.
    pub polyline: Vec<[f64; 3]>,
    pub radius_start: f64,
    pub radius_end: f64,
    pub generation: usize,
}

impl Branch {
    pub fn length(&self) -> f64 {
        self.polyline
            .windows(2)
            .map(|w| dist3(w[0], w[1]))
            .sum()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AirwayTree {
    pub branches: Vec<Branch>,
}

impl AirwayTree {
    pub fn total_length(&self) -> f64 {
        self.branches.iter().map(Branch::length).sum()
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.branches.len()];
        for b in &self.branches {
            if let Some(p) = b.parent_id {
                has_child[p] = true;
            }
        }
        self.branches
            .iter()
            .filter(|b| !has_child[b.id])
            .map(|b| b.id)
            .collect()
    }
}

/// Tree synthesis parameters. Identical seed and parameters reproduce the
/// same volume bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub dims: (usize, usize, usize),
    pub generations: usize,
    pub root_radius: f64,
    pub radius_decay: f64,
    pub length_decay: f64,
    pub branch_angle_deg: f64,
    pub jitter_deg: f64,
    pub root_length: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            dims: (64, 64, 64),
            generations: 4,
            root_radius: 3.0,
            radius_decay: 0.75,
            length_decay: 0.75,
            branch_angle_deg: 30.0,
            jitter_deg: 8.0,
            root_length: 14.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.generations < 1 {
            return Err(Error::InvalidParam("generations must be >= 1".into()));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return Err(Error::InvalidParam("radius_decay must be in (0,1)".into()));
        }
        if !(self.length_decay > 0.0 && self.length_decay < 1.0) {
            return Err(Error::InvalidParam("length_decay must be in (0,1)".into()));
        }
        if self.root_radius <= 0.0 || self.root_length <= 0.0 {
            return Err(Error::InvalidParam(
                "root_radius and root_length must be positive".into(),
            ));
        }
        let leaf_radius = self.root_radius * self.radius_decay.powi(self.generations as i32 - 1);
        // Rounding a polyline point moves it at most sqrt(3)/2 voxels, so
        // this floor keeps every centerline voxel inside the capsule mask.
        if leaf_radius < 0.9 {
            return Err(Error::InvalidParam(format!(
                "leaf radius {leaf_radius:.3} < 0.9 voxels; centerline voxels would escape the mask"
            )));
        }
        Ok(())
    }
}

/// Everything the losses and metrics need about one synthetic volume.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    /// Binary foreground mask.
    pub mask: Volume,
    pub tree: AirwayTree,
    /// Distance to the centerline per foreground voxel, 0 elsewhere and 0
    /// exactly on centerline voxels.
    pub dc_map: Volume,
    pub dc_max: f64,
    /// Rasterized centerline voxels (subset of `mask`).
    pub centerline_mask: Volume,
}

/// Intensity rendering knobs for the synthetic input volume: thin branches
/// get proportionally fainter signal, then iid Gaussian noise is added,
/// which is what makes the peripheral generations genuinely hard to detect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderParams {
    pub noise_sigma: f64,
    pub contrast_min: f64,
    /// Soft shell width in voxels over which intensity fades at the wall.
    pub edge_width: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            noise_sigma: 0.22,
            contrast_min: 0.30,
            edge_width: 1.0,
        }
    }
}

/// A training sample: rendered input plus its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Volume,
    pub bundle: GroundTruthBundle,
}

struct RasterAux {
    /// Per voxel: distance to the nearest branch surface parameter and the
    /// radius of the branch realizing it.
    seg_dist: Vec<f64>,
    radius: Vec<f64>,
}

pub fn generate_tree(params: &SynthParams) -> Result<GroundTruthBundle> {
    let (bundle, _) = generate_tree_with_aux(params)?;
    Ok(bundle)
}

/// Generate a bundle and render its input volume with `render`.
pub fn synth_sample(params: &SynthParams, render: &RenderParams) -> Result<Sample> {
    let (bundle, aux) = generate_tree_with_aux(params)?;
    let input = render_input(params, render, &aux);
    Ok(Sample { input, bundle })
}

fn generate_tree_with_aux(params: &SynthParams) -> Result<(GroundTruthBundle, RasterAux)> {
    params.validate()?;
    let tree = grow_tree(params)?;
    let (bundle, aux) = rasterize(params, tree)?;
    Ok((bundle, aux))
}

fn grow_tree(params: &SynthParams) -> Result<AirwayTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dims = params.dims;
    let start = [
        dims.0 as f64 / 2.0,
        dims.1 as f64 / 2.0,
        2.0 + params.root_radius + 0.5,
    ];
    let mut tree = AirwayTree::default();
    // (start point, unit direction, generation, parent id)
    let mut stack: Vec<([f64; 3], [f64; 3], usize, Option<usize>)> =
        vec![(start, [0.0, 0.0, 1.0], 0, None)];

    while let Some((p0, dir, gen, parent)) = stack.pop() {
        let length = params.root_length * params.length_decay.powi(gen as i32);
        let radius = params.root_radius * params.radius_decay.powi(gen as i32);
        let steps = length.ceil().max(1.0) as usize;
        let mut polyline = Vec::with_capacity(steps + 1);
        for i in 0..=steps {
            let t = length * i as f64 / steps as f64;
            let p = [p0[0] + dir[0] * t, p0[1] + dir[1] * t, p0[2] + dir[2] * t];
            check_in_bounds(p, radius, dims, gen)?;
            polyline.push(p);
        }
        let end = *polyline.last().expect("polyline non-empty");
        let id = tree.branches.len();
        tree.branches.push(Branch {
            id,
            parent_id: parent,
            polyline,
            radius_start: radius,
            radius_end: radius,
            generation: gen,
        });
        if gen + 1 < params.generations {
            let azimuth = rng.gen::<f64>() * std::f64::consts::TAU;
            let jitter_a: f64 = (rng.gen::<f64>() * 2.0 - 1.0) * params.jitter_deg;
            let jitter_b: f64 = (rng.gen::<f64>() * 2.0 - 1.0) * params.jitter_deg;
            let (u, w) = perpendicular_frame(dir);
            let axis = [
                u[0] * azimuth.cos() + w[0] * azimuth.sin(),
                u[1] * azimuth.cos() + w[1] * azimuth.sin(),
                u[2] * azimuth.cos() + w[2] * azimuth.sin(),
            ];
            let theta_a = (params.branch_angle_deg + jitter_a).to_radians();
            let theta_b = -(params.branch_angle_deg + jitter_b).to_radians();
            // push right child first so the left child is processed first
            stack.push((end, rotate_about(dir, axis, theta_b), gen + 1, Some(id)));
            stack.push((end, rotate_about(dir, axis, theta_a), gen + 1, Some(id)));
        }
    }
    Ok(tree)
}

fn check_in_bounds(
    p: [f64; 3],
    radius: f64,
    dims: (usize, usize, usize),
    generation: usize,
) -> Result<()> {
    let margin = 2.0;
    let lims = [dims.0 as f64, dims.1 as f64, dims.2 as f64];
    for a in 0..3 {
        if p[a] - radius < margin || p[a] + radius > lims[a] - 1.0 - margin {
            return Err(Error::TreeOutOfBounds { generation });
        }
    }
    Ok(())
}

/// Any unit vector perpendicular to `d`, plus the completion of the frame.
fn perpendicular_frame(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if d[0].abs() <= d[1].abs() && d[0].abs() <= d[2].abs() {
        [1.0, 0.0, 0.0]
    } else if d[1].abs() <= d[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let u = normalize(cross(d, pick));
    let w = normalize(cross(d, u));
    (u, w)
}

/// Rodrigues rotation of `v` about unit `axis` by `theta`; `axis` is
/// perpendicular to `v` in our usage so the parallel term drops out, but the
/// general formula is kept.
fn rotate_about(v: [f64; 3], axis: [f64; 3], theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    let cr = cross(axis, v);
    let dot = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    normalize([
        v[0] * c + cr[0] * s + axis[0] * dot * (1.0 - c),
        v[1] * c + cr[1] * s + axis[1] * dot * (1.0 - c),
        v[2] * c + cr[2] * s + axis[2] * dot * (1.0 - c),
    ])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Distance from point `p` to the segment `[a, b]`.
fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    if denom == 0.0 {
        return dist3(p, a);
    }
    let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / denom).clamp(0.0, 1.0);
    dist3(p, [a[0] + ab[0] * t, a[1] + ab[1] * t, a[2] + ab[2] * t])
}

fn rasterize(params: &SynthParams, tree: AirwayTree) -> Result<(GroundTruthBundle, RasterAux)> {
    let dims = params.dims;
    let n = dims.0 * dims.1 * dims.2;

    // flatten segments: (a, b, radius)
    let segments: Vec<([f64; 3], [f64; 3], f64)> = tree
        .branches
        .iter()
        .flat_map(|b| {
            b.polyline
                .windows(2)
                .map(|w| (w[0], w[1], b.radius_start))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut seg_dist = vec![f64::INFINITY; n];
    let mut radius = vec![0.0; n];
    let (nx, ny) = (dims.0, dims.1);
    seg_dist
        .par_iter_mut()
        .zip(radius.par_iter_mut())
        .enumerate()
        .for_each(|(i, (sd, rad))| {
            let x = (i % nx) as f64;
            let y = ((i / nx) % ny) as f64;
            let z = (i / (nx * ny)) as f64;
            let p = [x, y, z];
            for &(a, b, r) in &segments {
                let d = point_segment_distance(p, a, b);
                if d < *sd {
                    *sd = d;
                    *rad = r;
                }
            }
        });

    // Tie rule: a voxel exactly at distance == radius is foreground.
    let mask_data: Vec<f64> = seg_dist
        .iter()
        .zip(&radius)
        .map(|(&d, &r)| if d <= r { 1.0 } else { 0.0 })
        .collect();
    let mask = Volume::new(dims, mask_data)?;

    let mut centerline = Volume::zeros(dims);
    for b in &tree.branches {
        for p in &b.polyline {
            let x = p[0].round() as usize;
            let y = p[1].round() as usize;
            let z = p[2].round() as usize;
            centerline.set(x, y, z, 1.0);
        }
    }

    let mut dc_data = vec![0.0; n];
    let mut dc_max = 0.0f64;
    for i in 0..n {
        if mask.data()[i] != 0.0 {
            // a voxel geometrically on a segment is a centerline voxel even
            // if no polyline sample rounded onto it
            let d = if centerline.data()[i] != 0.0 || seg_dist[i] < 1e-12 {
                0.0
            } else {
                seg_dist[i]
            };
            dc_data[i] = d;
            dc_max = dc_max.max(d);
        }
    }
    // keep the equivalence dc == 0 <=> centerline voxel
    for i in 0..n {
        if mask.data()[i] != 0.0 && dc_data[i] == 0.0 {
            centerline.data_mut()[i] = 1.0;
        }
    }
    let dc_map = Volume::new(dims, dc_data)?;

    Ok((
        GroundTruthBundle {
            mask,
            tree,
            dc_map,
            dc_max,
            centerline_mask: centerline,
        },
        RasterAux { seg_dist, radius },
    ))
}

fn render_input(params: &SynthParams, render: &RenderParams, aux: &RasterAux) -> Volume {
    let dims = params.dims;
    let n = dims.0 * dims.1 * dims.2;
    // separate noise stream so tree geometry and texture stay independent
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let r = aux.radius[i];
        let shell = ((r - aux.seg_dist[i]) / render.edge_width + 0.5).clamp(0.0, 1.0);
        let contrast = render.contrast_min
            + (1.0 - render.contrast_min) * (r / params.root_radius).min(1.0);
        let noise = gauss(&mut rng) * render.noise_sigma;
        data.push(shell * contrast + noise);
    }
    Volume::new(dims, data).expect("dims validated")
}

/// Box-Muller standard normal from a seeded uniform stream.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Exact Euclidean distance transform by brute force: for every foreground
/// voxel, the minimum distance in voxel units to any boundary voxel; zero
/// outside the mask.
pub fn exact_edt(mask: &Volume, boundary: &Volume) -> Result<Volume> {
    mask.check_same_shape(boundary)?;
    if !mask.is_binary() || !boundary.is_binary() {
        return Err(Error::InvalidVolume("exact_edt needs binary inputs".into()));
    }
    let fg_count = mask.count_foreground();
    let boundary_voxels: Vec<(f64, f64, f64)> = boundary
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| {
            let (x, y, z) = boundary.coords(i);
            (x as f64, y as f64, z as f64)
        })
        .collect();
    if fg_count > 0 && boundary_voxels.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    let (nx, ny) = (mask.dims().0, mask.dims().1);
    let mut out = vec![0.0; mask.len()];
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        if mask.data()[i] == 0.0 {
            return;
        }
        let x = (i % nx) as f64;
        let y = ((i / nx) % ny) as f64;
        let z = (i / (nx * ny)) as f64;
        let mut best = f64::INFINITY;
        for &(bx, by, bz) in &boundary_voxels {
            let d2 = (x - bx) * (x - bx) + (y - by) * (y - by) + (z - bz) * (z - bz);
            if d2 < best {
                best = d2;
            }
        }
        *o = best.sqrt();
    });
    Volume::new(mask.dims(), out)
}

/// Foreground voxels with at least one background 26-neighbor; the volume
/// border counts as background.
pub fn hard_boundary(mask: &Volume) -> Result<Volume> {
    if !mask.is_binary() {
        return Err(Error::InvalidVolume("hard_boundary needs a binary mask".into()));
    }
    let (nx, ny, nz) = mask.dims();
    let mut out = Volume::zeros(mask.dims());
    for z in 0..nz {
        for y in 0..ny {
            'voxel: for x in 0..nx {
                if mask.get(x, y, z) == 0.0 {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let xx = x as i64 + dx;
                            let yy = y as i64 + dy;
                            let zz = z as i64 + dz;
                            let outside = xx < 0
                                || yy < 0
                                || zz < 0
                                || xx >= nx as i64
                                || yy >= ny as i64
                                || zz >= nz as i64;
                            if outside || mask.get(xx as usize, yy as usize, zz as usize) == 0.0 {
                                out.set(x, y, z, 1.0);
                                continue 'voxel;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
