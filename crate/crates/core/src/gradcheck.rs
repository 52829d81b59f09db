//! Central finite-difference gradient verification.
//!
//! The checker rebuilds the whole graph from scratch for every perturbed
//! coordinate, so it never shares state with the backward pass it is
//! auditing. Used by the test and acceptance suites; exposed publicly so
//! downstream crates can gate their own composites.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::volume::Volume;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares an analytic gradient against central finite differences.
///
/// `eval` receives the perturbed leaf values and must return the scalar loss
/// rebuilt from them. `analytic` is the gradient produced by one backward
/// pass at the unperturbed point, flattened in the same order as `inputs`.
/// Relative error uses `|a - n| / max(|a|, |n|, floor)`; coordinates where
/// both sides are below `1e-7` in magnitude count as agreeing.
pub fn check_grad(
    inputs: &[Volume],
    analytic: &[Vec<f64>],
    h: f64,
    mut eval: impl FnMut(&[Volume]) -> Result<f64>,
) -> Result<GradCheck> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Volume> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut flat = 0usize;
    #[allow(clippy::needless_range_loop)]
    for vi in 0..inputs.len() {
        for ci in 0..inputs[vi].len() {
            let orig = inputs[vi].data()[ci];

            work[vi].data_mut()[ci] = orig + h;
            let f_plus = eval(&work)?;
            work[vi].data_mut()[ci] = orig - h;
            let f_minus = eval(&work)?;
            work[vi].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[vi][ci];
            report.coords_checked += 1;
            if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
                flat += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = flat;
                report.analytic = a;
                report.numeric = numeric;
            }
            flat += 1;
        }
    }
    Ok(report)
}

/// One-call variant: `build` constructs the scalar loss from leaf nodes.
/// Runs backward once for the analytic gradients, then sweeps finite
/// differences by rebuilding the graph per perturbed coordinate.
pub fn check_graph(
    inputs: &[Volume],
    h: f64,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();
    check_grad(inputs, &analytic, h, |vals| {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone(), false)).collect();
        let root = build(&mut t, &ids)?;
        Ok(t.scalar_value(root))
    })
}
