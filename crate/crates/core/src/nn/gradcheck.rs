//! Central finite differences against reverse-mode gradients, in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Entries checked per parameter tensor; larger tensors are subsampled.
    pub max_entries: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±step perturbation changed some ReLU's active set, so
    /// the function is not differentiable on the probed interval.
    pub skipped_kinks: usize,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(build: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    Ok((g.value(out).item(), g.relu_signature()))
}

/// Compares reverse-mode gradients of the scalar built by `build` with
/// central differences at `params`. `build` receives the leaf ids of the
/// parameters in order and returns the scalar output node.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with(params, build, opts, None)
}

pub(crate) fn grad_check_with<F>(
    params: &[Tensor<f64>],
    build: F,
    opts: &GradCheckOptions,
    fault: Option<super::Fault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        let entries: Vec<usize> = if p.len() <= opts.max_entries {
            (0..p.len()).collect()
        } else {
            let mut e = sample(&mut rng, p.len(), opts.max_entries).into_vec();
            e.sort_unstable();
            e
        };
        for e in entries {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let (fp, sp) = evaluate(&build, &work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let (fm, sm) = evaluate(&build, &work)?;
            work[pi].data_mut()[e] = orig;
            if sp != sm {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}
