//! Semantic reasoning head: per-answer adaptive combination of the
//! coarse and fine joint representations into an answer distribution,
//! plus answer selection.

use crate::error::{CfrError, Result};
use crate::matrix::{linear, matmul, outer, softmax_vec, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_raw: Matrix,  // 1 x |A|, coarse adaptive weights before normalization
    pub wp_raw: Matrix, // 1 x |A|, fine
    pub tau_w: Matrix,  // d_cg x |A|
    pub tau_b: Matrix,  // 1 x |A|
    pub taup_w: Matrix, // d_fg x |A|
    pub taup_b: Matrix, // 1 x |A|
}

impl HeadParams {
    pub fn zeros(d_cg: usize, d_fg: usize, n_answers: usize) -> Self {
        HeadParams {
            w_raw: Matrix::zeros(1, n_answers),
            wp_raw: Matrix::zeros(1, n_answers),
            tau_w: Matrix::zeros(d_cg, n_answers),
            tau_b: Matrix::zeros(1, n_answers),
            taup_w: Matrix::zeros(d_fg, n_answers),
            taup_b: Matrix::zeros(1, n_answers),
        }
    }

    pub fn n_answers(&self) -> usize {
        self.w_raw.cols()
    }
}

/// How the two logit paths are combined; used by the ablation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathWeighting {
    /// Learned per-answer softmax pair.
    #[default]
    Adaptive,
    /// Coarse path only (w = 1, w' = 0).
    CoarseOnly,
    /// Fine path only (w = 0, w' = 1).
    FineOnly,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub z_cg: Vec<f64>,
    pub z_fg: Vec<f64>,
    pub w: Vec<f64>,
    pub wp: Vec<f64>,
    pub logits: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Per-answer softmax of the raw pair, so w + w' = 1 exactly.
pub fn normalize_adaptive(w_raw: &[f64], wp_raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if w_raw.len() != wp_raw.len() {
        return Err(CfrError::shape(format!(
            "adaptive weight lengths {} vs {}",
            w_raw.len(),
            wp_raw.len()
        )));
    }
    let mut w = Vec::with_capacity(w_raw.len());
    let mut wp = Vec::with_capacity(w_raw.len());
    for (&a, &b) in w_raw.iter().zip(wp_raw.iter()) {
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        w.push(ea / (ea + eb));
        wp.push(eb / (ea + eb));
    }
    Ok((w, wp))
}

/// rho = softmax(w .* tau(j_cg) + w' .* tau'(j_fg)).
pub fn answer_distribution(
    j_cg: &[f64],
    j_fg: &[f64],
    params: &HeadParams,
) -> Result<Vec<f64>> {
    Ok(answer_distribution_cached(j_cg, j_fg, params, PathWeighting::Adaptive)?.rho)
}

pub fn answer_distribution_cached(
    j_cg: &[f64],
    j_fg: &[f64],
    params: &HeadParams,
    weighting: PathWeighting,
) -> Result<HeadCache> {
    let n = params.n_answers();
    let z_cg = linear(
        &Matrix::row_vector(j_cg.to_vec()),
        &params.tau_w,
        Some(params.tau_b.row(0)),
    )?
    .row(0)
    .to_vec();
    let z_fg = linear(
        &Matrix::row_vector(j_fg.to_vec()),
        &params.taup_w,
        Some(params.taup_b.row(0)),
    )?
    .row(0)
    .to_vec();
    let (w, wp) = match weighting {
        PathWeighting::Adaptive => normalize_adaptive(params.w_raw.row(0), params.wp_raw.row(0))?,
        PathWeighting::CoarseOnly => (vec![1.0; n], vec![0.0; n]),
        PathWeighting::FineOnly => (vec![0.0; n], vec![1.0; n]),
    };
    let logits: Vec<f64> = (0..n).map(|a| w[a] * z_cg[a] + wp[a] * z_fg[a]).collect();
    let rho = softmax_vec(&logits)?;
    Ok(HeadCache { z_cg, z_fg, w, wp, logits, rho })
}

/// Backward given dL/d(pre-softmax logits). Accumulates head parameter
/// gradients and returns (dL/dj_cg, dL/dj_fg).
pub fn head_backward(
    j_cg: &[f64],
    j_fg: &[f64],
    params: &HeadParams,
    cache: &HeadCache,
    weighting: PathWeighting,
    d_logits: &[f64],
    grads: &mut HeadParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = params.n_answers();
    let d_z_cg: Vec<f64> = (0..n).map(|a| d_logits[a] * cache.w[a]).collect();
    let d_z_fg: Vec<f64> = (0..n).map(|a| d_logits[a] * cache.wp[a]).collect();

    grads.tau_w.add_assign(&outer(j_cg, &d_z_cg))?;
    for (g, d) in grads.tau_b.row_mut(0).iter_mut().zip(d_z_cg.iter()) {
        *g += d;
    }
    grads.taup_w.add_assign(&outer(j_fg, &d_z_fg))?;
    for (g, d) in grads.taup_b.row_mut(0).iter_mut().zip(d_z_fg.iter()) {
        *g += d;
    }

    if weighting == PathWeighting::Adaptive {
        // logit_a depends on w_a via w_a z_cg + (1 - w_a) z_fg, and the
        // pair softmax gives dw/da = w w', dw/db = -w w'
        for a in 0..n {
            let dw = d_logits[a] * (cache.z_cg[a] - cache.z_fg[a]);
            let coupled = dw * cache.w[a] * cache.wp[a];
            *grads.w_raw.row_mut(0).get_mut(a).unwrap() += coupled;
            *grads.wp_raw.row_mut(0).get_mut(a).unwrap() -= coupled;
        }
    }

    let d_j_cg = matmul(&Matrix::row_vector(d_z_cg), &params.tau_w.transpose())?
        .row(0)
        .to_vec();
    let d_j_fg = matmul(&Matrix::row_vector(d_z_fg), &params.taup_w.transpose())?
        .row(0)
        .to_vec();
    Ok((d_j_cg, d_j_fg))
}

/// dL/dlogits for cross-entropy on the head softmax: rho - onehot.
pub fn cross_entropy_logit_grad(rho: &[f64], target: usize) -> Vec<f64> {
    let mut d = rho.to_vec();
    d[target] -= 1.0;
    d
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(rho: &[f64]) -> Result<usize> {
    if rho.is_empty() {
        return Err(CfrError::argument("predict on empty distribution"));
    }
    let mut best = 0;
    for (i, &v) in rho.iter().enumerate() {
        if v > rho[best] {
            best = i;
        }
    }
    Ok(best)
}

/// The k highest-confidence answers, descending, ties toward the lower
/// index.
pub fn top_k(rho: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > rho.len() {
        return Err(CfrError::argument(format!(
            "k = {} out of range for {} answers",
            k,
            rho.len()
        )));
    }
    let mut indexed: Vec<(usize, f64)> = rho.iter().cloned().enumerate().collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    Ok(indexed)
}
