//! Information filtering: a predicate-conditioned weighting map over
//! feature instances, and the residually rescaled filtered features.

use crate::error::{CfrError, Result};
use crate::matrix::{dot, linear, matmul, outer, softmax_vec, softmax_vec_backward, Matrix};

/// Projections for one filtering block. `chan_scale` replaces the
/// all-ones channel vector when the learnable variant is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub tau_f_w: Matrix, // d_f x d_psi
    pub tau_f_b: Matrix, // 1 x d_psi
    pub tau_p_w: Matrix, // d_p x d_psi
    pub tau_p_b: Matrix, // 1 x d_psi
    pub chan_scale: Option<Matrix>, // 1 x d_psi
}

impl FilterParams {
    pub fn zeros(d_f: usize, d_p: usize, d_psi: usize, learnable_scale: bool) -> Self {
        FilterParams {
            tau_f_w: Matrix::zeros(d_f, d_psi),
            tau_f_b: Matrix::zeros(1, d_psi),
            tau_p_w: Matrix::zeros(d_p, d_psi),
            tau_p_b: Matrix::zeros(1, d_psi),
            chan_scale: learnable_scale.then(|| Matrix::zeros(1, d_psi)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.tau_f_w.cols()
    }
}

/// Weighting map plus filtered features.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub psi_hat: Vec<f64>,
    pub psi: Matrix,
}

/// Intermediates for backward.
#[derive(Debug, Clone)]
pub struct FilterCache {
    pub f_prime: Matrix,       // tau_f(f), n_f x d_psi
    pub p_prime: Matrix,       // tau_p(p), n_p x d_psi
    pub pred_sum: Vec<f64>,    // column sums of p_prime
    pub psi_hat: Vec<f64>,
    pub psi: Matrix,
}

/// Softmax over instances of the summed feature-predicate affinities:
/// logit j = sum_i <tau_f(f)_j, tau_p(p)_i>.
pub fn weighting_map(f: &Matrix, p: &Matrix, params: &FilterParams) -> Result<Vec<f64>> {
    if f.rows() == 0 || p.rows() == 0 {
        return Err(CfrError::argument("weighting_map needs at least one row per input"));
    }
    let f_prime = linear(f, &params.tau_f_w, Some(params.tau_f_b.row(0)))?;
    let p_prime = linear(p, &params.tau_p_w, Some(params.tau_p_b.row(0)))?;
    let s = p_prime.col_sums();
    let logits: Vec<f64> = (0..f_prime.rows()).map(|j| dot(f_prime.row(j), &s)).collect();
    softmax_vec(&logits)
}

/// Row j of the output = tau_f(f)_j scaled by (1 + psi_hat_j), or by
/// (1 + psi_hat_j * scale) per channel in the learnable variant.
pub fn filter_info(f: &Matrix, psi_hat: &[f64], params: &FilterParams) -> Result<Matrix> {
    if psi_hat.len() != f.rows() {
        return Err(CfrError::shape(format!(
            "weighting map length {} vs {} feature rows",
            psi_hat.len(),
            f.rows()
        )));
    }
    let f_prime = linear(f, &params.tau_f_w, Some(params.tau_f_b.row(0)))?;
    Ok(scale_residual(&f_prime, psi_hat, params))
}

fn scale_residual(f_prime: &Matrix, psi_hat: &[f64], params: &FilterParams) -> Matrix {
    let d = f_prime.cols();
    let mut psi = f_prime.clone();
    for j in 0..psi.rows() {
        let w = psi_hat[j];
        let row = psi.row_mut(j);
        match &params.chan_scale {
            Some(c) => {
                for k in 0..d {
                    row[k] *= 1.0 + w * c.get(0, k);
                }
            }
            None => {
                for v in row.iter_mut() {
                    *v *= 1.0 + w;
                }
            }
        }
    }
    psi
}

/// weighting_map then filter_info, sharing the projection of `f`.
pub fn apply_filter(f: &Matrix, p: &Matrix, params: &FilterParams) -> Result<FilterOutput> {
    let (out, _) = apply_filter_cached(f, p, params)?;
    Ok(out)
}

pub fn apply_filter_cached(
    f: &Matrix,
    p: &Matrix,
    params: &FilterParams,
) -> Result<(FilterOutput, FilterCache)> {
    if f.rows() == 0 || p.rows() == 0 {
        return Err(CfrError::argument("apply_filter needs at least one row per input"));
    }
    let f_prime = linear(f, &params.tau_f_w, Some(params.tau_f_b.row(0)))?;
    let p_prime = linear(p, &params.tau_p_w, Some(params.tau_p_b.row(0)))?;
    let pred_sum = p_prime.col_sums();
    let logits: Vec<f64> = (0..f_prime.rows()).map(|j| dot(f_prime.row(j), &pred_sum)).collect();
    let psi_hat = softmax_vec(&logits)?;
    let psi = scale_residual(&f_prime, &psi_hat, params);
    let out = FilterOutput { psi_hat: psi_hat.clone(), psi: psi.clone() };
    Ok((out, FilterCache { f_prime, p_prime, pred_sum, psi_hat, psi }))
}

/// Backward of `apply_filter_cached` given dL/d(psi). Accumulates
/// parameter gradients and returns dL/df (the predicate input carries
/// no trainable upstream, so dL/dp is not produced).
pub fn filter_backward(
    f: &Matrix,
    p: &Matrix,
    params: &FilterParams,
    cache: &FilterCache,
    d_psi: &Matrix,
    grads: &mut FilterParams,
) -> Result<Matrix> {
    let n_f = f.rows();
    let d = params.out_dim();

    // psi_j = f'_j .* (1 + w_j * c)  (c = ones unless learnable)
    let mut d_f_prime = Matrix::zeros(n_f, d);
    let mut d_psi_hat = vec![0.0; n_f];
    for j in 0..n_f {
        let w = cache.psi_hat[j];
        let fp = cache.f_prime.row(j);
        let dp = d_psi.row(j);
        let out_row = d_f_prime.row_mut(j);
        match &params.chan_scale {
            Some(c) => {
                for k in 0..d {
                    out_row[k] = dp[k] * (1.0 + w * c.get(0, k));
                    d_psi_hat[j] += dp[k] * c.get(0, k) * fp[k];
                }
            }
            None => {
                for k in 0..d {
                    out_row[k] = dp[k] * (1.0 + w);
                    d_psi_hat[j] += dp[k] * fp[k];
                }
            }
        }
    }
    if let (Some(_), Some(gc)) = (&params.chan_scale, &mut grads.chan_scale) {
        for j in 0..n_f {
            let w = cache.psi_hat[j];
            let fp = cache.f_prime.row(j);
            let dp = d_psi.row(j);
            for k in 0..d {
                *gc.row_mut(0).get_mut(k).unwrap() += w * dp[k] * fp[k];
            }
        }
    }

    // softmax over logits l_j = <f'_j, pred_sum>
    let d_logits = softmax_vec_backward(&cache.psi_hat, &d_psi_hat);
    d_f_prime.add_assign(&outer(&d_logits, &cache.pred_sum))?;
    let mut d_pred_sum = vec![0.0; d];
    for j in 0..n_f {
        let fp = cache.f_prime.row(j);
        for k in 0..d {
            d_pred_sum[k] += d_logits[j] * fp[k];
        }
    }

    // pred_sum = column sums of p', so every p'_i row sees d_pred_sum
    let n_p = p.rows();
    let d_p_prime = {
        let ones = vec![1.0; n_p];
        outer(&ones, &d_pred_sum)
    };

    grads.tau_f_w.add_assign(&matmul(&f.transpose(), &d_f_prime)?)?;
    for (g, v) in grads.tau_f_b.row_mut(0).iter_mut().zip(d_f_prime.col_sums()) {
        *g += v;
    }
    grads.tau_p_w.add_assign(&matmul(&p.transpose(), &d_p_prime)?)?;
    for (g, v) in grads.tau_p_b.row_mut(0).iter_mut().zip(d_p_prime.col_sums()) {
        *g += v;
    }

    matmul(&d_f_prime, &params.tau_f_w.transpose())
}
