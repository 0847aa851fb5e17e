//! Bilinear attention fusion of the two modalities, used once at the
//! coarse level (raw features) and once at the fine level (filtered
//! information).

use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::matrix::{
    matmul, softmax_flat, softmax_flat_backward, softmax_rows, softmax_rows_backward, Matrix,
};

/// Normalization axis of the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// One distribution over all question-image instance pairs.
    #[default]
    Flat,
    /// One distribution per question instance.
    Rows,
}

/// Value factors (m_q, m_i) and independent attention factors.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearParams {
    pub m_q: Matrix,     // d_q x d
    pub m_i: Matrix,     // d_i x d
    pub m_q_att: Matrix, // d_q x d
    pub m_i_att: Matrix, // d_i x d
}

impl BilinearParams {
    pub fn zeros(d_q: usize, d_i: usize, d: usize) -> Self {
        BilinearParams {
            m_q: Matrix::zeros(d_q, d),
            m_i: Matrix::zeros(d_i, d),
            m_q_att: Matrix::zeros(d_q, d),
            m_i_att: Matrix::zeros(d_i, d),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.m_q.cols()
    }
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    pub q_att: Matrix,  // Xq * m_q_att
    pub i_att: Matrix,  // Xi * m_i_att
    pub attention: Matrix,
    pub q_val: Matrix,  // Xq * m_q
    pub i_val: Matrix,  // Xi * m_i
}

/// A = softmax((Xq M'_q)(Xi M'_i)^T), normalized per the chosen axis.
pub fn attention_map(
    xq: &Matrix,
    xi: &Matrix,
    params: &BilinearParams,
    axis: SoftmaxAxis,
) -> Result<Matrix> {
    let q = matmul(xq, &params.m_q_att)?;
    let i = matmul(xi, &params.m_i_att)?;
    let scores = matmul(&q, &i.transpose())?;
    match axis {
        SoftmaxAxis::Flat => softmax_flat(&scores),
        SoftmaxAxis::Rows => softmax_rows(&scores),
    }
}

/// j_k = sum_{a,b} A[a][b] (Xq M_q)[a][k] (Xi M_i)[b][k].
pub fn joint_representation(
    xq: &Matrix,
    xi: &Matrix,
    attention: &Matrix,
    params: &BilinearParams,
) -> Result<Vec<f64>> {
    let u = matmul(xq, &params.m_q)?;
    let v = matmul(xi, &params.m_i)?;
    joint_from_projected(&u, &v, attention)
}

fn joint_from_projected(u: &Matrix, v: &Matrix, attention: &Matrix) -> Result<Vec<f64>> {
    if attention.rows() != u.rows() || attention.cols() != v.rows() {
        return Err(CfrError::shape(format!(
            "attention {}x{} vs projected {}x{} and {}x{}",
            attention.rows(),
            attention.cols(),
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let d = u.cols();
    // j = colsum_k of U^T (A V) restricted to matching columns:
    // j_k = sum_a U[a][k] * (A V)[a][k]
    let av = matmul(attention, v)?;
    let mut j = vec![0.0; d];
    for a in 0..u.rows() {
        let urow = u.row(a);
        let avrow = av.row(a);
        for k in 0..d {
            j[k] += urow[k] * avrow[k];
        }
    }
    Ok(j)
}

/// Attention map plus joint representation; the map is retained for
/// explanations.
pub fn fuse(
    xq: &Matrix,
    xi: &Matrix,
    params: &BilinearParams,
    axis: SoftmaxAxis,
) -> Result<(Vec<f64>, Matrix)> {
    let (j, cache) = fuse_cached(xq, xi, params, axis)?;
    Ok((j, cache.attention))
}

pub fn fuse_cached(
    xq: &Matrix,
    xi: &Matrix,
    params: &BilinearParams,
    axis: SoftmaxAxis,
) -> Result<(Vec<f64>, FuseCache)> {
    let q_att = matmul(xq, &params.m_q_att)?;
    let i_att = matmul(xi, &params.m_i_att)?;
    let scores = matmul(&q_att, &i_att.transpose())?;
    let attention = match axis {
        SoftmaxAxis::Flat => softmax_flat(&scores)?,
        SoftmaxAxis::Rows => softmax_rows(&scores)?,
    };
    let q_val = matmul(xq, &params.m_q)?;
    let i_val = matmul(xi, &params.m_i)?;
    let j = joint_from_projected(&q_val, &i_val, &attention)?;
    Ok((j, FuseCache { q_att, i_att, attention, q_val, i_val }))
}

/// Backward of `fuse_cached` given dL/dj. Accumulates factor-matrix
/// gradients and returns (dL/dXq, dL/dXi).
pub fn fuse_backward(
    xq: &Matrix,
    xi: &Matrix,
    params: &BilinearParams,
    axis: SoftmaxAxis,
    cache: &FuseCache,
    d_joint: &[f64],
    grads: &mut BilinearParams,
) -> Result<(Matrix, Matrix)> {
    let a = &cache.attention;
    let (n_q, n_i) = (a.rows(), a.cols());
    let d = params.joint_dim();

    // value path
    let av = matmul(a, &cache.i_val)?;
    let mut d_u = Matrix::zeros(n_q, d);
    for r in 0..n_q {
        let avr = av.row(r);
        let out = d_u.row_mut(r);
        for k in 0..d {
            out[k] = avr[k] * d_joint[k];
        }
    }
    let atu = matmul(&a.transpose(), &cache.q_val)?;
    let mut d_v = Matrix::zeros(n_i, d);
    for r in 0..n_i {
        let atr = atu.row(r);
        let out = d_v.row_mut(r);
        for k in 0..d {
            out[k] = atr[k] * d_joint[k];
        }
    }

    // attention path: dA[a][b] = sum_k g_k U[a][k] V[b][k]
    let mut u_scaled = cache.q_val.clone();
    for r in 0..n_q {
        for (k, v) in u_scaled.row_mut(r).iter_mut().enumerate() {
            *v *= d_joint[k];
        }
    }
    let d_a = matmul(&u_scaled, &cache.i_val.transpose())?;
    let d_scores = match axis {
        SoftmaxAxis::Flat => softmax_flat_backward(a, &d_a),
        SoftmaxAxis::Rows => softmax_rows_backward(a, &d_a),
    };
    let d_q_att = matmul(&d_scores, &cache.i_att)?;
    let d_i_att = matmul(&d_scores.transpose(), &cache.q_att)?;

    grads.m_q.add_assign(&matmul(&xq.transpose(), &d_u)?)?;
    grads.m_i.add_assign(&matmul(&xi.transpose(), &d_v)?)?;
    grads.m_q_att.add_assign(&matmul(&xq.transpose(), &d_q_att)?)?;
    grads.m_i_att.add_assign(&matmul(&xi.transpose(), &d_i_att)?)?;

    let mut d_xq = matmul(&d_u, &params.m_q.transpose())?;
    d_xq.add_assign(&matmul(&d_q_att, &params.m_q_att.transpose())?)?;
    let mut d_xi = matmul(&d_v, &params.m_i.transpose())?;
    d_xi.add_assign(&matmul(&d_i_att, &params.m_i_att.transpose())?)?;
    Ok((d_xq, d_xi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_matrix(rows: usize, cols: usize, phase: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i as f64) * 0.47 + phase).sin()).collect(),
        )
        .unwrap()
    }

    fn random_params(d_q: usize, d_i: usize, d: usize) -> BilinearParams {
        BilinearParams {
            m_q: rng_matrix(d_q, d, 0.1),
            m_i: rng_matrix(d_i, d, 1.3),
            m_q_att: rng_matrix(d_q, d, 2.9),
            m_i_att: rng_matrix(d_i, d, 0.8),
        }
    }

    #[test]
    fn zero_attention_factors_give_uniform_map() {
        let xq = rng_matrix(3, 4, 0.2);
        let xi = rng_matrix(2, 5, 1.1);
        let mut params = random_params(4, 5, 6);
        params.m_q_att = Matrix::zeros(4, 6);
        params.m_i_att = Matrix::zeros(5, 6);
        let a = attention_map(&xq, &xi, &params, SoftmaxAxis::Flat).unwrap();
        for &v in a.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_map() {
        let xq = rng_matrix(1, 4, 0.2);
        let xi = rng_matrix(1, 5, 1.1);
        let a = attention_map(&xq, &xi, &random_params(4, 5, 6), SoftmaxAxis::Flat).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn attention_map_scalar_oracle() {
        let xq = rng_matrix(3, 4, 0.5);
        let xi = rng_matrix(2, 5, 2.1);
        let params = random_params(4, 5, 7);
        let a = attention_map(&xq, &xi, &params, SoftmaxAxis::Flat).unwrap();

        // brute force: scores then a flat softmax by scalar loops
        let mut scores = vec![vec![0.0; 2]; 3];
        for r in 0..3 {
            for c in 0..2 {
                for k in 0..7 {
                    let mut q = 0.0;
                    let mut i = 0.0;
                    for t in 0..4 {
                        q += xq.get(r, t) * params.m_q_att.get(t, k);
                    }
                    for t in 0..5 {
                        i += xi.get(c, t) * params.m_i_att.get(t, k);
                    }
                    scores[r][c] += q * i;
                }
            }
        }
        let flat: Vec<f64> = scores.iter().flatten().cloned().collect();
        let mx = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = flat.iter().map(|v| (v - mx).exp()).sum();
        for r in 0..3 {
            for c in 0..2 {
                let expected = (scores[r][c] - mx).exp() / total;
                assert!((a.get(r, c) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn joint_degenerate_cases() {
        let xq = rng_matrix(1, 4, 0.3);
        let xi = rng_matrix(1, 5, 0.9);
        let params = random_params(4, 5, 6);
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let j = joint_representation(&xq, &xi, &one, &params).unwrap();
        let u = matmul(&xq, &params.m_q).unwrap();
        let v = matmul(&xi, &params.m_i).unwrap();
        for k in 0..6 {
            assert!((j[k] - u.get(0, k) * v.get(0, k)).abs() < 1e-14);
        }

        let zero = Matrix::zeros(1, 1);
        let j = joint_representation(&xq, &xi, &zero, &params).unwrap();
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_scalar_oracle() {
        let xq = rng_matrix(4, 6, 1.9);
        let xi = rng_matrix(3, 5, 0.4);
        let params = random_params(6, 5, 7);
        let a = attention_map(&xq, &xi, &params, SoftmaxAxis::Flat).unwrap();
        let j = joint_representation(&xq, &xi, &a, &params).unwrap();

        let u = matmul(&xq, &params.m_q).unwrap();
        let v = matmul(&xi, &params.m_i).unwrap();
        for k in 0..7 {
            let mut expected = 0.0;
            for r in 0..4 {
                for c in 0..3 {
                    expected += a.get(r, c) * u.get(r, k) * v.get(c, k);
                }
            }
            assert!((j[k] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_linear_in_attention() {
        let xq = rng_matrix(3, 4, 0.7);
        let xi = rng_matrix(2, 5, 1.5);
        let params = random_params(4, 5, 6);
        let a1 = rng_matrix(3, 2, 0.11).map(f64::abs);
        let a2 = rng_matrix(3, 2, 1.37).map(f64::abs);
        let sum = a1.add(&a2).unwrap();
        let j1 = joint_representation(&xq, &xi, &a1, &params).unwrap();
        let j2 = joint_representation(&xq, &xi, &a2, &params).unwrap();
        let js = joint_representation(&xq, &xi, &sum, &params).unwrap();
        for k in 0..6 {
            assert!((js[k] - j1[k] - j2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_equals_sequential_composition() {
        let xq = rng_matrix(3, 4, 0.6);
        let xi = rng_matrix(2, 5, 2.4);
        let params = random_params(4, 5, 6);
        let (j, a) = fuse(&xq, &xi, &params, SoftmaxAxis::Flat).unwrap();
        let a2 = attention_map(&xq, &xi, &params, SoftmaxAxis::Flat).unwrap();
        let j2 = joint_representation(&xq, &xi, &a2, &params).unwrap();
        assert_eq!(a, a2);
        assert_eq!(j, j2);
    }

    #[test]
    fn permutation_of_image_rows_permutes_columns_and_keeps_joint() {
        let xq = rng_matrix(3, 4, 1.2);
        let xi = rng_matrix(4, 5, 0.3);
        let params = random_params(4, 5, 6);
        let (j, a) = fuse(&xq, &xi, &params, SoftmaxAxis::Flat).unwrap();

        let perm = [3usize, 1, 0, 2];
        let xi_perm =
            Matrix::from_rows(&perm.iter().map(|&r| xi.row(r).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let (j_perm, a_perm) = fuse(&xq, &xi_perm, &params, SoftmaxAxis::Flat).unwrap();
        for k in 0..6 {
            assert!((j[k] - j_perm[k]).abs() < 1e-10);
        }
        for r in 0..3 {
            for (c, &orig) in perm.iter().enumerate() {
                assert!((a_perm.get(r, c) - a.get(r, orig)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_axis_normalizes_per_row() {
        let xq = rng_matrix(3, 4, 0.9);
        let xi = rng_matrix(2, 5, 1.8);
        let a = attention_map(&xq, &xi, &random_params(4, 5, 6), SoftmaxAxis::Rows).unwrap();
        for r in 0..3 {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn global_unit_sum() {
        let xq = rng_matrix(3, 4, 2.8);
        let xi = rng_matrix(5, 6, 0.15);
        let a = attention_map(&xq, &xi, &random_params(4, 6, 7), SoftmaxAxis::Flat).unwrap();
        let s: f64 = a.data().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
        assert!(a.data().iter().all(|&v| v > 0.0));
    }
}
