//! Single-layer unidirectional GRU question encoder with hand-derived
//! backward-through-time.

use crate::error::{CfrError, Result};
use crate::matrix::{linear, matmul, outer, sigmoid, Matrix};
use crate::text::{EmbeddingTable, Vocabulary, UNK};

/// One gate: input weights, recurrent weights, bias (1 x d_h).
#[derive(Debug, Clone, PartialEq)]
pub struct GruGate {
    pub wx: Matrix, // d_in x d_h
    pub wh: Matrix, // d_h x d_h
    pub b: Matrix,  // 1 x d_h
}

impl GruGate {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        GruGate {
            wx: Matrix::zeros(d_in, d_h),
            wh: Matrix::zeros(d_h, d_h),
            b: Matrix::zeros(1, d_h),
        }
    }
}

/// Update gate z, reset gate r, candidate c.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub update: GruGate,
    pub reset: GruGate,
    pub candidate: GruGate,
}

impl GruParams {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        GruParams {
            update: GruGate::zeros(d_in, d_h),
            reset: GruGate::zeros(d_in, d_h),
            candidate: GruGate::zeros(d_in, d_h),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.update.wx.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.update.wx.cols()
    }
}

/// Per-timestep intermediates kept for backward.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub inputs: Matrix,   // n x d_in embedded tokens
    pub z: Matrix,        // n x d_h
    pub r: Matrix,        // n x d_h
    pub c: Matrix,        // n x d_h candidate
    pub hidden: Matrix,   // n x d_h, row t = h_{t+1}
}

fn gate_preact(x: &[f64], h_prev: &[f64], gate: &GruGate) -> Result<Vec<f64>> {
    let xm = linear(&Matrix::row_vector(x.to_vec()), &gate.wx, Some(gate.b.row(0)))?;
    let hm = matmul(&Matrix::row_vector(h_prev.to_vec()), &gate.wh)?;
    Ok(xm
        .row(0)
        .iter()
        .zip(hm.row(0).iter())
        .map(|(a, b)| a + b)
        .collect())
}

/// Embed tokens and run the GRU; every word yields one output row.
/// An empty token list is padded with a single `<unk>`.
pub fn gru_encode(
    tokens: &[String],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    params: &GruParams,
) -> Result<(Matrix, GruCache)> {
    if table.dim() != params.input_dim() {
        return Err(CfrError::shape(format!(
            "embedding dim {} vs gru input dim {}",
            table.dim(),
            params.input_dim()
        )));
    }
    let padded;
    let tokens: &[String] = if tokens.is_empty() {
        padded = vec![UNK.to_string()];
        &padded
    } else {
        tokens
    };

    let n = tokens.len();
    let d_h = params.hidden_dim();
    let mut inputs = Matrix::zeros(n, table.dim());
    for (t, tok) in tokens.iter().enumerate() {
        inputs.row_mut(t).copy_from_slice(table.vector(vocab.index_of(tok)));
    }

    let mut z_all = Matrix::zeros(n, d_h);
    let mut r_all = Matrix::zeros(n, d_h);
    let mut c_all = Matrix::zeros(n, d_h);
    let mut h_all = Matrix::zeros(n, d_h);
    let mut h_prev = vec![0.0; d_h];

    for t in 0..n {
        let x = inputs.row(t).to_vec();
        let z: Vec<f64> = gate_preact(&x, &h_prev, &params.update)?
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = gate_preact(&x, &h_prev, &params.reset)?
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = gate_preact(&x, &rh, &params.candidate)?
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h: Vec<f64> = (0..d_h)
            .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k])
            .collect();

        z_all.row_mut(t).copy_from_slice(&z);
        r_all.row_mut(t).copy_from_slice(&r);
        c_all.row_mut(t).copy_from_slice(&c);
        h_all.row_mut(t).copy_from_slice(&h);
        h_prev = h;
    }

    let cache = GruCache { inputs, z: z_all, r: r_all, c: c_all, hidden: h_all.clone() };
    Ok((h_all, cache))
}

/// Backward-through-time: dL/d(output rows) -> parameter gradients.
/// Input embeddings are frozen, so no gradient flows to them.
pub fn gru_backward(
    params: &GruParams,
    cache: &GruCache,
    d_hidden: &Matrix,
    grads: &mut GruParams,
) -> Result<()> {
    let n = cache.hidden.rows();
    let d_h = params.hidden_dim();
    let mut carry = vec![0.0; d_h];

    for t in (0..n).rev() {
        let h_prev: Vec<f64> = if t == 0 {
            vec![0.0; d_h]
        } else {
            cache.hidden.row(t - 1).to_vec()
        };
        let x = cache.inputs.row(t);
        let z = cache.z.row(t);
        let r = cache.r.row(t);
        let c = cache.c.row(t);

        let dh: Vec<f64> = d_hidden
            .row(t)
            .iter()
            .zip(carry.iter())
            .map(|(a, b)| a + b)
            .collect();

        // h = (1-z) h_prev + z c
        let dz: Vec<f64> = (0..d_h).map(|k| dh[k] * (c[k] - h_prev[k])).collect();
        let dc: Vec<f64> = (0..d_h).map(|k| dh[k] * z[k]).collect();
        let mut dh_prev: Vec<f64> = (0..d_h).map(|k| dh[k] * (1.0 - z[k])).collect();

        // candidate: c = tanh(x Wc + (r .* h_prev) Uc + bc)
        let da_c: Vec<f64> = (0..d_h).map(|k| dc[k] * (1.0 - c[k] * c[k])).collect();
        let rh: Vec<f64> = (0..d_h).map(|k| r[k] * h_prev[k]).collect();
        grads.candidate.wx.add_assign(&outer(x, &da_c))?;
        grads.candidate.wh.add_assign(&outer(&rh, &da_c))?;
        for (g, d) in grads.candidate.b.row_mut(0).iter_mut().zip(da_c.iter()) {
            *g += d;
        }
        let d_rh = matmul(&Matrix::row_vector(da_c.clone()), &params.candidate.wh.transpose())?;
        let mut dr = vec![0.0; d_h];
        for k in 0..d_h {
            dr[k] = d_rh.get(0, k) * h_prev[k];
            dh_prev[k] += d_rh.get(0, k) * r[k];
        }

        // update gate: z = sigma(x Wz + h_prev Uz + bz)
        let da_z: Vec<f64> = (0..d_h).map(|k| dz[k] * z[k] * (1.0 - z[k])).collect();
        grads.update.wx.add_assign(&outer(x, &da_z))?;
        grads.update.wh.add_assign(&outer(&h_prev, &da_z))?;
        for (g, d) in grads.update.b.row_mut(0).iter_mut().zip(da_z.iter()) {
            *g += d;
        }
        let dzh = matmul(&Matrix::row_vector(da_z), &params.update.wh.transpose())?;
        for k in 0..d_h {
            dh_prev[k] += dzh.get(0, k);
        }

        // reset gate: r = sigma(x Wr + h_prev Ur + br)
        let da_r: Vec<f64> = (0..d_h).map(|k| dr[k] * r[k] * (1.0 - r[k])).collect();
        grads.reset.wx.add_assign(&outer(x, &da_r))?;
        grads.reset.wh.add_assign(&outer(&h_prev, &da_r))?;
        for (g, d) in grads.reset.b.row_mut(0).iter_mut().zip(da_r.iter()) {
            *g += d;
        }
        let drh = matmul(&Matrix::row_vector(da_r), &params.reset.wh.transpose())?;
        for k in 0..d_h {
            dh_prev[k] += drh.get(0, k);
        }

        carry = dh_prev;
    }
    Ok(())
}
