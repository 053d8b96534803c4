//! Bidirectional contrastive loss, pairwise diversity loss, and their
//! combination, with closed-form gradients w.r.t. the raw
//! (pre-normalization) embeddings.
//!
//! Losses operate on an [`EmbeddingBatch`] whose rows are already unit
//! vectors; gradient entry points take the raw matrices and chain through
//! the row normalization analytically.

use ndarray::{Array1, Array2, Axis};

use crate::error::{EdgeError, Result};

/// Paired image/text embeddings, row-wise L2 normalized.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub z_vec: Array2<f64>,
    pub y_vec: Array2<f64>,
}

impl EmbeddingBatch {
    /// Normalizes raw embeddings row-wise and validates shapes.
    pub fn from_raw(z_raw: &Array2<f64>, y_raw: &Array2<f64>) -> Result<Self> {
        if z_raw.nrows() != y_raw.nrows() {
            return Err(EdgeError::Validation(format!(
                "embedding batch rows differ: {} vs {}",
                z_raw.nrows(),
                y_raw.nrows()
            )));
        }
        if z_raw.nrows() == 0 {
            return Err(EdgeError::Validation("embedding batch is empty".into()));
        }
        for m in [z_raw, y_raw] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(EdgeError::Validation("non-finite embedding entry".into()));
            }
        }
        let (z, _) = normalize_rows(z_raw)?;
        let (y, _) = normalize_rows(y_raw)?;
        Ok(EmbeddingBatch { z_vec: z, y_vec: y })
    }

    /// Wraps already-normalized embeddings, checking unit norms.
    pub fn from_normalized(z_vec: Array2<f64>, y_vec: Array2<f64>) -> Result<Self> {
        for (label, m) in [("z", &z_vec), ("y", &y_vec)] {
            for row in m.rows() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(EdgeError::Validation(format!(
                        "{label} row norm {n} is not unit"
                    )));
                }
            }
        }
        if z_vec.nrows() != y_vec.nrows() || z_vec.nrows() == 0 {
            return Err(EdgeError::Validation("bad embedding batch shape".into()));
        }
        Ok(EmbeddingBatch { z_vec, y_vec })
    }

    pub fn len(&self) -> usize {
        self.z_vec.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar components of the combined loss for one batch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_edge: f64,
    pub tau: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
}

/// Gradients w.r.t. the raw image and text embedding matrices.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_z: Array2<f64>,
    pub d_y: Array2<f64>,
}

impl LossGrads {
    fn zeros(n: usize, dz: usize, dy: usize) -> Self {
        LossGrads {
            d_z: Array2::zeros((n, dz)),
            d_y: Array2::zeros((n, dy)),
        }
    }

    fn scaled_add(&mut self, s: f64, other: &LossGrads) {
        self.d_z.scaled_add(s, &other.d_z);
        self.d_y.scaled_add(s, &other.d_y);
    }
}

fn normalize_rows(raw: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = raw.clone();
    let mut norms = Array1::zeros(raw.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(EdgeError::Validation(format!(
                "cannot normalize zero/non-finite row {i}"
            )));
        }
        row /= n;
        norms[i] = n;
    }
    Ok((out, norms))
}

/// Chain rule through u -> u/|u|: d_raw = (g - (g.z) z) / |u|.
fn backprop_normalize(
    unit: &Array2<f64>,
    norms: &Array1<f64>,
    grad_unit: &Array2<f64>,
) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for i in 0..unit.nrows() {
        let z = unit.row(i);
        let g = grad_unit.row(i);
        let dot = g.dot(&z);
        let mut row = out.row_mut(i);
        row.scaled_add(-dot, &z);
        row /= norms[i];
    }
    out
}

/// S[i][j] = (z_i . y_j) / tau.
pub fn similarity_matrix(batch: &EmbeddingBatch, tau: f64) -> Result<Array2<f64>> {
    if tau <= 0.0 {
        return Err(EdgeError::Validation(format!("tau must be positive, got {tau}")));
    }
    if batch.z_vec.ncols() != batch.y_vec.ncols() {
        return Err(EdgeError::Config(format!(
            "embedding dims differ: {} vs {}",
            batch.z_vec.ncols(),
            batch.y_vec.ncols()
        )));
    }
    Ok(batch.z_vec.dot(&batch.y_vec.t()) / tau)
}

/// Stable -log softmax of the diagonal, per row. Returns the mean.
fn cross_entropy_diag_rows(s: &Array2<f64>) -> f64 {
    let n = s.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[[i, i]];
    }
    total / n as f64
}

/// Bidirectional InfoNCE over the similarity matrix.
/// Returns (l_i2t, l_t2i, l_c) with l_c = lambda_c * l_i2t + l_t2i.
pub fn contrastive_loss(batch: &EmbeddingBatch, tau: f64, lambda_c: f64) -> Result<(f64, f64, f64)> {
    let s = similarity_matrix(batch, tau)?;
    let l_i2t = cross_entropy_diag_rows(&s);
    let l_t2i = cross_entropy_diag_rows(&s.t().to_owned());
    Ok((l_i2t, l_t2i, lambda_c * l_i2t + l_t2i))
}

/// Mean pairwise cosine similarity of the normalized concatenated
/// embeddings c_i = [z_i; y_i] / |[z_i; y_i]|, over unordered pairs.
pub fn diversity_loss(batch: &EmbeddingBatch) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(EdgeError::Validation(
            "diversity loss requires at least 2 pairs".into(),
        ));
    }
    let c = concat_normalized(batch);
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += c.row(i).dot(&c.row(j));
        }
    }
    Ok(2.0 * sum / (n as f64 * (n - 1) as f64))
}

fn concat_normalized(batch: &EmbeddingBatch) -> Array2<f64> {
    let n = batch.len();
    let dz = batch.z_vec.ncols();
    let dy = batch.y_vec.ncols();
    let mut c = Array2::zeros((n, dz + dy));
    for i in 0..n {
        let mut row = c.row_mut(i);
        for k in 0..dz {
            row[k] = batch.z_vec[[i, k]];
        }
        for k in 0..dy {
            row[dz + k] = batch.y_vec[[i, k]];
        }
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    c
}

/// Full loss breakdown: l_c = lambda_c*l_i2t + l_t2i, l_edge = l_c + lambda_d*l_d.
pub fn edge_loss(
    batch: &EmbeddingBatch,
    tau: f64,
    lambda_c: f64,
    lambda_d: f64,
) -> Result<LossBreakdown> {
    let (l_i2t, l_t2i, l_c) = contrastive_loss(batch, tau, lambda_c)?;
    let l_d = diversity_loss(batch)?;
    Ok(LossBreakdown {
        l_i2t,
        l_t2i,
        l_c,
        l_d,
        l_edge: l_c + lambda_d * l_d,
        tau,
        lambda_c,
        lambda_d,
    })
}

// ---------------------------------------------------------------------------
// Gradients w.r.t. raw (pre-normalization) embeddings.
// ---------------------------------------------------------------------------

struct NormalizedPair {
    z: Array2<f64>,
    y: Array2<f64>,
    zn: Array1<f64>,
    yn: Array1<f64>,
}

fn normalize_pair(z_raw: &Array2<f64>, y_raw: &Array2<f64>) -> Result<NormalizedPair> {
    if z_raw.nrows() != y_raw.nrows() || z_raw.nrows() == 0 {
        return Err(EdgeError::Validation("bad raw embedding shapes".into()));
    }
    let (z, zn) = normalize_rows(z_raw)?;
    let (y, yn) = normalize_rows(y_raw)?;
    Ok(NormalizedPair { z, y, zn, yn })
}

fn row_softmax(s: &Array2<f64>) -> Array2<f64> {
    let mut p = s.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// dL/dS for the row-direction cross entropy: (P - I)/N.
fn grad_s_rows(s: &Array2<f64>) -> Array2<f64> {
    let n = s.nrows();
    let mut g = row_softmax(s);
    for i in 0..n {
        g[[i, i]] -= 1.0;
    }
    g / n as f64
}

fn contrastive_parts(
    np: &NormalizedPair,
    tau: f64,
) -> Result<(f64, f64, LossGrads, LossGrads)> {
    if tau <= 0.0 {
        return Err(EdgeError::Validation(format!("tau must be positive, got {tau}")));
    }
    let s = np.z.dot(&np.y.t()) / tau;
    let l_i2t = cross_entropy_diag_rows(&s);
    let l_t2i = cross_entropy_diag_rows(&s.t().to_owned());

    // i2t: softmax over rows of S.
    let gs_i2t = grad_s_rows(&s);
    // t2i: softmax over rows of S^T; map back so both grads are w.r.t. S.
    let gs_t2i = grad_s_rows(&s.t().to_owned()).t().to_owned();

    let to_grads = |gs: &Array2<f64>| -> LossGrads {
        let gz_unit = gs.dot(&np.y) / tau;
        let gy_unit = gs.t().dot(&np.z) / tau;
        LossGrads {
            d_z: backprop_normalize(&np.z, &np.zn, &gz_unit),
            d_y: backprop_normalize(&np.y, &np.yn, &gy_unit),
        }
    };
    Ok((l_i2t, l_t2i, to_grads(&gs_i2t), to_grads(&gs_t2i)))
}

/// L_{I->T} value and gradient w.r.t. raw embeddings.
pub fn loss_i2t_grad(z_raw: &Array2<f64>, y_raw: &Array2<f64>, tau: f64) -> Result<(f64, LossGrads)> {
    let np = normalize_pair(z_raw, y_raw)?;
    let (l, _, g, _) = contrastive_parts(&np, tau)?;
    Ok((l, g))
}

/// L_{T->I} value and gradient w.r.t. raw embeddings.
pub fn loss_t2i_grad(z_raw: &Array2<f64>, y_raw: &Array2<f64>, tau: f64) -> Result<(f64, LossGrads)> {
    let np = normalize_pair(z_raw, y_raw)?;
    let (_, l, _, g) = contrastive_parts(&np, tau)?;
    Ok((l, g))
}

/// L_C = lambda_c * L_{I->T} + L_{T->I} with gradient.
pub fn loss_c_grad(
    z_raw: &Array2<f64>,
    y_raw: &Array2<f64>,
    tau: f64,
    lambda_c: f64,
) -> Result<(f64, LossGrads)> {
    let np = normalize_pair(z_raw, y_raw)?;
    let (l_i2t, l_t2i, g_i2t, g_t2i) = contrastive_parts(&np, tau)?;
    let mut g = LossGrads::zeros(z_raw.nrows(), z_raw.ncols(), y_raw.ncols());
    g.scaled_add(lambda_c, &g_i2t);
    g.scaled_add(1.0, &g_t2i);
    Ok((lambda_c * l_i2t + l_t2i, g))
}

/// Diversity loss value and gradient w.r.t. raw embeddings.
pub fn loss_d_grad(z_raw: &Array2<f64>, y_raw: &Array2<f64>) -> Result<(f64, LossGrads)> {
    let np = normalize_pair(z_raw, y_raw)?;
    let n = z_raw.nrows();
    if n < 2 {
        return Err(EdgeError::Validation(
            "diversity loss requires at least 2 pairs".into(),
        ));
    }
    let dz = z_raw.ncols();
    let dy = y_raw.ncols();
    let batch = EmbeddingBatch {
        z_vec: np.z.clone(),
        y_vec: np.y.clone(),
    };
    let c = concat_normalized(&batch);
    let l_d = {
        let mut sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                sum += c.row(i).dot(&c.row(j));
            }
        }
        2.0 * sum / (n as f64 * (n - 1) as f64)
    };

    // dL/dc_i = scale * sum_{j != i} c_j
    let scale = 2.0 / (n as f64 * (n - 1) as f64);
    let col_sum = c.sum_axis(Axis(0));
    let mut gc = Array2::zeros(c.raw_dim());
    for i in 0..n {
        let mut row = gc.row_mut(i);
        row.assign(&col_sum);
        row.scaled_add(-1.0, &c.row(i));
        row *= scale;
    }

    // chain through c = w/|w| where w = [z_i; y_i] (z,y unit rows).
    let mut gz_unit = Array2::zeros((n, dz));
    let mut gy_unit = Array2::zeros((n, dy));
    for i in 0..n {
        let wnorm = {
            // |w| over the unit z,y rows; kept general in case of future
            // non-unit inputs.
            let mut s = 0.0;
            for k in 0..dz {
                s += np.z[[i, k] ] * np.z[[i, k]];
            }
            for k in 0..dy {
                s += np.y[[i, k]] * np.y[[i, k]];
            }
            s.sqrt()
        };
        let ci = c.row(i);
        let gi = gc.row(i);
        let dot = gi.dot(&ci);
        for k in 0..(dz + dy) {
            let dw = (gi[k] - dot * ci[k]) / wnorm;
            if k < dz {
                gz_unit[[i, k]] = dw;
            } else {
                gy_unit[[i, k - dz]] = dw;
            }
        }
    }
    Ok((
        l_d,
        LossGrads {
            d_z: backprop_normalize(&np.z, &np.zn, &gz_unit),
            d_y: backprop_normalize(&np.y, &np.yn, &gy_unit),
        },
    ))
}

/// Combined loss with gradient; composes the contrastive and diversity parts.
pub fn edge_loss_grad(
    z_raw: &Array2<f64>,
    y_raw: &Array2<f64>,
    tau: f64,
    lambda_c: f64,
    lambda_d: f64,
) -> Result<(LossBreakdown, LossGrads)> {
    let np = normalize_pair(z_raw, y_raw)?;
    let (l_i2t, l_t2i, g_i2t, g_t2i) = contrastive_parts(&np, tau)?;
    let (l_d, g_d) = loss_d_grad(z_raw, y_raw)?;
    let l_c = lambda_c * l_i2t + l_t2i;
    let mut g = LossGrads::zeros(z_raw.nrows(), z_raw.ncols(), y_raw.ncols());
    g.scaled_add(lambda_c, &g_i2t);
    g.scaled_add(1.0, &g_t2i);
    g.scaled_add(lambda_d, &g_d);
    Ok((
        LossBreakdown {
            l_i2t,
            l_t2i,
            l_c,
            l_d,
            l_edge: l_c + lambda_d * l_d,
            tau,
            lambda_c,
            lambda_d,
        },
        g,
    ))
}
