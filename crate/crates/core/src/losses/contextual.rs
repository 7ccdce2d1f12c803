//! Contextual similarity between two sets of feature vectors.
//!
//! For generated features `x_i` and target features `y_j`, both centered by
//! the target mean and scaled to unit length:
//!
//! ```text
//! d_ij  = 1 - cos(x_i, y_j)
//! d~_ij = d_ij / (min_k d_ik + eps)
//! w_ij  = exp((1 - d~_ij) / h)
//! CX_ij = w_ij / sum_k w_ik
//! CX    = (1/m) sum_j max_i CX_ij
//! ```
//!
//! The loss is `-ln CX`. `CX` lies in `(0, 1]`, so the loss is non-negative.

/// Smooths the row norm so all-equal feature sets stay finite.
const NORM_FLOOR: f64 = 1e-12;

/// Parameters of the similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CxParams {
    pub bandwidth: f64,
    pub epsilon: f64,
}

struct Rows<'a> {
    data: &'a [f64],
    count: usize,
    dim: usize,
    /// Distance between consecutive features of one row.
    stride_feat: usize,
    /// Distance between consecutive rows.
    stride_row: usize,
}

impl Rows<'_> {
    #[inline]
    fn at(&self, row: usize, feat: usize) -> f64 {
        self.data[row * self.stride_row + feat * self.stride_feat]
    }
}

/// Internal state of one forward evaluation, kept for the adjoint.
struct Forward {
    x_hat: Vec<f64>,
    x_norm: Vec<f64>,
    y_hat: Vec<f64>,
    dist: Vec<f64>,
    row_min: Vec<f64>,
    row_argmin: Vec<usize>,
    cx: Vec<f64>,
    col_argmax: Vec<usize>,
    value: f64,
}

fn center_normalize(rows: &Rows<'_>, mean: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows.count * rows.dim];
    let mut norms = vec![0.0; rows.count];
    for r in 0..rows.count {
        let dst = &mut out[r * rows.dim..(r + 1) * rows.dim];
        let mut sq = 0.0;
        for (f, v) in dst.iter_mut().enumerate() {
            *v = rows.at(r, f) - mean[f];
            sq += *v * *v;
        }
        let norm = (sq + NORM_FLOOR).sqrt();
        for v in dst.iter_mut() {
            *v /= norm;
        }
        norms[r] = norm;
    }
    (out, norms)
}

fn forward(x: &Rows<'_>, y: &Rows<'_>, p: CxParams) -> Forward {
    let (n, m, dim) = (x.count, y.count, x.dim);
    let mut mean = vec![0.0; dim];
    for r in 0..m {
        for (f, acc) in mean.iter_mut().enumerate() {
            *acc += y.at(r, f);
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let (x_hat, x_norm) = center_normalize(x, &mean);
    let (y_hat, _) = center_normalize(y, &mean);

    let mut dist = vec![0.0; n * m];
    let mut row_min = vec![f64::INFINITY; n];
    let mut row_argmin = vec![0; n];
    for i in 0..n {
        let xi = &x_hat[i * dim..(i + 1) * dim];
        for j in 0..m {
            let yj = &y_hat[j * dim..(j + 1) * dim];
            let d = 1.0 - xi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>();
            dist[i * m + j] = d;
            if d < row_min[i] {
                row_min[i] = d;
                row_argmin[i] = j;
            }
        }
    }

    let mut cx = vec![0.0; n * m];
    for i in 0..n {
        let denom = row_min[i] + p.epsilon;
        let row = &mut cx[i * m..(i + 1) * m];
        let mut zmax = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (1.0 - dist[i * m + j] / denom) / p.bandwidth;
            zmax = zmax.max(*v);
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - zmax).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let mut col_argmax = vec![0; m];
    let mut value = 0.0;
    for (j, best) in col_argmax.iter_mut().enumerate() {
        let mut top = f64::NEG_INFINITY;
        for i in 0..n {
            if cx[i * m + j] > top {
                top = cx[i * m + j];
                *best = i;
            }
        }
        value += top;
    }
    value /= m as f64;

    Forward {
        x_hat,
        x_norm,
        y_hat,
        dist,
        row_min,
        row_argmin,
        cx,
        col_argmax,
        value,
    }
}

/// Layout of a feature map `[N, D, Hp, Wp]`: every spatial position is one
/// row of `D` features.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FeatureLayout {
    pub batch: usize,
    pub dim: usize,
    pub positions: usize,
}

impl FeatureLayout {
    fn rows<'a>(&self, data: &'a [f64], sample: usize) -> Rows<'a> {
        let per = self.dim * self.positions;
        Rows {
            data: &data[sample * per..(sample + 1) * per],
            count: self.positions,
            dim: self.dim,
            stride_feat: self.positions,
            stride_row: 1,
        }
    }
}

/// Aggregate similarity `CX` for each sample of the batch.
pub(crate) fn similarity(layout: FeatureLayout, x: &[f64], y: &[f64], p: CxParams) -> Vec<f64> {
    (0..layout.batch)
        .map(|s| forward(&layout.rows(x, s), &layout.rows(y, s), p).value)
        .collect()
}

/// Batch mean of `-ln CX`.
pub(crate) fn loss(layout: FeatureLayout, x: &[f64], y: &[f64], p: CxParams) -> f64 {
    let cx = similarity(layout, x, y, p);
    cx.iter().map(|v| -v.ln()).sum::<f64>() / layout.batch as f64
}

/// Gradient of [`loss`] with respect to `x`, scaled by the upstream `g`.
pub(crate) fn loss_grad(layout: FeatureLayout, x: &[f64], y: &[f64], p: CxParams, g: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let per = layout.dim * layout.positions;
    for s in 0..layout.batch {
        let xr = layout.rows(x, s);
        let f = forward(&xr, &layout.rows(y, s), p);
        let (n, m, dim) = (xr.count, layout.positions, layout.dim);

        // d(-ln CX)/dCX_ij is nonzero only at each column's argmax.
        let scale = -g / (f.value * m as f64 * layout.batch as f64);
        let mut g_cx = vec![0.0; n * m];
        for (j, &i) in f.col_argmax.iter().enumerate() {
            g_cx[i * m + j] = scale;
        }

        let mut g_dist = vec![0.0; n * m];
        for i in 0..n {
            let row = i * m..(i + 1) * m;
            let cx = &f.cx[row.clone()];
            let gc = &g_cx[row];
            let inner: f64 = cx.iter().zip(gc).map(|(a, b)| a * b).sum();
            let denom = f.row_min[i] + p.epsilon;
            let mut g_min = 0.0;
            for j in 0..m {
                // softmax adjoint, then z = (1 - d~) / h
                let g_z = cx[j] * (gc[j] - inner);
                let g_dn = -g_z / p.bandwidth;
                g_dist[i * m + j] += g_dn / denom;
                g_min -= g_dn * f.dist[i * m + j] / (denom * denom);
            }
            g_dist[i * m + f.row_argmin[i]] += g_min;
        }

        let out = &mut grad[s * per..(s + 1) * per];
        for i in 0..n {
            let mut g_xhat = vec![0.0; dim];
            for j in 0..m {
                let gs = -g_dist[i * m + j];
                if gs != 0.0 {
                    let yj = &f.y_hat[j * dim..(j + 1) * dim];
                    for (acc, v) in g_xhat.iter_mut().zip(yj) {
                        *acc += gs * v;
                    }
                }
            }
            let xh = &f.x_hat[i * dim..(i + 1) * dim];
            let proj: f64 = xh.iter().zip(&g_xhat).map(|(a, b)| a * b).sum();
            for feat in 0..dim {
                out[feat * layout.positions + i] = (g_xhat[feat] - xh[feat] * proj) / f.x_norm[i];
            }
        }
    }
    grad
}
