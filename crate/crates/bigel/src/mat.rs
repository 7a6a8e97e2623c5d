//! Dense row-major matrices and the handful of operations the model needs.
//!
//! Everything is f64. Row-level work is parallelized with rayon; each output
//! row is filled by exactly one thread in a fixed order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    /// Identity-like square matrix (used in tests and degenerate transforms).
    pub fn eye(n: usize) -> Self {
        Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self += other
    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, scale: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * *b;
        }
    }

    /// Element-wise sum of two matrices.
    pub fn add(&self, other: &Mat) -> Mat {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Frobenius inner product ⟨self, other⟩.
    pub fn frob_dot(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// out[r][j] = Σ_c w[j][c]·x[r][c] + b[j]  (per-row affine map y = W·x + b).
pub fn apply_affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let d_out = w.rows();
    assert_eq!(w.cols(), x.cols());
    assert_eq!(b.len(), d_out);
    let mut out = Mat::zeros(x.rows(), d_out);
    out.data
        .par_chunks_mut(d_out)
        .zip(x.data.par_chunks(x.cols))
        .for_each(|(out_row, x_row)| {
            for j in 0..d_out {
                out_row[j] = dot(w.row(j), x_row) + b[j];
            }
        });
    out
}

/// Cotangent of the affine input: out[r][c] = Σ_j d[r][j]·w[j][c].
pub fn affine_input_grad(d_out: &Mat, w: &Mat) -> Mat {
    assert_eq!(d_out.cols(), w.rows());
    let cols = w.cols();
    let mut out = Mat::zeros(d_out.rows(), cols);
    out.data
        .par_chunks_mut(cols)
        .zip(d_out.data.par_chunks(d_out.cols))
        .for_each(|(out_row, d_row)| {
            for (j, dj) in d_row.iter().enumerate() {
                let w_row = w.row(j);
                for c in 0..cols {
                    out_row[c] += dj * w_row[c];
                }
            }
        });
    out
}

/// Weight cotangent g += dᵀ·x: g[j][c] += Σ_r d[r][j]·x[r][c].
pub fn accumulate_weight_grad(g: &mut Mat, d_out: &Mat, x: &Mat) {
    assert_eq!(d_out.rows(), x.rows());
    assert_eq!(g.rows(), d_out.cols());
    assert_eq!(g.cols(), x.cols());
    let cols = g.cols();
    let d_cols = d_out.cols();
    g.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(j, g_row)| {
            for r in 0..x.rows() {
                let dj = d_out.data[r * d_cols + j];
                if dj != 0.0 {
                    let x_row = x.row(r);
                    for c in 0..cols {
                        g_row[c] += dj * x_row[c];
                    }
                }
            }
        });
}

/// Bias cotangent g += Σ_r d[r][·].
pub fn accumulate_bias_grad(g: &mut [f64], d_out: &Mat) {
    assert_eq!(g.len(), d_out.cols());
    for r in 0..d_out.rows() {
        for (gj, dj) in g.iter_mut().zip(d_out.row(r).iter()) {
            *gj += dj;
        }
    }
}

/// Row-wise L2 normalization x / max(‖x‖, eps). Returns the normalized matrix
/// and the raw (unguarded) row norms, which the backward pass needs.
pub fn normalize_rows(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = vec![0.0; x.rows()];
    out.data
        .par_chunks_mut(x.cols)
        .zip(norms.par_iter_mut())
        .for_each(|(row, n)| {
            *n = l2_norm(row);
            let denom = n.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
        });
    (out, norms)
}

/// Backward of `normalize_rows`. For rows with ‖x‖ ≥ eps the exact Jacobian
/// (I/‖x‖ − x·xᵀ/‖x‖³) is applied; below eps the guard is a constant scale.
pub fn normalize_rows_backward(x: &Mat, norms: &[f64], d_out: &Mat, eps: f64) -> Mat {
    let cols = x.cols();
    let mut d_x = Mat::zeros(x.rows(), cols);
    d_x.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, dx_row)| {
            let n = norms[r];
            let x_row = x.row(r);
            let d_row = d_out.row(r);
            if n >= eps {
                let y_dot_d = dot(x_row, d_row) / (n * n);
                for c in 0..cols {
                    dx_row[c] = (d_row[c] - x_row[c] * y_dot_d) / n;
                }
            } else {
                for c in 0..cols {
                    dx_row[c] = d_row[c] / eps;
                }
            }
        });
    d_x
}
