//! Unchecked loss kernels. Each returns the loss value and the gradient with
//! respect to every matrix argument. Callers validate shapes and norms.

use crate::linalg::{dot, norm, squared_distance, Matrix};

pub(crate) struct Single {
    pub value: f64,
    pub grad: Matrix,
}

pub(crate) struct Pair {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Pulls a gradient taken w.r.t. the unit vector `u = z / |z|` back to `z`.
fn through_normalization(du: &[f64], u: &[f64], n: f64, out: &mut [f64]) {
    let proj = dot(u, du);
    for ((o, &d), &uk) in out.iter_mut().zip(du).zip(u) {
        *o = (d - uk * proj) / n;
    }
}

/// Decoupled NT-Xent with view-1 anchors and view-2 negatives.
pub(crate) fn nt_xent(z1: &Matrix, z2: &Matrix, tau: f64) -> Pair {
    let (b, d) = z1.shape();
    let n1: Vec<f64> = z1.iter_rows().map(norm).collect();
    let n2: Vec<f64> = z2.iter_rows().map(norm).collect();
    let u1 = z1.normalized_rows();
    let u2 = z2.normalized_rows();
    let sim = u1.matmul(&u2.transpose());

    let mut value = 0.0;
    // dL/dsim
    let mut g = Matrix::zeros(b, b);
    let mut logits = Vec::with_capacity(b - 1);
    for i in 0..b {
        logits.clear();
        logits.extend((0..b).filter(|&j| j != i).map(|j| sim[(i, j)] / tau));
        let lse = log_sum_exp(&logits);
        value += -sim[(i, i)] / tau + lse;
        g[(i, i)] = -1.0 / tau;
        for j in (0..b).filter(|&j| j != i) {
            g[(i, j)] = (sim[(i, j)] / tau - lse).exp() / tau;
        }
    }

    let du1 = g.matmul(&u2);
    let du2 = g.transpose().matmul(&u1);
    let mut grad_a = Matrix::zeros(b, d);
    let mut grad_b = Matrix::zeros(b, d);
    for i in 0..b {
        through_normalization(du1.row(i), u1.row(i), n1[i], grad_a.row_mut(i));
        through_normalization(du2.row(i), u2.row(i), n2[i], grad_b.row_mut(i));
    }
    Pair {
        value,
        grad_a,
        grad_b,
    }
}

/// Mean squared Euclidean distance between matching rows.
pub(crate) fn mean_squared_distance(a: &Matrix, b: &Matrix) -> Pair {
    let rows = a.rows() as f64;
    let mut value = 0.0;
    let mut grad_a = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        value += squared_distance(a.row(i), b.row(i));
        for ((g, &x), &y) in grad_a.row_mut(i).iter_mut().zip(a.row(i)).zip(b.row(i)) {
            *g = 2.0 * (x - y) / rows;
        }
    }
    let mut grad_b = grad_a.clone();
    grad_b.scale(-1.0);
    Pair {
        value: value / rows,
        grad_a,
        grad_b,
    }
}

/// Log of the mean Gaussian potential over ordered pairs `i != j` of one view.
pub(crate) fn uniformity_single(z: &Matrix, t: f64) -> Single {
    let (b, d) = z.shape();
    let mut logits = Matrix::zeros(b, b);
    let mut flat = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if i != j {
                let l = -t * squared_distance(z.row(i), z.row(j));
                logits[(i, j)] = l;
                flat.push(l);
            }
        }
    }
    let lse = log_sum_exp(&flat);
    let value = lse - ((b * (b - 1)) as f64).ln();

    let mut grad = Matrix::zeros(b, d);
    for i in 0..b {
        for j in (0..b).filter(|&j| j != i) {
            // the weight matrix is symmetric, so both (i, j) and (j, i) contribute equally
            let w = (logits[(i, j)] - lse).exp();
            let c = -4.0 * t * w;
            let (zi, zj) = (z.row(i), z.row(j));
            for ((gk, &a), &bb) in grad.row_mut(i).iter_mut().zip(zi).zip(zj) {
                *gk += c * (a - bb);
            }
        }
    }
    Single { value, grad }
}

fn column_means(z: &Matrix) -> Vec<f64> {
    let (b, d) = z.shape();
    let mut mean = vec![0.0; d];
    for r in z.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    mean
}

/// Hinge on the regularized per-dimension standard deviation (unbiased variance).
pub(crate) fn variance(z: &Matrix, target_std: f64, eps: f64) -> Single {
    let (b, d) = z.shape();
    let mean = column_means(z);
    let denom = (b - 1) as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(b, d);
    for j in 0..d {
        let var = (0..b).map(|i| (z[(i, j)] - mean[j]).powi(2)).sum::<f64>() / denom;
        let s = (var + eps).sqrt();
        let gap = target_std - s;
        if gap > 0.0 {
            value += gap;
            for i in 0..b {
                grad[(i, j)] = -(z[(i, j)] - mean[j]) / (d as f64 * s * denom);
            }
        }
    }
    Single {
        value: value / d as f64,
        grad,
    }
}

/// Sum of squared off-diagonal covariance entries divided by the dimension.
pub(crate) fn covariance(z: &Matrix) -> Single {
    let (b, d) = z.shape();
    let mean = column_means(z);
    let centered = Matrix::from_fn(b, d, |i, j| z[(i, j)] - mean[j]);
    let mut cov = centered.transpose().matmul(&centered);
    cov.scale(1.0 / (b - 1) as f64);

    let mut value = 0.0;
    // dL/dC, zero on the diagonal
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in (0..d).filter(|&j| j != i) {
            value += cov[(i, j)] * cov[(i, j)];
            g[(i, j)] = 2.0 * cov[(i, j)] / d as f64;
        }
    }
    // Rows of the centered matrix sum to zero, so no extra centering term.
    let mut grad = centered.matmul(&g);
    grad.scale(2.0 / (b - 1) as f64);
    Single {
        value: value / d as f64,
        grad,
    }
}
