#![allow(dead_code)]

pub mod reference;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vocalid_core::Matrix;

/// Seeded batch of Gaussian rows, unit-normalized when `unit` is set.
pub fn random_batch(rows: usize, cols: usize, seed: u64, unit: bool) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    if unit {
        m.normalized_rows()
    } else {
        m
    }
}

pub fn to_rows(m: &Matrix) -> reference::Rows {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn random_rotation(dim: usize, seed: u64) -> Matrix {
    let g = random_batch(dim, dim, seed, false);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in g.iter_rows() {
        let mut v = r.to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    Matrix::from_rows(&q)
}
