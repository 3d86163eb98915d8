//! Scalar double-loop reference implementations of the loss values. They
//! share no code with the vectorized kernels.
#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s
}

pub fn nt_xent(z1: &Rows, z2: &Rows, tau: f64) -> f64 {
    let b = z1.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for j in 0..b {
            if j != i {
                denom += (cos(&z1[i], &z2[j]) / tau).exp();
            }
        }
        total += -((cos(&z1[i], &z2[i]) / tau).exp() / denom).ln();
    }
    total
}

pub fn alignment(z1: &Rows, z2: &Rows) -> f64 {
    let mut s = 0.0;
    for i in 0..z1.len() {
        s += sqdist(&z1[i], &z2[i]);
    }
    s / z1.len() as f64
}

pub fn uniformity_view(z: &Rows, t: f64) -> f64 {
    let b = z.len();
    let mut s = 0.0;
    let mut count = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                s += (-t * sqdist(&z[i], &z[j])).exp();
                count += 1.0;
            }
        }
    }
    (s / count).ln()
}

pub fn uniformity(z1: &Rows, z2: &Rows, t: f64) -> f64 {
    (uniformity_view(z1, t) + uniformity_view(z2, t)) / 2.0
}

pub fn variance(z: &Rows, target: f64, eps: f64) -> f64 {
    let b = z.len();
    let d = z[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..b {
            mean += z[i][j];
        }
        mean /= b as f64;
        let mut var = 0.0;
        for i in 0..b {
            var += (z[i][j] - mean) * (z[i][j] - mean);
        }
        var /= (b - 1) as f64;
        let s = (var + eps).sqrt();
        if target - s > 0.0 {
            total += target - s;
        }
    }
    total / d as f64
}

pub fn covariance(z: &Rows) -> f64 {
    let b = z.len();
    let d = z[0].len();
    let mut mean = vec![0.0; d];
    for i in 0..b {
        for j in 0..d {
            mean[j] += z[i][j] / b as f64;
        }
    }
    let mut total = 0.0;
    for p in 0..d {
        for q in 0..d {
            if p == q {
                continue;
            }
            let mut c = 0.0;
            for i in 0..b {
                c += (z[i][p] - mean[p]) * (z[i][q] - mean[q]);
            }
            c /= (b - 1) as f64;
            total += c * c;
        }
    }
    total / d as f64
}

pub fn byol(p: &Rows, zt: &Rows) -> f64 {
    alignment(p, zt)
}

/// EER by exhaustive threshold sweep: cuts below all scores, between every
/// pair of adjacent distinct scores and above all scores. A trial is accepted
/// when its score reaches the cut. The first cut where the false-negative rate
/// meets the false-positive rate is linearly interpolated with its
/// predecessor.
pub fn brute_force_eer(same: &[f64], diff: &[f64]) -> f64 {
    let mut all: Vec<f64> = same.iter().chain(diff).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut cuts = vec![all[0] - 1.0];
    for w in all.windows(2) {
        cuts.push(0.5 * (w[0] + w[1]));
    }
    cuts.push(all[all.len() - 1] + 1.0);
    let mut pts = Vec::new();
    for &t in &cuts {
        let mut fp = 0usize;
        for &d in diff {
            if d >= t {
                fp += 1;
            }
        }
        let mut fn_ = 0usize;
        for &s in same {
            if s < t {
                fn_ += 1;
            }
        }
        pts.push((fp as f64 / diff.len() as f64, fn_ as f64 / same.len() as f64));
    }
    for k in 0..pts.len() {
        let g = pts[k].0 - pts[k].1;
        if g <= 0.0 {
            if g == 0.0 {
                return pts[k].0;
            }
            let gp = pts[k - 1].0 - pts[k - 1].1;
            let w = gp / (gp - g);
            return pts[k - 1].0 + w * (pts[k].0 - pts[k - 1].0);
        }
    }
    unreachable!("the last cut rejects everything")
}

/// Silence trimming written out sample by sample: silent below 0.005,
/// voiced regions bridge gaps shorter than `bridge`, regions shorter than
/// `min_voiced` are zeroed, silent runs are cut to `max_silence`.
pub fn trim(x: &[f32], min_voiced: usize, max_silence: usize, bridge: usize) -> Vec<f32> {
    let mut y = x.to_vec();
    let regions = voiced_regions(&y, bridge);
    for (a, b) in regions {
        if b - a < min_voiced {
            for v in &mut y[a..b] {
                *v = 0.0;
            }
        }
    }
    let mut out = Vec::new();
    let mut silent_run = 0usize;
    for &v in &y {
        if v.abs() < 0.005 {
            silent_run += 1;
            if silent_run > max_silence {
                continue;
            }
        } else {
            silent_run = 0;
        }
        out.push(v);
    }
    out
}

/// `[start, end)` spans from the first to the last non-silent sample of each
/// voiced region.
pub fn voiced_regions(x: &[f32], bridge: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut last_loud: Option<usize> = None;
    for (i, v) in x.iter().enumerate() {
        if v.abs() < 0.005 {
            continue;
        }
        match last_loud {
            Some(l) if i - l - 1 < bridge => out.last_mut().unwrap().1 = i + 1,
            _ => out.push((i, i + 1)),
        }
        last_loud = Some(i);
    }
    out
}

/// Longest run of samples below 0.005.
pub fn longest_silent_run(x: &[f32]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for v in x {
        if v.abs() < 0.005 {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}
