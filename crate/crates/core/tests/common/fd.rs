use report_grounding::BoundingBox;

use super::{random_box, rng};

pub const STEP: f64 = 1e-5;
pub const POINTS: usize = 100;

pub fn norm(v: &[f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` over the whole 4-vector.
pub fn vec_rel_err(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let diff: [f64; 4] = std::array::from_fn(|i| a[i] - b[i]);
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn central_diff(f: impl Fn(&[f64; 4]) -> f64, at: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|k| {
        let mut hi = *at;
        let mut lo = *at;
        hi[k] += STEP;
        lo[k] -= STEP;
        (f(&hi) - f(&lo)) / (2.0 * STEP)
    })
}

pub fn from_array(v: &[f64; 4]) -> BoundingBox {
    BoundingBox::normalized(v[0], v[1], v[2], v[3]).unwrap()
}

/// Every pair of edges that a min/max/overlap compares is at least `gap`
/// apart, so a central difference never straddles a kink.
pub fn away_from_kinks(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    let xs = [
        (a.x, b.x),
        (a.right(), b.right()),
        (a.x, b.right()),
        (a.right(), b.x),
    ];
    let ys = [
        (a.y, b.y),
        (a.bottom(), b.bottom()),
        (a.y, b.bottom()),
        (a.bottom(), b.y),
    ];
    xs.iter().chain(ys.iter()).all(|(p, q)| (p - q).abs() > gap)
}

/// Random pairs that overlap often enough to exercise every branch.
pub fn sample_pairs(seed: u64) -> Vec<(BoundingBox, BoundingBox)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < POINTS {
        let a = random_box(&mut r, 0.05);
        let b = random_box(&mut r, 0.05);
        // keep the perturbed box valid
        let inside = a.x > 1e-3 && a.y > 1e-3 && a.right() < 1.0 - 1e-3 && a.bottom() < 1.0 - 1e-3;
        if inside && away_from_kinks(&a, &b, 1e-3) {
            out.push((a, b));
        }
    }
    out
}
