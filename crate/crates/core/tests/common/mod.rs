//! Oracles shared by the integration tests. Each is written without calling
//! the library routine it checks.
#![allow(dead_code)]

use radfield::field::PAIRS;
use radfield::FeatureField;

/// Full `res³ × channels` tensor of one (plane, line) pair, indexed
/// `[x][y][z][c]` in grid nodes.
pub fn materialize(plane: &[f64], line: &[f64], res: usize, c: usize, pair: usize) -> Vec<f64> {
    let ([a, b], l) = PAIRS[pair];
    let mut out = vec![0.0; res * res * res * c];
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                let idx = [x, y, z];
                let (i, j, k) = (idx[a], idx[b], idx[l]);
                for ch in 0..c {
                    out[((x * res + y) * res + z) * c + ch] = plane[(j * res + i) * c + ch] * line[k * c + ch];
                }
            }
        }
    }
    out
}

pub fn trilinear(volume: &[f64], res: usize, c: usize, ch: usize, u: [f64; 3]) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for k in 0..3 {
        let p = u[k] * (res - 1) as f64;
        let i = (p.floor() as usize).min(res - 2);
        base[k] = i;
        frac[k] = p - i as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        for k in 0..3 {
            w *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
        }
        let (x, y, z) = (base[0] + off[0], base[1] + off[1], base[2] + off[2]);
        acc += w * volume[((x * res + y) * res + z) * c + ch];
    }
    acc
}

/// Appearance features at `x` read off the materialized volumes.
pub fn dense_oracle(field: &FeatureField<f64>, x: [f64; 3]) -> Vec<f64> {
    let cfg = &field.config;
    let u: [f64; 3] =
        std::array::from_fn(|k| ((x[k] - cfg.bbox_min[k]) / (cfg.bbox_max[k] - cfg.bbox_min[k])).clamp(0.0, 1.0));
    let c = cfg.channels;
    let mut out = Vec::new();
    for level in &field.levels {
        for p in 0..3 {
            let vol = materialize(&level.planes[p], &level.lines[p], level.res, c, p);
            for ch in 0..c {
                out.push(trilinear(&vol, level.res, c, ch, u));
            }
        }
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Running product of per-sample survival, written without exponent sums.
pub fn product_oracle(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let mut w = Vec::new();
    for (s, d) in sigma.iter().zip(delta) {
        let survive = (-s * d).exp();
        w.push(trans * (1.0 - survive));
        trans *= survive;
    }
    (w, trans)
}
