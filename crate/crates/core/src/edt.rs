//! Exact Euclidean distance transform (separable lower-envelope of parabolas).

use crate::raster::BinaryMask;

const INF: f64 = 1e20;

/// 1-D squared distance transform of a sampled function.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared distance from each pixel to the nearest background pixel (0 on background).
/// Pixels outside the frame are not treated as background; a mask with no background
/// yields `f64::INFINITY` everywhere.
pub fn squared_distance_to_background(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = mask.dims();
    let mut grid: Vec<f64> = mask.data().iter().map(|&v| if v { INF } else { 0.0 }).collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.into_iter()
        .map(|d| if d >= INF / 2.0 { f64::INFINITY } else { d })
        .collect()
}

pub fn distance_to_background(mask: &BinaryMask) -> Vec<f64> {
    squared_distance_to_background(mask)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}
