//! Procedural vessel trees for desk-scale training and tests: branching cubic Bezier vessels
//! drawn darker red over a smooth textured background with mild vignetting. Masks are exact
//! because the image is painted from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::frame_seed;
use crate::raster::{BinaryMask, RasterImage};
use crate::skeleton::skeletonize;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RasterImage,
    pub mask: BinaryMask,
    /// Branching levels drawn (the trunk is level 1).
    pub levels: u32,
}

type P = (f64, f64);

fn bezier(p: [P; 4], t: f64) -> P {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

struct Vessel {
    ctrl: [P; 4],
    width: f64,
}

impl Vessel {
    fn new(rng: &mut ChaCha8Rng, start: P, angle: f64, length: f64, width: f64) -> Self {
        let dir = (angle.cos(), angle.sin());
        let normal = (-dir.1, dir.0);
        let bend = |rng: &mut ChaCha8Rng, f: f64| {
            let off = rng.random_range(-0.25..0.25) * length;
            (
                start.0 + dir.0 * length * f + normal.0 * off,
                start.1 + dir.1 * length * f + normal.1 * off,
            )
        };
        let c1 = bend(rng, 1.0 / 3.0);
        let c2 = bend(rng, 2.0 / 3.0);
        let end = (start.0 + dir.0 * length, start.1 + dir.1 * length);
        Self {
            ctrl: [start, c1, c2, end],
            width,
        }
    }

    fn length(&self) -> f64 {
        let mut len = 0.0;
        let mut prev = self.ctrl[0];
        for k in 1..=64 {
            let p = bezier(self.ctrl, k as f64 / 64.0);
            len += (p.0 - prev.0).hypot(p.1 - prev.1);
            prev = p;
        }
        len
    }

    fn tangent_angle(&self, t: f64) -> f64 {
        let a = bezier(self.ctrl, (t - 0.01).max(0.0));
        let b = bezier(self.ctrl, (t + 0.01).min(1.0));
        (b.1 - a.1).atan2(b.0 - a.0)
    }

    fn paint(&self, mask: &mut BinaryMask) {
        let r = self.width / 2.0;
        let steps = (self.length() * 4.0).ceil() as usize + 1;
        let (w, h) = mask.dims();
        for k in 0..=steps {
            let (cx, cy) = bezier(self.ctrl, k as f64 / steps as f64);
            let ri = r.ceil() as i64 + 1;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let d = (x as f64 - cx).hypot(y as f64 - cy);
                    // Width-1 vessels still mark the nearest pixel.
                    if d <= r.max(0.5) {
                        mask.set(x as usize, y as usize, true);
                    }
                }
            }
        }
    }
}

/// Width range (px) of vessels at each level.
fn width_for(level: u32, rng: &mut ChaCha8Rng) -> f64 {
    match level {
        1 => rng.random_range(3.0..=4.0),
        2 => rng.random_range(2.0..=3.0),
        _ => rng.random_range(1.0..=2.0),
    }
}

fn grow_tree(rng: &mut ChaCha8Rng, size: usize, levels: u32) -> Vec<Vessel> {
    let s = size as f64;
    // Trunk enters near one side and crosses most of the frame.
    let side = rng.random_range(0..4);
    let along = rng.random_range(0.25..0.75) * s;
    let margin = 0.08 * s;
    let (start, base_angle) = match side {
        0 => ((margin, along), 0.0),
        1 => ((s - margin, along), std::f64::consts::PI),
        2 => ((along, margin), std::f64::consts::FRAC_PI_2),
        _ => ((along, s - margin), -std::f64::consts::FRAC_PI_2),
    };
    let angle = base_angle + rng.random_range(-0.3..0.3);
    let trunk_len = rng.random_range(0.75..0.9) * s;
    let trunk_w = width_for(1, rng);
    let mut vessels = vec![Vessel::new(rng, start, angle, trunk_len, trunk_w)];
    let mut frontier = vec![0usize];
    for level in 2..=levels {
        let mut next = Vec::new();
        for &parent in &frontier {
            let kids = if level == 2 { rng.random_range(1..=2) } else { rng.random_range(0..=2) };
            for _ in 0..kids {
                let t = rng.random_range(0.3..0.8);
                let p = &vessels[parent];
                let (origin, tangent, plen, pw) = (bezier(p.ctrl, t), p.tangent_angle(t), p.length(), p.width);
                // Turn towards the frame centre so children stay in view.
                let to_c = (s / 2.0 - origin.1).atan2(s / 2.0 - origin.0);
                let sign = if (to_c - tangent).sin() >= 0.0 { 1.0 } else { -1.0 };
                let angle = tangent + sign * rng.random_range(0.6..1.2);
                let len = plen * rng.random_range(0.4..0.6);
                let width = width_for(level, rng).min(pw);
                let len = len.max(4.0 * pw + 6.0);
                vessels.push(Vessel::new(rng, origin, angle, len, width));
                next.push(vessels.len() - 1);
            }
        }
        frontier = next;
    }
    vessels
}

/// Smooth background texture from a few random low-frequency sinusoids.
fn background(rng: &mut ChaCha8Rng, size: usize) -> impl Fn(usize, usize) -> f64 {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let k = rng.random_range(1.0..4.0) * std::f64::consts::TAU / size as f64;
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            (k * th.cos(), k * th.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.01..0.04))
        })
        .collect();
    move |x, y| {
        waves
            .iter()
            .map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum()
    }
}

/// One sample from an explicit seed.
pub fn synthetic_tree(size: usize, seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rng.random_range(2..=3);
    // Redraw the rare tree whose branches fold back onto the trunk.
    let mut mask = BinaryMask::new(size, size);
    for _ in 0..32 {
        mask = BinaryMask::new(size, size);
        for v in &grow_tree(&mut rng, size, levels) {
            v.paint(&mut mask);
        }
        if skeletonize(&mask).junction_count() > 0 {
            break;
        }
    }
    let tex = background(&mut rng, size);
    let bg = [
        rng.random_range(0.72..0.82),
        rng.random_range(0.42..0.50),
        rng.random_range(0.38..0.46),
    ];
    let vessel_rgb = [
        rng.random_range(0.45..0.55),
        rng.random_range(0.14..0.22),
        rng.random_range(0.14..0.22),
    ];
    let vignette = rng.random_range(0.05..0.2);
    let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.015..0.015)).collect();
    let c = (size as f64 - 1.0) / 2.0;
    let rmax = c * std::f64::consts::SQRT_2;
    let image = RasterImage::from_fn(size, size, |x, y| {
        let rr = (x as f64 - c).hypot(y as f64 - c) / rmax.max(1.0);
        let shade = 1.0 - vignette * rr * rr;
        let base = if mask.get(x, y) { vessel_rgb } else { bg };
        let t = tex(x, y) + noise[y * size + x];
        base.map(|v| ((v + t) * shade) as f32)
    });
    SyntheticSample { image, mask, levels }
}

/// `n` samples of `size` x `size`, deterministic per seed and independent of thread count.
pub fn make_synthetic_dataset(n: usize, size: usize, seed: u64) -> Vec<SyntheticSample> {
    (0..n)
        .into_par_iter()
        .map(|i| synthetic_tree(size, frame_seed(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        assert!(make_synthetic_dataset(0, 64, 1).is_empty());
        let a = make_synthetic_dataset(4, 64, 11);
        let b = make_synthetic_dataset(4, 64, 11);
        assert_eq!(a, b);
        assert_ne!(a[0].mask, make_synthetic_dataset(1, 64, 12)[0].mask);
    }

    #[test]
    fn trees_have_junctions() {
        for s in make_synthetic_dataset(200, 64, 5) {
            assert!(s.levels >= 2);
            let g = skeletonize(&s.mask);
            assert!(g.junction_count() >= 1, "no junction");
        }
    }

    #[test]
    fn vessels_are_darker_red() {
        let s = synthetic_tree(64, 3);
        let (mut rv, mut nv, mut rb, mut nb) = (0.0, 0, 0.0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let l = s.image.luma(x, y) as f64;
                if s.mask.get(x, y) {
                    rv += l;
                    nv += 1;
                } else {
                    rb += l;
                    nb += 1;
                }
            }
        }
        let ratio = 100.0 * nv as f64 / 4096.0;
        assert!((2.0..40.0).contains(&ratio), "vessel ratio {ratio}");
        assert!(rv / nv as f64 + 0.1 < rb / nb as f64);
    }
}
