//! Differentiable training losses with analytic gradients with respect to the prediction.
//!
//! Predictions and targets are flat row-major `f64` slices. Every loss returns its value and
//! `d loss / d p` for each pixel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability clamp used before logarithms.
pub const EPS: f64 = 1e-6;
/// Additive smoothing of the soft centerline ratios.
pub const CLDICE_SMOOTH: f64 = 1.0;
pub const DEFAULT_SKELETON_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }

    /// Accumulate `w * other`.
    fn add_scaled(&mut self, w: f64, other: &LossGrad) {
        self.value += w * other.value;
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += w * o;
        }
    }
}

/// Mean binary cross-entropy. The gradient is taken at the clamped probability so saturated
/// predictions still receive a signal.
pub fn bce(p: &[f64], y: &[f64]) -> LossGrad {
    let n = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let q = p.clamp(EPS, 1.0 - EPS);
            value -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            (q - y) / (q * (1.0 - q)) / n
        })
        .collect();
    LossGrad {
        value: value / n,
        grad,
    }
}

/// Soft Tversky loss `1 - TP / (TP + alpha*FP + beta*FN)`; 0 when the denominator vanishes.
pub fn tversky(p: &[f64], y: &[f64], alpha: f64, beta: f64) -> LossGrad {
    let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
    for (&p, &y) in p.iter().zip(y) {
        tp += p * y;
        fp += p * (1.0 - y);
        fnn += (1.0 - p) * y;
    }
    let d = tp + alpha * fp + beta * fnn;
    if d == 0.0 {
        return LossGrad::zero(p.len());
    }
    let grad = y
        .iter()
        .map(|&y| {
            let dd = y + alpha * (1.0 - y) - beta * y;
            -(y * d - tp * dd) / (d * d)
        })
        .collect();
    LossGrad {
        value: 1.0 - tp / d,
        grad,
    }
}

/// Soft Dice loss `1 - 2*sum(p*y) / (sum(p) + sum(y))`; 0 when both sums vanish.
pub fn dice(p: &[f64], y: &[f64]) -> LossGrad {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&p, &y) in p.iter().zip(y) {
        inter += p * y;
        sp += p;
        sy += y;
    }
    let d = sp + sy;
    if d == 0.0 {
        return LossGrad::zero(p.len());
    }
    let grad = y.iter().map(|&y| -2.0 * (y * d - inter) / (d * d)).collect();
    LossGrad {
        value: 1.0 - 2.0 * inter / d,
        grad,
    }
}

/// Pooling with recorded winner index per output pixel.
fn pool(x: &[f64], w: usize, h: usize, offsets: &[(i64, i64)], take_max: bool) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; x.len()];
    let mut arg = vec![0usize; x.len()];
    for cy in 0..h {
        for cx in 0..w {
            let i = cy * w + cx;
            let (mut best, mut bi) = (x[i], i);
            for &(dx, dy) in offsets {
                let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if (take_max && x[j] > best) || (!take_max && x[j] < best) {
                    best = x[j];
                    bi = j;
                }
            }
            out[i] = best;
            arg[i] = bi;
        }
    }
    (out, arg)
}

const CROSS: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
const BOX: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn scatter(g: &[f64], arg: &[usize], into: &mut [f64]) {
    for (i, &a) in arg.iter().enumerate() {
        into[a] += g[i];
    }
}

struct OpenStep {
    erode_arg: Vec<usize>,
    dilate_arg: Vec<usize>,
    /// Positive part mask of `img - open(img)`.
    active: Vec<bool>,
    delta: Vec<f64>,
}

fn open_step(img: &[f64], w: usize, h: usize) -> OpenStep {
    let (e, erode_arg) = pool(img, w, h, &CROSS, false);
    let (o, dilate_arg) = pool(&e, w, h, &BOX, true);
    let mut active = vec![false; img.len()];
    let delta = img
        .iter()
        .zip(&o)
        .enumerate()
        .map(|(i, (&a, &b))| {
            active[i] = a - b > 0.0;
            (a - b).max(0.0)
        })
        .collect();
    OpenStep {
        erode_arg,
        dilate_arg,
        active,
        delta,
    }
}

/// Iterative soft skeleton built from cross-shaped min-pool erosion and 3x3 max-pool
/// dilation, with everything needed for the reverse pass.
pub struct SoftSkeleton {
    pub skel: Vec<f64>,
    w: usize,
    h: usize,
    /// Erosion winners for img_j = erode(img_{j-1}), j >= 1.
    chain_args: Vec<Vec<usize>>,
    steps: Vec<OpenStep>,
    /// Skeleton before each update j >= 1.
    prev_skel: Vec<Vec<f64>>,
}

impl SoftSkeleton {
    pub fn forward(x: &[f64], w: usize, h: usize, iters: usize) -> Self {
        let mut img = x.to_vec();
        let first = open_step(&img, w, h);
        let mut skel = first.delta.clone();
        let mut steps = vec![first];
        let mut chain_args = Vec::with_capacity(iters);
        let mut prev_skel = Vec::with_capacity(iters);
        for _ in 0..iters {
            let (next, arg) = pool(&img, w, h, &CROSS, false);
            img = next;
            chain_args.push(arg);
            let st = open_step(&img, w, h);
            prev_skel.push(skel.clone());
            for (s, &d) in skel.iter_mut().zip(&st.delta) {
                *s += (d - *s * d).max(0.0);
            }
            steps.push(st);
        }
        Self {
            skel,
            w,
            h,
            chain_args,
            steps,
            prev_skel,
        }
    }

    /// Gradient with respect to the input given the gradient with respect to `skel`.
    pub fn backward(&self, g_skel: &[f64]) -> Vec<f64> {
        let n = self.w * self.h;
        let mut g = g_skel.to_vec();
        // Gradient arriving at img_j from img_{j+1} = erode(img_j).
        let mut carry = vec![0.0; n];
        for j in (0..self.steps.len()).rev() {
            let st = &self.steps[j];
            let mut g_delta = vec![0.0; n];
            if j == 0 {
                g_delta.copy_from_slice(&g);
            } else {
                let prev = &self.prev_skel[j - 1];
                for i in 0..n {
                    let d = st.delta[i];
                    let s = prev[i];
                    if d - s * d > 0.0 {
                        g_delta[i] = g[i] * (1.0 - s);
                        g[i] *= 1.0 - d;
                    }
                }
            }
            let mut g_img = std::mem::take(&mut carry);
            let mut g_open = vec![0.0; n];
            for i in 0..n {
                if st.active[i] {
                    g_img[i] += g_delta[i];
                    g_open[i] = -g_delta[i];
                }
            }
            let mut g_eroded = vec![0.0; n];
            scatter(&g_open, &st.dilate_arg, &mut g_eroded);
            scatter(&g_eroded, &st.erode_arg, &mut g_img);
            if j == 0 {
                return g_img;
            }
            carry = vec![0.0; n];
            scatter(&g_img, &self.chain_args[j - 1], &mut carry);
        }
        unreachable!("at least one step is recorded")
    }
}

/// Soft centerline Dice loss `1 - 2*Tprec*Tsens / (Tprec + Tsens)` on a `w` x `h` grid.
/// With an empty target the loss is 1 for a nonempty prediction and 0 for an empty one.
pub fn soft_cldice(p: &[f64], y: &[f64], w: usize, h: usize, iters: usize) -> LossGrad {
    if y.iter().all(|&v| v == 0.0) {
        let nonempty = p.iter().any(|&v| v > 0.0);
        return LossGrad {
            value: if nonempty { 1.0 } else { 0.0 },
            grad: vec![0.0; p.len()],
        };
    }
    let sp = SoftSkeleton::forward(p, w, h, iters);
    let sy = SoftSkeleton::forward(y, w, h, iters).skel;
    let s = CLDICE_SMOOTH;
    let (mut num_a, mut den_a, mut num_b, mut den_b) = (s, s, s, s);
    for i in 0..p.len() {
        num_a += sp.skel[i] * y[i];
        den_a += sp.skel[i];
        num_b += sy[i] * p[i];
        den_b += sy[i];
    }
    let (a, b) = (num_a / den_a, num_b / den_b);
    let value = 1.0 - 2.0 * a * b / (a + b);
    let dl_da = -2.0 * b * b / ((a + b) * (a + b));
    let dl_db = -2.0 * a * a / ((a + b) * (a + b));
    let g_skel: Vec<f64> = y
        .iter()
        .map(|&yi| dl_da * (yi * den_a - num_a) / (den_a * den_a))
        .collect();
    let mut grad = sp.backward(&g_skel);
    for (g, &syi) in grad.iter_mut().zip(&sy) {
        *g += dl_db * syi / den_b;
    }
    LossGrad { value, grad }
}

/// Mean squared error over pixels where `roi` is set; `recon` and `target` are interleaved
/// `channels`-per-pixel buffers.
pub fn masked_mse(recon: &[f64], target: &[f64], roi: &[bool], channels: usize) -> LossGrad {
    let n = roi.iter().filter(|&&r| r).count() * channels;
    let mut grad = vec![0.0; recon.len()];
    if n == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let mut value = 0.0;
    for (i, (&r, &t)) in recon.iter().zip(target).enumerate() {
        if roi[i / channels] {
            let d = r - t;
            value += d * d;
            grad[i] = 2.0 * d / n as f64;
        }
    }
    LossGrad {
        value: value / n as f64,
        grad,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("loss configuration: {0}")]
pub struct LossConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Attention,
    Refine,
}

/// Weights of the composite segmentation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cldice: f64,
    pub tversky: f64,
    pub alpha: f64,
    pub beta: f64,
    pub skeleton_iters: usize,
}

impl LossWeights {
    /// Backbone stage: BCE 1.0, Dice 0.2, clDice 0.4, Tversky 1.5 with alpha 0.2, beta 0.8.
    pub fn stage2() -> Self {
        Self {
            bce: 1.0,
            dice: 0.2,
            cldice: 0.4,
            tversky: 1.5,
            alpha: 0.2,
            beta: 0.8,
            skeleton_iters: DEFAULT_SKELETON_ITERS,
        }
    }

    /// Refinement stage: clDice 1.5, Tversky 2.0 with alpha 0.1, beta 0.9.
    pub fn stage3() -> Self {
        Self {
            bce: 0.0,
            dice: 0.0,
            cldice: 1.5,
            tversky: 2.0,
            alpha: 0.1,
            beta: 0.9,
            skeleton_iters: DEFAULT_SKELETON_ITERS,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<(), LossConfigError> {
        let all = [self.bce, self.dice, self.cldice, self.tversky, self.alpha, self.beta];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossConfigError("weights must be finite and non-negative".into()));
        }
        if self.alpha > 1.0 || self.beta > 1.0 || (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(LossConfigError(format!(
                "tversky alpha {} and beta {} must lie in [0,1] and sum to 1",
                self.alpha, self.beta
            )));
        }
        if stage == Stage::Refine && (self.bce != 0.0 || self.dice != 0.0) {
            return Err(LossConfigError(
                "refinement loss takes only clDice and Tversky terms".into(),
            ));
        }
        Ok(())
    }

    /// Compact echo such as `T:1.5, cl:0.4, D:0.2, BCE:1.0`.
    pub fn echo(&self) -> String {
        let mut parts = vec![format!("T:{:.1}", self.tversky), format!("cl:{:.1}", self.cldice)];
        if self.dice != 0.0 {
            parts.push(format!("D:{:.1}", self.dice));
        }
        if self.bce != 0.0 {
            parts.push(format!("BCE:{:.1}", self.bce));
        }
        parts.join(", ")
    }
}

/// Weighted sum of BCE, Dice, clDice and Tversky terms; zero-weight terms are skipped.
pub fn composite(p: &[f64], y: &[f64], w: usize, h: usize, wts: &LossWeights) -> LossGrad {
    let mut out = LossGrad::zero(p.len());
    if wts.bce != 0.0 {
        out.add_scaled(wts.bce, &bce(p, y));
    }
    if wts.dice != 0.0 {
        out.add_scaled(wts.dice, &dice(p, y));
    }
    if wts.cldice != 0.0 {
        out.add_scaled(wts.cldice, &soft_cldice(p, y, w, h, wts.skeleton_iters));
    }
    if wts.tversky != 0.0 {
        out.add_scaled(wts.tversky, &tversky(p, y, wts.alpha, wts.beta));
    }
    out
}

pub fn stage2_loss(p: &[f64], mstar: &[f64], w: usize, h: usize, wts: &LossWeights) -> Result<LossGrad, LossConfigError> {
    wts.validate(Stage::Attention)?;
    Ok(composite(p, mstar, w, h, wts))
}

pub fn stage3_loss(p: &[f64], g: &[f64], w: usize, h: usize, wts: &LossWeights) -> Result<LossGrad, LossConfigError> {
    wts.validate(Stage::Refine)?;
    Ok(composite(p, g, w, h, wts))
}
