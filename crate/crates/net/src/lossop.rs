//! Scalar losses from `hacseg_core::losses` exposed to autodiff as custom ops.

use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use hacseg_core::losses::{self, LossGrad, LossWeights};

use crate::error::{NetError, Result};

type Eval = Box<dyn Fn(&[f64]) -> LossGrad + Send + Sync>;

struct LossOp {
    name: &'static str,
    eval: Eval,
    grad: Mutex<Option<Vec<f64>>>,
}

impl CustomOp1 for LossOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg(format!("{}: non-contiguous input", self.name)))?;
        let x: Vec<f64> = match storage {
            CpuStorage::F32(v) => v[start..end].iter().map(|&a| a as f64).collect(),
            CpuStorage::F64(v) => v[start..end].to_vec(),
            _ => return Err(candle_core::Error::Msg(format!("{}: unsupported dtype", self.name))),
        };
        let lg = (self.eval)(&x);
        *self.grad.lock().expect("loss cache") = Some(lg.grad);
        let out = match storage {
            CpuStorage::F64(_) => CpuStorage::F64(vec![lg.value]),
            _ => CpuStorage::F32(vec![lg.value as f32]),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let cached = self.grad.lock().expect("loss cache").clone();
        let g = match cached {
            Some(g) => g,
            None => {
                let x = arg.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
                (self.eval)(&x).grad
            }
        };
        let t = Tensor::from_vec(g, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t.broadcast_mul(grad_res)?))
    }
}

fn apply(x: &Tensor, name: &'static str, eval: Eval) -> Result<Tensor> {
    let op = LossOp { name, eval, grad: Mutex::new(None) };
    Ok(x.contiguous()?.apply_op1(op)?)
}

fn check_len(x: &Tensor, n: usize, what: &str) -> Result<()> {
    if x.elem_count() != n {
        return Err(NetError::Data(format!("{what}: {} predictions for {n} targets", x.elem_count())));
    }
    Ok(())
}

/// Weighted composite segmentation loss of a `[1, 1, H, W]` probability map against a binary target.
pub fn segmentation_loss(p: &Tensor, target: Vec<f64>, weights: LossWeights) -> Result<Tensor> {
    let (_, _, h, w) = p.dims4()?;
    check_len(p, target.len(), "segmentation loss")?;
    apply(p, "composite-seg-loss", Box::new(move |x| losses::composite(x, &target, w, h, &weights)))
}

/// Masked mean squared error of a `[1, 3, H, W]` reconstruction against an interleaved RGB target.
pub fn reconstruction_loss(recon: &Tensor, target: Vec<f64>, roi: Vec<bool>) -> Result<Tensor> {
    let hwc = recon.squeeze(0)?.permute((1, 2, 0))?;
    check_len(&hwc, target.len(), "reconstruction loss")?;
    if roi.len() * 3 != target.len() {
        return Err(NetError::Data("reconstruction roi size mismatch".into()));
    }
    apply(&hwc, "masked-mse", Box::new(move |x| losses::masked_mse(x, &target, &roi, 3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (8, 8);
        let p: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        let wts = LossWeights::stage2();
        let want = losses::composite(&p, &y, w, h, &wts);
        let v = Var::from_vec(p.clone(), (1, 1, h, w), &Device::Cpu).unwrap();
        let loss = segmentation_loss(v.as_tensor(), y, wts).unwrap();
        assert!((loss.to_scalar::<f64>().unwrap() - want.value).abs() < 1e-12);
        let g = loss.affine(3.0, 0.0).unwrap().backward().unwrap();
        let got = g.get(&v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&want.grad) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_layout() {
        // Channel-first prediction against an interleaved target.
        let recon = Tensor::from_vec(vec![0.0f32, 0.0, 1.0, 1.0, 0.5, 0.5], (1, 3, 1, 2), &Device::Cpu).unwrap();
        let target = vec![0.0, 1.0, 0.5, 0.0, 1.0, 0.5];
        let l = reconstruction_loss(&recon, target, vec![true, true]).unwrap();
        assert_eq!(l.to_scalar::<f32>().unwrap(), 0.0);
        assert!(segmentation_loss(&recon, vec![0.0; 3], LossWeights::stage2()).is_err());
    }
}
