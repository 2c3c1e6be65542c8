//! Forward pass of the hybrid network on batch-of-one NCHW tensors, plus raster-level wrappers.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::{layer_norm_slow, sigmoid, softmax};
use hacseg_core::{ProbMap, RasterImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::HacConfig;
use crate::error::{NetError, Result};
use crate::params::ParamStore;

const LN_EPS: f32 = 1e-6;
const NORM_EPS: f64 = 1e-5;

/// `[1, 3, H, W]` tensor from an interleaved RGB raster.
pub fn image_tensor(img: &RasterImage) -> Result<Tensor> {
    let (w, h) = img.dims();
    let t = Tensor::from_slice(img.data(), (h, w, 3), &Device::Cpu)?;
    Ok(t.permute((2, 0, 1))?.contiguous()?.unsqueeze(0)?)
}

/// `[1, 1, H, W]` tensor from a probability map.
pub fn prob_tensor(p: &ProbMap) -> Result<Tensor> {
    let (w, h) = p.dims();
    Ok(Tensor::from_slice(p.data(), (1, 1, h, w), &Device::Cpu)?)
}

pub fn tensor_to_probmap(t: &Tensor) -> Result<ProbMap> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("output map".into()));
    }
    Ok(ProbMap::from_vec(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
}

pub fn tensor_to_image(t: &Tensor) -> Result<RasterImage> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.squeeze(0)?.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f32>()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("reconstruction".into()));
    }
    Ok(RasterImage::new(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
}

fn check_finite(t: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(NetError::NonFinite(what()))
    }
}

fn check_input(cfg: &HacConfig, x: &Tensor, channels: usize) -> Result<()> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || c != channels || h != cfg.image_size || w != cfg.image_size {
        return Err(NetError::Data(format!(
            "input {b}x{c}x{h}x{w} does not match 1x{channels}x{s}x{s}",
            s = cfg.image_size
        )));
    }
    Ok(())
}

/// `[N, d]` tokens from a strided patch projection, row-major over the patch grid.
pub fn patch_embed_t(p: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let cfg = p.config();
    check_input(cfg, x, 3)?;
    let y = x.conv2d(p.get("attn.patch.weight")?, 0, cfg.patch, 1, 1)?;
    let y = y.broadcast_add(&p.get("attn.patch.bias")?.reshape((1, cfg.embed_dim, 1, 1))?)?;
    let z = y.flatten_from(2)?.squeeze(0)?.t()?.contiguous()?;
    if cfg.pos_embed {
        Ok(z.add(p.get("attn.pos")?)?)
    } else {
        Ok(z)
    }
}

pub fn patch_embed(img: &RasterImage, p: &ParamStore) -> Result<Tensor> {
    let s = p.config().image_size;
    if img.dims() != (s, s) {
        return Err(NetError::Data(format!(
            "image {}x{} does not match configured size {s}",
            img.width(),
            img.height()
        )));
    }
    patch_embed_t(p, &image_tensor(img)?)
}

/// `[N, d]` tokens back to a `[1, d, g, g]` grid.
pub fn tokens_to_grid(z: &Tensor, grid: usize) -> Result<Tensor> {
    let (n, d) = z.dims2()?;
    if n != grid * grid {
        return Err(NetError::Config(format!("{n} tokens do not fill a {grid}x{grid} grid")));
    }
    Ok(z.t()?.reshape((1, d, grid, grid))?)
}

pub fn grid_to_tokens(g: &Tensor) -> Result<Tensor> {
    Ok(g.flatten_from(2)?.squeeze(0)?.t()?.contiguous()?)
}

fn linear(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    Ok(x.matmul(w)?.broadcast_add(b)?)
}

fn ln(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_slow(
        x,
        p.get(&format!("{prefix}.gamma"))?,
        p.get(&format!("{prefix}.beta"))?,
        LN_EPS,
    )?)
}

fn dropout(x: &Tensor, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let scale = (1.0 / (1.0 - rate)) as f32;
            let mask: Vec<f32> = (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                .collect();
            Ok(x.mul(&Tensor::from_vec(mask, x.shape(), x.device())?)?)
        }
        _ => Ok(x.clone()),
    }
}

/// Multiplier of a residual branch: 0 when dropped, `1/(1-rho)` when kept in training, 1 at evaluation.
pub fn droppath_scale(rho: f64, rng: Option<&mut ChaCha8Rng>) -> f64 {
    match rng {
        Some(rng) if rho > 0.0 => {
            if rng.random::<f64>() < rho {
                0.0
            } else {
                1.0 / (1.0 - rho)
            }
        }
        _ => 1.0,
    }
}

fn add_branch(z: &Tensor, branch: impl FnOnce() -> Result<Tensor>, scale: f64) -> Result<Tensor> {
    if scale == 0.0 {
        return Ok(z.clone());
    }
    let b = branch()?;
    if scale == 1.0 {
        Ok(z.add(&b)?)
    } else {
        Ok(z.add(&b.affine(scale, 0.0)?)?)
    }
}

/// Multi-head self-attention on `[N, d]` tokens. Returns the output and the `[h, N, N]` weights.
pub fn attention(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let cfg = p.config();
    let (n, d) = x.dims2()?;
    let (h, dk) = (cfg.heads, cfg.head_dim());
    let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((n, h, dk))?.transpose(0, 1)?.contiguous()?) };
    let q = split(linear(p, &format!("{prefix}.q"), x)?)?;
    let k = split(linear(p, &format!("{prefix}.k"), x)?)?;
    let v = split(linear(p, &format!("{prefix}.v"), x)?)?;
    let scores = q.matmul(&k.t()?)?.affine(1.0 / (dk as f64).sqrt(), 0.0)?;
    let attn = softmax(&scores, D::Minus1)?;
    let out = attn.matmul(&v)?.transpose(0, 1)?.reshape((n, d))?;
    Ok((linear(p, &format!("{prefix}.o"), &out)?, attn))
}

pub struct BlockOutput {
    pub z: Tensor,
    /// `[h, N, N]` attention weights; `None` when the attention branch was dropped.
    pub attn: Option<Tensor>,
}

/// One pre-norm encoder block. `rng` selects training mode (stochastic depth and dropout).
pub fn encoder_block(
    p: &ParamStore,
    block: usize,
    z: &Tensor,
    rho: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BlockOutput> {
    let cfg = p.config();
    let pre = format!("attn.block{block}");
    let mut attn = None;
    let s1 = droppath_scale(rho, rng.as_deref_mut());
    let z1 = add_branch(
        z,
        || {
            let (o, a) = attention(p, &pre, &ln(p, &format!("{pre}.ln1"), z)?)?;
            attn = Some(a);
            dropout(&o, cfg.dropout, rng.as_deref_mut())
        },
        s1,
    )?;
    let s2 = droppath_scale(rho, rng.as_deref_mut());
    let out = add_branch(
        &z1,
        || {
            let hdn = linear(p, &format!("{pre}.mlp1"), &ln(p, &format!("{pre}.ln2"), &z1)?)?.gelu_erf()?;
            let o = linear(p, &format!("{pre}.mlp2"), &hdn)?;
            dropout(&o, cfg.dropout, rng.as_deref_mut())
        },
        s2,
    )?;
    check_finite(&out, || format!("encoder block {block}"))?;
    Ok(BlockOutput { z: out, attn })
}

/// Patch embedding, all encoder blocks and the final norm. Returns `Z^(L)` and per-block attention.
pub fn encode(p: &ParamStore, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Vec<Option<Tensor>>)> {
    let cfg = p.config();
    let mut z = patch_embed_t(p, x)?;
    let mut maps = Vec::with_capacity(cfg.depth);
    for (b, rho) in cfg.droppath_schedule().into_iter().enumerate() {
        let out = encoder_block(p, b, &z, rho, rng.as_deref_mut())?;
        z = out.z;
        maps.push(out.attn);
    }
    Ok((ln(p, "attn.norm", &z)?, maps))
}

/// Per-sample, per-channel normalisation with learned scale and offset.
fn channel_norm(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let mean = x.mean_keepdim((2, 3))?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim((2, 3))?;
    let xn = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    let g = p.get(&format!("{prefix}.gamma"))?.reshape((1, c, 1, 1))?;
    let b = p.get(&format!("{prefix}.beta"))?.reshape((1, c, 1, 1))?;
    Ok(xn.broadcast_mul(&g)?.broadcast_add(&b)?)
}

fn conv(p: &ParamStore, prefix: &str, x: &Tensor, pad: usize) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = x.conv2d(w, pad, 1, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

fn up2(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = x.conv_transpose2d(w, 0, 0, 2, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

/// Logits of the prior map from encoded tokens, `[1, 1, H, W]`.
pub fn prior_logits(p: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let cfg = p.config();
    let mut x = tokens_to_grid(z, cfg.grid())?;
    for j in 0..cfg.prior_blocks() {
        x = up2(p, &format!("prior.up{j}"), &x)?;
        x = channel_norm(p, &format!("prior.up{j}.norm"), &x)?.relu()?;
    }
    conv(p, "prior.head", &x, 0)
}

/// The prior map `P_A` from encoded tokens.
pub fn prior_decode_t(p: &ParamStore, z: &Tensor) -> Result<Tensor> {
    Ok(sigmoid(&prior_logits(p, z)?)?)
}

pub fn prior_decode(z: &Tensor, p: &ParamStore) -> Result<ProbMap> {
    tensor_to_probmap(&prior_decode_t(p, z)?)
}

/// Image to prior map in one call.
pub fn attention_prior_t(p: &ParamStore, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let (z, _) = encode(p, x, rng)?;
    prior_decode_t(p, &z)
}

fn double_conv(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let x = conv(p, &format!("{prefix}.conv1"), x, 1)?;
    let x = channel_norm(p, &format!("{prefix}.norm1"), &x)?.relu()?;
    let x = conv(p, &format!("{prefix}.conv2"), &x, 1)?;
    Ok(channel_norm(p, &format!("{prefix}.norm2"), &x)?.relu()?)
}

/// Final decoder features of the U-Net on `[image; prior]`, `[1, base, H, W]`.
pub fn unet_features(p: &ParamStore, x: &Tensor, pa: &Tensor) -> Result<Tensor> {
    let cfg = p.config();
    check_input(cfg, x, 3)?;
    check_input(cfg, pa, 1)?;
    let stages = cfg.unet_scales.len();
    let mut h = Tensor::cat(&[x, pa], 1)?;
    let mut skips = Vec::with_capacity(stages);
    for s in 0..stages {
        let f = double_conv(p, &format!("unet.enc{s}"), &h)?;
        h = f.max_pool2d(2)?;
        skips.push(f);
    }
    h = double_conv(p, "unet.mid", &h)?;
    for s in (0..stages).rev() {
        let u = up2(p, &format!("unet.up{s}"), &h)?;
        h = double_conv(p, &format!("unet.dec{s}"), &Tensor::cat(&[&u, &skips[s]], 1)?)?;
    }
    check_finite(&h, || "unet".into())?;
    Ok(h)
}

/// The residual map `P_U`.
pub fn unet_refine_t(p: &ParamStore, x: &Tensor, pa: &Tensor) -> Result<Tensor> {
    Ok(sigmoid(&conv(p, "unet.head", &unet_features(p, x, pa)?, 0)?)?)
}

pub fn unet_refine(img: &RasterImage, pa: &ProbMap, p: &ParamStore) -> Result<ProbMap> {
    tensor_to_probmap(&unet_refine_t(p, &image_tensor(img)?, &prob_tensor(pa)?)?)
}

/// `clamp(P_A + 2 P_U - 1, 0, 1)`. The clamp passes gradients straight through.
pub fn fuse_t(pa: &Tensor, pu: &Tensor) -> Result<Tensor> {
    let raw = pa.add(&pu.affine(2.0, -1.0)?)?;
    let clamped = raw.clamp(0f32, 1f32)?;
    Ok(raw.add(&clamped.sub(&raw)?.detach())?)
}

pub fn fuse(pa: &ProbMap, pu: &ProbMap) -> Result<ProbMap> {
    if pa.dims() != pu.dims() {
        return Err(NetError::Data("prior and residual maps differ in size".into()));
    }
    let data = pa
        .data()
        .iter()
        .zip(pu.data())
        .map(|(&a, &u)| (a + (2.0 * u - 1.0)).clamp(0.0, 1.0))
        .collect();
    Ok(ProbMap::from_vec(pa.width(), pa.height(), data)?)
}

pub struct Maps {
    pub pa: Tensor,
    pub pu: Tensor,
    pub phac: Tensor,
}

pub fn forward_t(p: &ParamStore, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Maps> {
    let pa = attention_prior_t(p, x, rng)?;
    let pu = unet_refine_t(p, x, &pa)?;
    let phac = fuse_t(&pa, &pu)?;
    Ok(Maps { pa, pu, phac })
}

/// Reconstruction `[1, 3, H, W]` in `[0,1]` from the final U-Net features.
pub fn forward_recon_t(p: &ParamStore, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let pa = attention_prior_t(p, x, rng.as_deref_mut())?;
    let f = unet_features(p, x, &pa)?;
    Ok(sigmoid(&conv(p, "recon.head", &f, 0)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HacMaps {
    pub pa: ProbMap,
    pub pu: ProbMap,
    pub phac: ProbMap,
}

pub fn forward(img: &RasterImage, p: &ParamStore, rng: Option<&mut ChaCha8Rng>) -> Result<HacMaps> {
    let s = p.config().image_size;
    if img.dims() != (s, s) {
        return Err(NetError::Data(format!(
            "image {}x{} does not match configured size {s}",
            img.width(),
            img.height()
        )));
    }
    let m = forward_t(p, &image_tensor(img)?, rng)?;
    Ok(HacMaps {
        pa: tensor_to_probmap(&m.pa)?,
        pu: tensor_to_probmap(&m.pu)?,
        phac: tensor_to_probmap(&m.phac)?,
    })
}

pub fn forward_recon(img: &RasterImage, p: &ParamStore) -> Result<RasterImage> {
    tensor_to_image(&forward_recon_t(p, &image_tensor(img)?, None)?)
}
