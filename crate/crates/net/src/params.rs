//! Named parameter store. Names are dotted paths whose first segment is the parameter group.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::HacConfig;
use crate::error::{NetError, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Patch embedding, positional embedding and encoder blocks.
    Attn,
    /// Transposed-convolution decoder and head producing the prior map.
    Prior,
    Unet,
    /// Reconstruction head used only while pre-training.
    Recon,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Attn, Group::Prior, Group::Unet, Group::Recon];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Attn => "attn",
            Group::Prior => "prior",
            Group::Unet => "unet",
            Group::Recon => "recon",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        name.split('.').next()?.parse().ok()
    }

    /// The attention branch: everything that feeds the prior map.
    pub fn is_attention_branch(self) -> bool {
        matches!(self, Group::Attn | Group::Prior)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| NetError::Config(format!("unknown parameter group `{s}`")))
    }
}

fn push(out: &mut Vec<(String, Vec<usize>)>, name: String, shape: &[usize]) {
    out.push((name, shape.to_vec()));
}

fn norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize) {
    push(out, format!("{prefix}.gamma"), &[c]);
    push(out, format!("{prefix}.beta"), &[c]);
}

fn linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, i: usize, o: usize) {
    push(out, format!("{prefix}.weight"), &[i, o]);
    push(out, format!("{prefix}.bias"), &[o]);
}

fn double_conv(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, i: usize, o: usize) {
    push(out, format!("{prefix}.conv1.weight"), &[o, i, 3, 3]);
    push(out, format!("{prefix}.conv1.bias"), &[o]);
    norm(out, &format!("{prefix}.norm1"), o);
    push(out, format!("{prefix}.conv2.weight"), &[o, o, 3, 3]);
    push(out, format!("{prefix}.conv2.bias"), &[o]);
    norm(out, &format!("{prefix}.norm2"), o);
}

/// Every parameter name and shape implied by `cfg`, in storage order.
pub fn shapes(cfg: &HacConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut out = Vec::new();
    push(&mut out, "attn.patch.weight".into(), &[d, 3, cfg.patch, cfg.patch]);
    push(&mut out, "attn.patch.bias".into(), &[d]);
    if cfg.pos_embed {
        push(&mut out, "attn.pos".into(), &[cfg.tokens(), d]);
    }
    for b in 0..cfg.depth {
        let p = format!("attn.block{b}");
        norm(&mut out, &format!("{p}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.{proj}"), d, d);
        }
        norm(&mut out, &format!("{p}.ln2"), d);
        linear(&mut out, &format!("{p}.mlp1"), d, cfg.mlp_hidden());
        linear(&mut out, &format!("{p}.mlp2"), cfg.mlp_hidden(), d);
    }
    norm(&mut out, "attn.norm", d);

    let pc = cfg.prior_channels();
    for j in 0..cfg.prior_blocks() {
        push(&mut out, format!("prior.up{j}.weight"), &[pc[j], pc[j + 1], 2, 2]);
        push(&mut out, format!("prior.up{j}.bias"), &[pc[j + 1]]);
        norm(&mut out, &format!("prior.up{j}.norm"), pc[j + 1]);
    }
    let last = *pc.last().unwrap();
    push(&mut out, "prior.head.weight".into(), &[1, last, 1, 1]);
    push(&mut out, "prior.head.bias".into(), &[1]);

    let uc = cfg.unet_channels();
    let mut cin = 4;
    for (s, &c) in uc.iter().enumerate() {
        double_conv(&mut out, &format!("unet.enc{s}"), cin, c);
        cin = c;
    }
    double_conv(&mut out, "unet.mid", cin, cin);
    let mut prev = cin;
    for (s, &c) in uc.iter().enumerate().rev() {
        push(&mut out, format!("unet.up{s}.weight"), &[prev, c, 2, 2]);
        push(&mut out, format!("unet.up{s}.bias"), &[c]);
        double_conv(&mut out, &format!("unet.dec{s}"), 2 * c, c);
        prev = c;
    }
    push(&mut out, "unet.head.weight".into(), &[1, uc[0], 1, 1]);
    push(&mut out, "unet.head.bias".into(), &[1]);
    push(&mut out, "recon.head.weight".into(), &[3, uc[0], 1, 1]);
    push(&mut out, "recon.head.bias".into(), &[3]);
    out
}

/// Draws from N(0, std) truncated to two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    cfg: HacConfig,
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Fresh weights: truncated normal for projections and kernels, ones and zeros for norms and biases.
    pub fn init(cfg: &HacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = if name.ends_with(".weight") || name == "attn.pos" {
                    truncated_normal(&mut rng, n, INIT_STD)
                } else if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                (name, shape, data)
            })
            .collect();
        Self::from_parts(cfg.clone(), entries)
    }

    pub(crate) fn from_parts(cfg: HacConfig, entries: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut vars = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (name, shape, data) in entries {
            let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
            index.insert(name.clone(), names.len());
            names.push(name);
            vars.push(Var::from_tensor(&t)?);
        }
        Ok(Self { cfg, names, vars, index })
    }

    pub fn config(&self) -> &HacConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].as_tensor())
            .ok_or_else(|| NetError::Config(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .var(name)
            .ok_or_else(|| NetError::Config(format!("missing parameter `{name}`")))?;
        if v.shape() != value.shape() {
            return Err(NetError::Config(format!(
                "shape {:?} does not match `{name}` {:?}",
                value.dims(),
                v.dims()
            )));
        }
        v.set(&value.to_dtype(v.dtype())?)?;
        Ok(())
    }

    pub fn vars_where(&self, keep: impl Fn(Group) -> bool) -> Vec<Var> {
        self.names
            .iter()
            .zip(&self.vars)
            .filter(|(n, _)| Group::of(n).is_some_and(&keep))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Name, shape and flattened values of every parameter, in storage order.
    pub fn entries(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.names
            .iter()
            .zip(&self.vars)
            .map(|(n, v)| Ok((n.clone(), v.dims().to_vec(), v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of one group.
    pub fn checksum(&self, group: Group) -> Result<String> {
        let mut h = Sha256::new();
        for (name, shape, data) in self.entries()? {
            if Group::of(&name) != Some(group) {
                continue;
            }
            h.update(name.as_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn checksums(&self) -> Result<Vec<(Group, String)>> {
        Group::ALL.into_iter().map(|g| Ok((g, self.checksum(g)?))).collect()
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_parts(self.cfg.clone(), self.entries()?)
    }

    /// Copy with every parameter converted to `dtype`; used for double-precision gradient checks.
    pub fn cast(&self, dtype: DType) -> Result<Self> {
        let vars = self
            .vars
            .iter()
            .map(|v| Ok(Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            vars,
            index: self.index.clone(),
        })
    }

    pub fn is_finite(&self) -> Result<bool> {
        for v in &self.vars {
            if v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
