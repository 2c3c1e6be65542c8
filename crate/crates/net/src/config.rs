use serde::{Deserialize, Serialize};

use crate::error::NetError;

/// Shape and regularisation hyperparameters of the hybrid network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HacConfig {
    pub image_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Dropout after the attention output projection and the MLP.
    pub dropout: f64,
    /// Largest stochastic-depth rate, reached at the last block.
    pub droppath_max: f64,
    pub pos_embed: bool,
    pub unet_base: usize,
    pub unet_scales: Vec<usize>,
}

impl HacConfig {
    pub fn paper() -> Self {
        Self {
            image_size: 512,
            patch: 8,
            embed_dim: 384,
            depth: 8,
            heads: 4,
            mlp_ratio: 4.0,
            dropout: 0.1,
            droppath_max: 0.1,
            pos_embed: true,
            unet_base: 32,
            unet_scales: vec![1, 2, 4, 8],
        }
    }

    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            dropout: 0.0,
            droppath_max: 0.1,
            pos_embed: true,
            unet_base: 8,
            unet_scales: vec![1, 2, 4, 8],
        }
    }

    pub fn preset(name: &str) -> Result<Self, NetError> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(NetError::Config(format!("unknown preset `{other}` (paper, toy)"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Number of stride-2 upsampling blocks in the prior decoder.
    pub fn prior_blocks(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    pub fn prior_channels(&self) -> Vec<usize> {
        (0..=self.prior_blocks()).map(|i| self.embed_dim >> i).collect()
    }

    pub fn unet_channels(&self) -> Vec<usize> {
        self.unet_scales.iter().map(|s| s * self.unet_base).collect()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return err(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return err(format!("patch {} must be a power of two for the prior decoder", self.patch));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return err(format!("embed dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim % (1 << self.prior_blocks()) != 0 {
            return err(format!(
                "embed dim {} cannot be halved {} times in the prior decoder",
                self.embed_dim,
                self.prior_blocks()
            ));
        }
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return err(format!("mlp ratio {} too small", self.mlp_ratio));
        }
        for (name, v) in [("dropout", self.dropout), ("droppath_max", self.droppath_max)] {
            if !(0.0..1.0).contains(&v) {
                return err(format!("{name} {v} outside [0,1)"));
            }
        }
        if self.unet_base == 0 || self.unet_scales.is_empty() || self.unet_scales.contains(&0) {
            return err("unet channels must be positive".into());
        }
        let down = 1usize << self.unet_scales.len();
        if self.image_size % down != 0 {
            return err(format!(
                "image size {} not divisible by {} for {} U-Net stages",
                self.image_size,
                down,
                self.unet_scales.len()
            ));
        }
        Ok(())
    }

    /// Stochastic-depth rate per block, rising linearly to `droppath_max`.
    pub fn droppath_schedule(&self) -> Vec<f64> {
        (1..=self.depth)
            .map(|l| self.droppath_max * l as f64 / self.depth as f64)
            .collect()
    }

    /// Total learned scalars, reconstruction head included.
    pub fn param_count(&self) -> usize {
        crate::params::shapes(self).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate() {
        HacConfig::paper().validate().unwrap();
        HacConfig::toy().validate().unwrap();
        assert_eq!(HacConfig::paper().tokens(), 4096);
        assert_eq!(HacConfig::toy().tokens(), 64);
        assert_eq!(HacConfig::paper().head_dim(), 96);
        assert_eq!(HacConfig::paper().unet_channels(), vec![32, 64, 128, 256]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = HacConfig::toy();
        c.image_size = 100;
        assert!(c.validate().is_err());
        let mut c = HacConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = HacConfig::toy();
        c.patch = 6;
        c.image_size = 48;
        assert!(c.validate().is_err());
        let mut c = HacConfig::toy();
        c.image_size = 72;
        assert!(c.validate().is_err(), "72 is not a multiple of 16");
        assert!(HacConfig::preset("huge").is_err());
    }

    #[test]
    fn droppath_rates() {
        let r = HacConfig::paper().droppath_schedule();
        assert_eq!(r.len(), 8);
        assert!((r[3] - 0.05).abs() < 1e-15);
        assert_eq!(r[7], 0.1);
        let mut c = HacConfig::paper();
        c.droppath_max = 0.0;
        assert!(c.droppath_schedule().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn param_count_monotone(d in 1usize..6, l in 1usize..4, b in 1usize..6) {
            let mut c = HacConfig::toy();
            c.embed_dim = 8 * d;
            c.depth = l;
            c.unet_base = b;
            let n = c.param_count();
            let mut c2 = c.clone();
            c2.embed_dim += 8;
            prop_assert!(c2.param_count() > n);
            let mut c3 = c.clone();
            c3.depth += 1;
            prop_assert!(c3.param_count() > n);
            let mut c4 = c.clone();
            c4.unet_base += 1;
            prop_assert!(c4.param_count() > n);
        }
    }
}
