//! TOML run configuration. Every key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use hacseg_core::augment::CorruptionSpec;
use hacseg_core::losses::LossWeights;
use hacseg_core::profile::ProfileOptions;
use hacseg_core::targets::DEFAULT_MIN_PATH_PX;
use hacseg_net::trainer::AdamSettings;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root for relative manifest paths; empty falls back to BLAVESS_DATA_DIR, then
    /// the manifest's directory.
    pub root: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { root: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub pos_embed: bool,
    pub dropout: f64,
    pub droppath_max: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = hacseg_net::HacConfig::paper();
        Self {
            preset: "paper".into(),
            pos_embed: p.pos_embed,
            dropout: p.dropout,
            droppath_max: p.droppath_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub manifest: String,
    pub center_frac: f64,
    pub periphery_frac: f64,
    pub fov_threshold: f32,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let o = ProfileOptions::default();
        Self {
            manifest: String::new(),
            center_frac: o.center_frac,
            periphery_frac: o.periphery_frac,
            fov_threshold: o.fov_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetsSection {
    pub min_path: usize,
}

impl Default for TargetsSection {
    fn default() -> Self {
        Self { min_path: DEFAULT_MIN_PATH_PX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    /// CSV manifest of `image[,mask]` rows.
    pub manifest: String,
    /// When positive, train on this many generated vessel trees instead of a manifest.
    pub synthetic: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub lr: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Cap on optimizer steps; 0 means no cap.
    pub max_iters: usize,
    /// Frames held out of the labeled list for early stopping.
    pub validation: usize,
    pub min_path: usize,
}

impl StageSection {
    fn with_epochs(epochs: usize, patience: usize) -> Self {
        Self {
            manifest: String::new(),
            synthetic: 0,
            epochs,
            warmup_epochs: 10.0,
            lr: 1e-4,
            patience,
            max_iters: 0,
            validation: 5,
            min_path: DEFAULT_MIN_PATH_PX,
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        Self::with_epochs(100, 50)
    }
}

fn pretrain_default() -> StageSection {
    StageSection::with_epochs(100, 0)
}

fn attn_default() -> StageSection {
    StageSection::with_epochs(200, 50)
}

fn hac_default() -> StageSection {
    StageSection::with_epochs(100, 50)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: hacseg_net::trainer::THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlaySection {
    pub threshold: f32,
    pub color: [u8; 3],
    pub alpha: f32,
}

impl Default for OverlaySection {
    fn default() -> Self {
        Self {
            threshold: hacseg_net::trainer::THRESHOLD,
            color: [0, 255, 0],
            alpha: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Corrupted variants written per input frame.
    pub count: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { count: 1 }
    }
}

macro_rules! loss_section {
    ($name:ident, $base:expr) => {
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            pub bce: f64,
            pub dice: f64,
            pub cldice: f64,
            pub tversky: f64,
            pub alpha: f64,
            pub beta: f64,
            pub skeleton_iters: usize,
        }

        impl Default for $name {
            fn default() -> Self {
                let w: LossWeights = $base;
                Self {
                    bce: w.bce,
                    dice: w.dice,
                    cldice: w.cldice,
                    tversky: w.tversky,
                    alpha: w.alpha,
                    beta: w.beta,
                    skeleton_iters: w.skeleton_iters,
                }
            }
        }

        impl From<$name> for LossWeights {
            fn from(s: $name) -> Self {
                LossWeights {
                    bce: s.bce,
                    dice: s.dice,
                    cldice: s.cldice,
                    tversky: s.tversky,
                    alpha: s.alpha,
                    beta: s.beta,
                    skeleton_iters: s.skeleton_iters,
                }
            }
        }
    };
}

loss_section!(AttnLoss, LossWeights::stage2());
loss_section!(HacLoss, LossWeights::stage3());

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        let a = AdamSettings::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl From<AdamSection> for AdamSettings {
    fn from(a: AdamSection) -> Self {
        AdamSettings {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub profile: ProfileSection,
    pub targets: TargetsSection,
    pub augment: AugmentSection,
    pub corruption: CorruptionSpec,
    #[serde(default = "pretrain_default")]
    pub pretrain: StageSection,
    #[serde(default = "attn_default")]
    pub train_attn: StageSection,
    #[serde(default = "hac_default")]
    pub train_hac: StageSection,
    pub attn_loss: AttnLoss,
    pub hac_loss: HacLoss,
    pub adamw: AdamSection,
    pub eval: EvalSection,
    pub overlay: OverlaySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection::default(),
            profile: ProfileSection::default(),
            targets: TargetsSection::default(),
            augment: AugmentSection::default(),
            corruption: CorruptionSpec::default(),
            pretrain: pretrain_default(),
            train_attn: attn_default(),
            train_hac: hac_default(),
            attn_loss: AttnLoss::default(),
            hac_loss: HacLoss::default(),
            adamw: AdamSection::default(),
            eval: EvalSection::default(),
            overlay: OverlaySection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// User keys are laid over the serialised defaults, so a partial section keeps the
    /// defaults of that section rather than of its type.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::config(format!("invalid config: {m}"));
        let user: toml::Table = toml::from_str(text).map_err(|e| bad(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serialises");
        overlay(&mut merged, user);
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| bad(e.message().to_string()))
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn model_config(&self) -> Result<hacseg_net::HacConfig, CliError> {
        let mut c = hacseg_net::HacConfig::preset(&self.model.preset).map_err(CliError::from)?;
        c.pos_embed = self.model.pos_embed;
        c.dropout = self.model.dropout;
        c.droppath_max = self.model.droppath_max;
        c.validate().map_err(CliError::from)?;
        Ok(c)
    }

    /// Dataset root: config value, then the environment, then none.
    pub fn data_root(&self) -> Option<PathBuf> {
        if !self.data.root.is_empty() {
            return Some(PathBuf::from(&self.data.root));
        }
        std::env::var_os(hacseg_core::manifest::DATA_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions {
            center_frac: self.profile.center_frac,
            periphery_frac: self.profile.periphery_frac,
            fov_threshold: self.profile.fov_threshold,
        }
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `section.key = default` for every leaf key, in schema order.
pub fn flatten_defaults() -> Vec<(String, String)> {
    let value = toml::Value::try_from(RunConfig::default()).expect("config serialises");
    let mut out = Vec::new();
    if let toml::Value::Table(t) = value {
        for (section, v) in t {
            if let toml::Value::Table(keys) = v {
                for (k, v) in keys {
                    out.push((format!("{section}.{k}"), v.to_string()));
                }
            }
        }
    }
    out
}

pub fn help_text() -> String {
    let mut s = String::from("Configuration keys (TOML, `[section]` then `key = value`) and defaults:\n");
    for (k, v) in flatten_defaults() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!(
        "\nRelative manifest paths resolve against data.root, then ${}, then the manifest's directory.\n",
        hacseg_core::manifest::DATA_DIR_ENV
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_round_trip() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(d.train_attn.epochs, 200);
        assert_eq!(d.pretrain.patience, 0);
        assert_eq!(d.hac_loss.beta, 0.9);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse("[train_hac]\nepochs = 3\n[attn_loss]\nbce = 0.5\n").unwrap();
        assert_eq!(c.train_hac.epochs, 3);
        assert_eq!(c.train_hac.lr, 1e-4);
        assert_eq!(c.attn_loss.bce, 0.5);
        assert_eq!(c.attn_loss.tversky, 1.5);
        let c = RunConfig::parse("[train_attn]\nlr = 0.001\n").unwrap();
        assert_eq!(c.train_attn.epochs, 200);
        let c = RunConfig::parse("[pretrain]\nlr = 0.001\n").unwrap();
        assert_eq!(c.pretrain.patience, 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn help_lists_everything() {
        let h = help_text();
        for (k, _) in flatten_defaults() {
            assert!(h.contains(&k), "{k}");
        }
        assert!(h.contains("targets.min_path = 100"));
    }
}
