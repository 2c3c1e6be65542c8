//! Three-stage training: corrupted-image reconstruction, attention-branch segmentation against
//! pruned targets, and U-Net refinement with the attention branch frozen.

use std::path::PathBuf;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use hacseg_core::augment::{corrupt, frame_seed, CorruptionSpec};
use hacseg_core::losses::{LossWeights, Stage};
use hacseg_core::manifest::ManifestEntry;
use hacseg_core::metrics::{self, SegScores};
use hacseg_core::synth::SyntheticSample;
use hacseg_core::targets::{prune_targets, DEFAULT_MIN_PATH_PX};
use hacseg_core::{BinaryMask, ProbMap, RasterImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NetError, Result};
use crate::lossop::{reconstruction_loss, segmentation_loss};
use crate::model::{self, image_tensor};
use crate::params::{Group, ParamStore};

/// Evaluation threshold for probability maps.
pub const THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warm-up from zero, then cosine annealing to zero at `total` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: f64,
    pub total: f64,
}

impl LrSchedule {
    /// Rate at a possibly fractional epoch.
    pub fn at(&self, epoch: f64) -> f64 {
        if epoch < self.warmup {
            return self.base * epoch / self.warmup;
        }
        let span = (self.total - self.warmup).max(f64::MIN_POSITIVE);
        let t = ((epoch - self.warmup) / span).clamp(0.0, 1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageId {
    Pretrain = 1,
    Attention = 2,
    Refine = 3,
}

impl StageId {
    pub fn number(self) -> u8 {
        self as u8
    }

    /// Parameter groups updated by the stage.
    pub fn trains(self, g: Group) -> bool {
        match self {
            StageId::Pretrain => true,
            StageId::Attention => g.is_attention_branch(),
            StageId::Refine => g == Group::Unet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: StageId,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adam: AdamSettings,
    /// Early stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_iters: Option<usize>,
    /// Minimum skeleton component length of the pruned targets.
    pub min_path_px: usize,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl TrainPlan {
    fn base(stage: StageId, epochs: usize, weights: LossWeights) -> Self {
        Self {
            stage,
            epochs,
            warmup_epochs: 10.0,
            base_lr: 1e-4,
            batch_size: 1,
            weights,
            adam: AdamSettings::default(),
            patience: Some(50),
            max_iters: None,
            min_path_px: DEFAULT_MIN_PATH_PX,
            corruption: CorruptionSpec::default(),
            seed: 42,
        }
    }

    pub fn stage1() -> Self {
        Self {
            patience: None,
            ..Self::base(StageId::Pretrain, 100, LossWeights::stage2())
        }
    }

    pub fn stage2() -> Self {
        Self::base(StageId::Attention, 200, LossWeights::stage2())
    }

    pub fn stage3() -> Self {
        Self::base(StageId::Refine, 100, LossWeights::stage3())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            warmup: self.warmup_epochs,
            total: self.epochs as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(NetError::Config(m));
        if self.epochs == 0 {
            return cfg("epochs must be positive".into());
        }
        if self.batch_size != 1 {
            return cfg(format!("batch size {} unsupported; only 1 is implemented", self.batch_size));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.warmup_epochs >= 0.0) {
            return cfg("learning rate must be positive and warm-up non-negative".into());
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return cfg("invalid AdamW settings".into());
        }
        match self.stage {
            StageId::Attention => self.weights.validate(Stage::Attention),
            StageId::Refine => self.weights.validate(Stage::Refine),
            StageId::Pretrain => Ok(()),
        }
        .map_err(|e| NetError::Config(e.to_string()))?;
        if self.stage == StageId::Pretrain {
            self.corruption.validate().map_err(|e| NetError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub image: RasterImage,
    pub mask: BinaryMask,
}

impl From<SyntheticSample> for Labeled {
    fn from(s: SyntheticSample) -> Self {
        Self { image: s.image, mask: s.mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageId,
    pub weights_echo: String,
    pub iterations: usize,
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub checksums_before: Vec<(Group, String)>,
    pub checksums_after: Vec<(Group, String)>,
}

fn mask_target(m: &BinaryMask) -> Vec<f64> {
    m.data().iter().map(|&b| b as u8 as f64).collect()
}

fn image_target(img: &RasterImage) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn snapshot(vars: &[Var]) -> Result<Vec<Tensor>> {
    Ok(vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?)
}

fn restore(vars: &[Var], snap: &[Tensor]) -> Result<()> {
    for (v, s) in vars.iter().zip(snap) {
        v.set(s)?;
    }
    Ok(())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        f64::NAN
    } else {
        s[s.len() / 2]
    }
}

/// Medians of the first and last tenth of a loss trace.
pub fn loss_trend(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1);
    (median(&losses[..k.min(losses.len())]), median(&losses[losses.len().saturating_sub(k)..]))
}

enum Data<'a> {
    Unlabeled(&'a [RasterImage]),
    Labeled { pairs: &'a [Labeled], targets: Vec<Vec<f64>> },
}

impl Data<'_> {
    fn len(&self) -> usize {
        match self {
            Data::Unlabeled(f) => f.len(),
            Data::Labeled { pairs, .. } => pairs.len(),
        }
    }
}

/// Mean Dice of the stage's output map against its own targets.
fn validation_dice(p: &ParamStore, stage: StageId, val: &[Labeled], min_path: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for f in val {
        let x = image_tensor(&f.image)?;
        let (pred, gt) = match stage {
            StageId::Attention => (
                model::tensor_to_probmap(&model::attention_prior_t(p, &x, None)?)?,
                prune_targets(&f.mask, min_path),
            ),
            _ => (model::tensor_to_probmap(&model::forward_t(p, &x, None)?.phac)?, f.mask.clone()),
        };
        let c = metrics::confusion(&pred.threshold(THRESHOLD), &gt, f.image.fov())?;
        // Empty prediction on an empty target counts as perfect.
        sum += c.dice().unwrap_or(1.0);
    }
    Ok(Some(sum / val.len() as f64))
}

fn run_stage(p: &ParamStore, plan: &TrainPlan, data: Data<'_>, val: &[Labeled]) -> Result<StageReport> {
    plan.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(NetError::Data(format!("stage {} has no training frames", plan.stage.number())));
    }
    let checksums_before = p.checksums()?;
    let vars = p.vars_where(|g| plan.stage.trains(g));
    let a = plan.adam;
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: 0.0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        },
    )?;
    let sched = plan.schedule();
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut last_good = snapshot(&vars)?;
    let mut stopped_early = false;
    let mut it = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 0..plan.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(frame_seed(plan.seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (k, &i) in order.iter().enumerate() {
            if plan.max_iters.is_some_and(|m| it >= m) {
                break;
            }
            let lr = sched.at(epoch as f64 + k as f64 / n as f64);
            opt.set_learning_rate(lr);
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(plan.seed ^ 0x5EED, it as u64));
            let loss = match &data {
                Data::Unlabeled(frames) => {
                    let clean = &frames[i];
                    let spec = CorruptionSpec {
                        seed: frame_seed(plan.corruption.seed, it as u64),
                        ..plan.corruption.clone()
                    };
                    let (noisy, _) = corrupt(clean, &spec);
                    let recon = model::forward_recon_t(p, &image_tensor(&noisy)?, Some(&mut rng))?;
                    reconstruction_loss(&recon, image_target(clean), clean.fov().data().to_vec())?
                }
                Data::Labeled { pairs, targets } => {
                    let x = image_tensor(&pairs[i].image)?;
                    let out = match plan.stage {
                        StageId::Attention => model::attention_prior_t(p, &x, Some(&mut rng))?,
                        _ => {
                            let pa = model::attention_prior_t(p, &x, None)?.detach();
                            let pu = model::unet_refine_t(p, &x, &pa)?;
                            model::fuse_t(&pa, &pu)?
                        }
                    };
                    segmentation_loss(&out, targets[i].clone(), plan.weights)?
                }
            };
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                restore(&vars, &last_good)?;
                return Err(NetError::Diverged {
                    stage: plan.stage.number(),
                    iter: it,
                });
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            losses.push(value);
            epoch_loss += value;
            steps += 1;
            it += 1;
        }
        if steps == 0 {
            break;
        }
        last_good = snapshot(&vars)?;
        let val_dice = if plan.stage == StageId::Pretrain {
            None
        } else {
            validation_dice(p, plan.stage, val, plan.min_path_px)?
        };
        epochs.push(EpochRecord {
            epoch,
            lr: sched.at(epoch as f64),
            mean_loss: epoch_loss / steps as f64,
            val_dice,
        });
        log::info!(
            "stage {} epoch {epoch}: loss {:.5}{}",
            plan.stage.number(),
            epoch_loss / steps as f64,
            val_dice.map(|d| format!(", val dice {d:.4}")).unwrap_or_default()
        );
        if let Some(d) = val_dice {
            if best.as_ref().is_none_or(|(b, _, _)| d > *b) {
                best = Some((d, epoch, snapshot(&vars)?));
            } else if let (Some(pat), Some((_, be, _))) = (plan.patience, &best) {
                if epoch - be >= pat {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, snap)) => {
            restore(&vars, &snap)?;
            Some(e)
        }
        None => None,
    };
    Ok(StageReport {
        stage: plan.stage,
        weights_echo: if plan.stage == StageId::Pretrain {
            "masked MSE".into()
        } else {
            plan.weights.echo()
        },
        iterations: it,
        losses,
        epochs,
        best_epoch,
        stopped_early,
        checksums_before,
        checksums_after: p.checksums()?,
    })
}

/// Pre-training: reconstruct each clean frame from its corrupted version. Updates `p` in place.
pub fn run_stage1(p: &ParamStore, plan: &TrainPlan, frames: &[RasterImage]) -> Result<StageReport> {
    expect_stage(plan, StageId::Pretrain)?;
    run_stage(p, plan, Data::Unlabeled(frames), &[])
}

/// Attention branch against pruned targets; the U-Net never enters the graph.
pub fn run_stage2(p: &ParamStore, plan: &TrainPlan, train: &[Labeled], val: &[Labeled]) -> Result<StageReport> {
    expect_stage(plan, StageId::Attention)?;
    let targets = train.iter().map(|f| mask_target(&prune_targets(&f.mask, plan.min_path_px))).collect();
    run_stage(p, plan, Data::Labeled { pairs: train, targets }, val)
}

/// U-Net refinement of the fused map; the attention branch stays frozen.
pub fn run_stage3(p: &ParamStore, plan: &TrainPlan, train: &[Labeled], val: &[Labeled]) -> Result<StageReport> {
    expect_stage(plan, StageId::Refine)?;
    let targets = train.iter().map(|f| mask_target(&f.mask)).collect();
    run_stage(p, plan, Data::Labeled { pairs: train, targets }, val)
}

fn expect_stage(plan: &TrainPlan, s: StageId) -> Result<()> {
    if plan.stage != s {
        return Err(NetError::Config(format!(
            "plan is for stage {}, not stage {}",
            plan.stage.number(),
            s.number()
        )));
    }
    Ok(())
}

/// Masked reconstruction error of corrupted frames at evaluation mode, one fixed corruption per frame.
pub fn reconstruction_mse(p: &ParamStore, frames: &[RasterImage], spec: &CorruptionSpec) -> Result<f64> {
    let mut sum = 0.0;
    for (i, clean) in frames.iter().enumerate() {
        let s = CorruptionSpec {
            seed: frame_seed(spec.seed, i as u64),
            ..spec.clone()
        };
        let (noisy, _) = corrupt(clean, &s);
        let recon = model::forward_recon_t(p, &image_tensor(&noisy)?, None)?;
        let l = reconstruction_loss(&recon, image_target(clean), clean.fov().data().to_vec())?;
        sum += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(sum / frames.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub pa: SegScores,
    pub phac: SegScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: Vec<FrameEval>,
    pub mean_pa: Vec<(String, Option<f64>)>,
    pub mean_phac: Vec<(String, Option<f64>)>,
}

impl EvalSummary {
    pub fn mean(&self, map: &str, metric: &str) -> Option<f64> {
        let list = if map == "pa" { &self.mean_pa } else { &self.mean_phac };
        list.iter().find(|(n, _)| n == metric).and_then(|(_, v)| *v)
    }
}

fn mean_scores(scores: &[SegScores]) -> Vec<(String, Option<f64>)> {
    let names = SegScores::default().named().map(|(n, _)| n);
    names
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let vals: Vec<f64> = scores.iter().filter_map(|s| s.named()[k].1).collect();
            let m = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (n.to_string(), m)
        })
        .collect()
}

/// Scores of thresholded `P_A` and `P_HAC` against the annotation within the FOV.
pub fn evaluate(p: &ParamStore, frames: &[Labeled]) -> Result<EvalSummary> {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let m = model::forward(&f.image, p, None)?;
        let fov = f.image.fov();
        out.push(FrameEval {
            pa: metrics::score(&m.pa.threshold(THRESHOLD), &f.mask, fov)?,
            phac: metrics::score(&m.phac.threshold(THRESHOLD), &f.mask, fov)?,
        });
    }
    let pa: Vec<_> = out.iter().map(|f| f.pa).collect();
    let ph: Vec<_> = out.iter().map(|f| f.phac).collect();
    Ok(EvalSummary {
        mean_pa: mean_scores(&pa),
        mean_phac: mean_scores(&ph),
        frames: out,
    })
}

pub fn probmaps(p: &ParamStore, img: &RasterImage) -> Result<(ProbMap, ProbMap, ProbMap)> {
    let m = model::forward(img, p, None)?;
    Ok((m.pa, m.pu, m.phac))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub unlabeled: usize,
    pub train: usize,
    pub test: usize,
    /// Held out of `train` for early stopping.
    pub validation: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            unlabeled: 81,
            train: 45,
            test: 5,
            validation: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub unlabeled: Vec<PathBuf>,
    /// Training pairs after the validation hold-out.
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub seed: u64,
}

/// SHA-256 over NUL-separated paths.
pub fn hash_paths<'a>(paths: impl Iterator<Item = &'a PathBuf>) -> String {
    let mut h = Sha256::new();
    for p in paths {
        h.update(p.to_string_lossy().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

impl SplitManifest {
    /// Seeded split of the labeled list into test, validation and train; every count must be met exactly.
    pub fn build(unlabeled: Vec<PathBuf>, labeled: Vec<ManifestEntry>, counts: SplitCounts, seed: u64) -> Result<Self> {
        if unlabeled.len() != counts.unlabeled {
            return Err(NetError::Data(format!(
                "{} unlabeled frames listed, {} expected",
                unlabeled.len(),
                counts.unlabeled
            )));
        }
        if labeled.len() != counts.train + counts.test {
            return Err(NetError::Data(format!(
                "{} labeled pairs listed, {} expected",
                labeled.len(),
                counts.train + counts.test
            )));
        }
        if counts.validation >= counts.train {
            return Err(NetError::Config("validation hold-out must leave training frames".into()));
        }
        if labeled.iter().any(|e| e.mask.is_none()) {
            return Err(NetError::Data("labeled entry without a mask".into()));
        }
        let mut order = labeled;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = order.drain(..counts.test).collect();
        let validation = order.drain(..counts.validation).collect();
        let m = Self {
            unlabeled,
            train: order,
            validation,
            test,
            seed,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let all = self
            .unlabeled
            .iter()
            .chain(self.train.iter().map(|e| &e.image))
            .chain(self.validation.iter().map(|e| &e.image))
            .chain(self.test.iter().map(|e| &e.image));
        for p in all {
            if !seen.insert(p) {
                return Err(NetError::Data(format!("{} appears in more than one split", p.display())));
            }
        }
        Ok(())
    }

    pub fn hashes(&self) -> SplitHashes {
        SplitHashes {
            unlabeled: hash_paths(self.unlabeled.iter()),
            train: hash_paths(self.train.iter().map(|e| &e.image)),
            validation: hash_paths(self.validation.iter().map(|e| &e.image)),
            test: hash_paths(self.test.iter().map(|e| &e.image)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHashes {
    pub unlabeled: String,
    pub train: String,
    pub validation: String,
    pub test: String,
}

/// Everything needed to audit a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: crate::config::HacConfig,
    pub plan: TrainPlan,
    pub seed: u64,
    pub splits: Option<SplitHashes>,
    pub validation_held_out: usize,
    pub report: StageReport,
}
