use std::path::{Path, PathBuf};

use hacseg_core::augment::{corrupt, frame_seed, CorruptionSpec, Provenance};
use hacseg_core::metrics::{score, SegScores};
use hacseg_core::profile::profile_dataset;
use hacseg_core::raster::{load_image, load_mask, load_probmap, save_image, save_mask, save_probmap, sibling_path, stem_of};
use hacseg_core::targets::prune_targets;
use hacseg_core::{BinaryMask, RasterImage};
use hacseg_net::trainer::{
    hash_paths, probmaps, run_stage1, run_stage2, run_stage3, Labeled, RunManifest, SplitHashes, StageId, StageReport,
    TrainPlan,
};
use hacseg_net::{checkpoint, HacConfig, ParamStore};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, StageSection};
use crate::data::{self, Source};
use crate::error::CliError;
use crate::{Command, TrainArgs};

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Context {
    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

pub fn dispatch(ctx: &Context, cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Profile { input } => profile(ctx, input),
        Command::Targets { input, min_path } => targets(ctx, &input, min_path),
        Command::Augment { input, spec, mode } => augment(ctx, &input, spec.as_deref(), mode.as_deref()),
        Command::Pretrain { train, init } => pretrain(ctx, train, init.as_deref()),
        Command::TrainAttn { train, init } => train_attn(ctx, train, init.as_deref()),
        Command::TrainHac { train, attn_ckpt } => train_hac(ctx, train, attn_ckpt.as_deref()),
        Command::Eval { pred, gt, fov, threshold } => eval(ctx, &pred, &gt, fov.as_deref(), threshold),
        Command::Infer { ckpt, input } => infer(ctx, &ckpt, &input),
        Command::Overlay { input, prob, threshold } => overlay(ctx, &input, &prob, threshold),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn profile(ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let manifest = input
        .or_else(|| (!ctx.cfg.profile.manifest.is_empty()).then(|| PathBuf::from(&ctx.cfg.profile.manifest)))
        .ok_or_else(|| CliError::config("profile needs --in or profile.manifest"))?;
    let entries = data::entries(&ctx.cfg, &manifest)?;
    let report = profile_dataset(&entries, &ctx.cfg.profile_options());
    for r in &report.per_frame {
        if let Some(e) = &r.error {
            log::warn!("{}: {e}", r.image.display());
        }
    }
    if report.per_frame.iter().all(|r| r.profile.is_none()) {
        return Err(CliError::data("no frame could be profiled"));
    }
    let dir = ctx.out_dir()?;
    write_json(&dir.join("profile.json"), &report)?;
    std::fs::write(dir.join("profile_table.csv"), report.to_table_csv())?;
    Ok(())
}

fn targets(ctx: &Context, input: &Path, min_path: Option<usize>) -> Result<(), CliError> {
    let min_path = min_path.unwrap_or(ctx.cfg.targets.min_path);
    let dir = ctx.out_dir()?;
    let masks: Vec<PathBuf> = data::entries(&ctx.cfg, input)?
        .into_iter()
        .map(|e| e.mask.unwrap_or(e.image))
        .collect();
    masks.par_iter().try_for_each(|m| {
        let g = load_mask(m)?;
        save_mask(&prune_targets(&g, min_path), sibling_path(&dir, &stem_of(m), "mstar"))?;
        Ok(())
    })
}

#[derive(Serialize)]
struct AugmentSidecar<'a> {
    source: &'a Path,
    spec: &'a CorruptionSpec,
    provenance: Provenance,
}

fn augment(ctx: &Context, input: &Path, spec_file: Option<&Path>, mode: Option<&str>) -> Result<(), CliError> {
    let mut spec = match spec_file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read spec {}: {e}", p.display())))?;
            toml::from_str::<CorruptionSpec>(&text)
                .map_err(|e| CliError::config(format!("invalid corruption spec: {}", e.message())))?
        }
        None => ctx.cfg.corruption.clone(),
    };
    if let Some(m) = mode {
        spec.mode = m.parse().map_err(|e: hacseg_core::augment::SpecError| CliError::config(e.to_string()))?;
    }
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    let dir = ctx.out_dir()?;
    let entries = data::entries(&ctx.cfg, input)?;
    let count = ctx.cfg.augment.count.max(1);
    entries.par_iter().enumerate().try_for_each(|(i, e)| {
        let img = data::frame(&ctx.cfg, &e.image)?;
        let stem = stem_of(&e.image);
        for k in 0..count {
            let s = CorruptionSpec {
                seed: frame_seed(spec.seed, (i * count + k) as u64),
                ..spec.clone()
            };
            let (out, provenance) = corrupt(&img, &s);
            let name = if count == 1 { format!("{stem}_aug") } else { format!("{stem}_aug{k}") };
            save_image(&out, dir.join(format!("{name}.png")))?;
            let side = AugmentSidecar {
                source: &e.image,
                spec: &s,
                provenance,
            };
            write_json(&dir.join(format!("{name}.json")), &side)?;
        }
        Ok(())
    })
}

fn plan_for(ctx: &Context, stage: StageId, section: &StageSection, args: &TrainArgs) -> Result<TrainPlan, CliError> {
    let mut plan = match stage {
        StageId::Pretrain => TrainPlan::stage1(),
        StageId::Attention => TrainPlan::stage2(),
        StageId::Refine => TrainPlan::stage3(),
    };
    plan.epochs = args.epochs.unwrap_or(section.epochs);
    plan.warmup_epochs = section.warmup_epochs;
    plan.base_lr = args.lr.unwrap_or(section.lr);
    plan.patience = (section.patience > 0).then_some(section.patience);
    plan.max_iters = args.max_iters.or((section.max_iters > 0).then_some(section.max_iters));
    plan.min_path_px = section.min_path;
    plan.adam = ctx.cfg.adamw.into();
    plan.corruption = ctx.cfg.corruption.clone();
    plan.seed = ctx.seed;
    plan.weights = match stage {
        StageId::Refine => ctx.cfg.hac_loss.into(),
        _ => ctx.cfg.attn_loss.into(),
    };
    plan.validate()?;
    Ok(plan)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    effective_config: &'a RunConfig,
    run: RunManifest,
}

fn finish(
    ctx: &Context,
    p: &ParamStore,
    name: &str,
    plan: TrainPlan,
    report: StageReport,
    splits: Option<SplitHashes>,
    held_out: usize,
) -> Result<(), CliError> {
    let dir = ctx.out_dir()?;
    checkpoint::save(p, dir.join(format!("{name}.hacw")), &format!("stage {}", plan.stage.number()))?;
    let run = RunManifest {
        config: p.config().clone(),
        seed: ctx.seed,
        plan,
        splits,
        validation_held_out: held_out,
        report,
    };
    write_json(
        &dir.join(format!("{name}_run.json")),
        &RunRecord {
            effective_config: &ctx.cfg,
            run,
        },
    )
}

fn init_params(ctx: &Context, cfg: &HacConfig, init: Option<&Path>) -> Result<ParamStore, CliError> {
    match init {
        Some(path) => Ok(checkpoint::load(path, Some(cfg))?.0),
        None => Ok(ParamStore::init(cfg, ctx.seed)?),
    }
}

fn pretrain(ctx: &Context, args: TrainArgs, init: Option<&Path>) -> Result<(), CliError> {
    let cfg = ctx.cfg.model_config()?;
    let section = &ctx.cfg.pretrain;
    let plan = plan_for(ctx, StageId::Pretrain, section, &args)?;
    let source = Source::resolve(args.input.clone(), &section.manifest, args.synthetic.unwrap_or(section.synthetic))?;
    let (frames, paths) = source.load_frames(&ctx.cfg, cfg.image_size, ctx.seed)?;
    let p = init_params(ctx, &cfg, init)?;
    let report = run_stage1(&p, &plan, &frames)?;
    let splits = paths.map(|paths| SplitHashes {
        unlabeled: hash_paths(paths.iter()),
        train: hash_paths(std::iter::empty()),
        validation: hash_paths(std::iter::empty()),
        test: hash_paths(std::iter::empty()),
    });
    finish(ctx, &p, "pretrain", plan, report, splits, 0)
}

/// Seeded hold-out of `n` validation frames; returns (train, validation, split hashes).
fn hold_out(
    frames: Vec<Labeled>,
    paths: Option<Vec<PathBuf>>,
    n: usize,
    seed: u64,
) -> Result<(Vec<Labeled>, Vec<Labeled>, Option<SplitHashes>), CliError> {
    if n >= frames.len() {
        return Err(CliError::config(format!(
            "validation hold-out {n} leaves no training frames out of {}",
            frames.len()
        )));
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frame_seed(seed, i as u64));
    let is_val: Vec<bool> = {
        let mut v = vec![false; frames.len()];
        for &i in &order[..n] {
            v[i] = true;
        }
        v
    };
    let splits = paths.map(|paths| {
        let pick = |want: bool| paths.iter().zip(&is_val).filter(move |(_, &v)| v == want).map(|(p, _)| p);
        SplitHashes {
            unlabeled: hash_paths(std::iter::empty()),
            train: hash_paths(pick(false)),
            validation: hash_paths(pick(true)),
            test: hash_paths(std::iter::empty()),
        }
    });
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (f, v) in frames.into_iter().zip(is_val) {
        if v {
            val.push(f);
        } else {
            train.push(f);
        }
    }
    Ok((train, val, splits))
}

fn labeled_stage(
    ctx: &Context,
    stage: StageId,
    args: TrainArgs,
    p: ParamStore,
    name: &str,
) -> Result<(), CliError> {
    let section = match stage {
        StageId::Attention => &ctx.cfg.train_attn,
        _ => &ctx.cfg.train_hac,
    };
    let plan = plan_for(ctx, stage, section, &args)?;
    let source = Source::resolve(args.input.clone(), &section.manifest, args.synthetic.unwrap_or(section.synthetic))?;
    let (frames, paths) = source.load_labeled(&ctx.cfg, p.config().image_size, ctx.seed)?;
    let (train, val, splits) = hold_out(frames, paths, section.validation, ctx.seed)?;
    let report = match stage {
        StageId::Attention => run_stage2(&p, &plan, &train, &val)?,
        _ => run_stage3(&p, &plan, &train, &val)?,
    };
    let held = val.len();
    finish(ctx, &p, name, plan, report, splits, held)
}

fn train_attn(ctx: &Context, args: TrainArgs, init: Option<&Path>) -> Result<(), CliError> {
    let cfg = ctx.cfg.model_config()?;
    if init.is_none() {
        log::warn!("no pretrained checkpoint given; starting from a fresh initialisation");
    }
    let p = init_params(ctx, &cfg, init)?;
    labeled_stage(ctx, StageId::Attention, args, p, "attn")
}

fn train_hac(ctx: &Context, args: TrainArgs, attn: Option<&Path>) -> Result<(), CliError> {
    let attn = match attn {
        Some(a) if a.exists() => a,
        Some(a) => return Err(CliError::config(format!("missing attention checkpoint: {}", a.display()))),
        None => return Err(CliError::config("missing attention checkpoint (--attn-ckpt)")),
    };
    let cfg = ctx.cfg.model_config()?;
    let p = checkpoint::load(attn, Some(&cfg))?.0;
    labeled_stage(ctx, StageId::Refine, args, p, "hac")
}

#[derive(Serialize)]
struct FrameScore {
    stem: String,
    scores: SegScores,
}

#[derive(Serialize)]
struct EvalReport {
    threshold: f32,
    frames: Vec<FrameScore>,
    mean: Vec<(String, Option<f64>)>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "tif" | "tiff" | "gif")
            )
        })
        .collect();
    out.sort();
    Ok(out)
}

fn find_by_stem(dir: &Path, stem: &str, suffixes: &[&str]) -> Option<PathBuf> {
    let files = image_files(dir).ok()?;
    suffixes.iter().find_map(|s| {
        let want = if s.is_empty() { stem.to_string() } else { format!("{stem}_{s}") };
        files.iter().find(|f| stem_of(f) == want).cloned()
    })
}

fn eval(ctx: &Context, pred: &Path, gt: &Path, fov: Option<&Path>, threshold: Option<f32>) -> Result<(), CliError> {
    let t = threshold.unwrap_or(ctx.cfg.eval.threshold);
    if !(0.0..=1.0).contains(&t) {
        return Err(CliError::config(format!("threshold {t} outside [0, 1]")));
    }
    let gts = image_files(gt)?;
    if gts.is_empty() {
        return Err(CliError::data(format!("{}: no annotation images", gt.display())));
    }
    let frames = gts
        .par_iter()
        .map(|g| {
            let stem = stem_of(g);
            let p = find_by_stem(pred, &stem, &["phac", ""])
                .ok_or_else(|| CliError::data(format!("no prediction for {stem} in {}", pred.display())))?;
            let gt_mask = load_mask(g)?;
            let pm = load_probmap(&p)?;
            let roi = match fov {
                Some(d) => {
                    let f = find_by_stem(d, &stem, &["", "fov", "mask"])
                        .ok_or_else(|| CliError::data(format!("no FOV mask for {stem} in {}", d.display())))?;
                    load_mask(f)?
                }
                None => BinaryMask::filled(gt_mask.width(), gt_mask.height(), true),
            };
            let scores = score(&pm.threshold(t), &gt_mask, &roi)?;
            Ok(FrameScore { stem, scores })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let names = SegScores::default().named().map(|(n, _)| n);
    let mean = names
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let vals: Vec<f64> = frames.iter().filter_map(|f| f.scores.named()[k].1).collect();
            (n.to_string(), (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    let report = EvalReport { threshold: t, frames, mean };
    let path = match &ctx.out {
        Some(o) if o.extension().is_some_and(|e| e == "json") => {
            if let Some(parent) = o.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            o.clone()
        }
        _ => ctx.out_dir()?.join("eval.json"),
    };
    write_json(&path, &report)
}

fn infer(ctx: &Context, ckpt: &Path, input: &Path) -> Result<(), CliError> {
    let stem = ctx
        .out
        .clone()
        .ok_or_else(|| CliError::config("infer needs --out <stem>"))?;
    let (p, _) = checkpoint::load(ckpt, None)?;
    let img = data::frame(&ctx.cfg, input)?;
    let size = p.config().image_size;
    if img.dims() != (size, size) {
        let (w, h) = img.dims();
        return Err(CliError::data(format!("frame is {w}x{h}, checkpoint expects {size}x{size}")));
    }
    let (pa, pu, phac) = probmaps(&p, &img)?;
    if let Some(parent) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let base = stem.to_string_lossy().into_owned();
    for (suffix, map) in [("pa", &pa), ("pu", &pu), ("phac", &phac)] {
        save_probmap(map, format!("{base}_{suffix}.png"))?;
    }
    Ok(())
}

/// Blend `color` into every pixel where `prob >= threshold`.
pub fn composite(img: &RasterImage, prob: &hacseg_core::ProbMap, threshold: f32, color: [u8; 3], alpha: f32) -> RasterImage {
    let mask = prob.threshold(threshold);
    let c = color.map(|v| v as f32 / 255.0);
    let mut out = img.clone();
    for (x, y) in mask.iter_set() {
        let p = img.pixel(x, y);
        out.set_pixel(x, y, [0, 1, 2].map(|k| (1.0 - alpha) * p[k] + alpha * c[k]));
    }
    out
}

fn overlay(ctx: &Context, input: &Path, prob: &Path, threshold: Option<f32>) -> Result<(), CliError> {
    let o = &ctx.cfg.overlay;
    let t = threshold.unwrap_or(o.threshold);
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&o.alpha) {
        return Err(CliError::config("overlay threshold and alpha must lie in [0, 1]"));
    }
    let img = load_image(input)?;
    let pm = load_probmap(prob)?;
    if pm.dims() != img.dims() {
        let ((a, b), (c, d)) = (img.dims(), pm.dims());
        return Err(CliError::data(format!("frame is {a}x{b}, probability map {c}x{d}")));
    }
    let out = composite(&img, &pm, t, o.color, o.alpha);
    save_image(&out, sibling_path(&ctx.out_dir()?, &stem_of(input), "overlay"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hacseg_core::ProbMap;

    #[test]
    fn composite_only_touches_vessels() {
        let img = RasterImage::filled(2, 1, [0.2, 0.4, 0.6]);
        let pm = ProbMap::from_vec(2, 1, vec![0.5, 0.49]).unwrap();
        let out = composite(&img, &pm, 0.5, [255, 0, 0], 1.0);
        assert_eq!(out.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(out.pixel(1, 0), img.pixel(1, 0));
    }

    #[test]
    fn hold_out_is_seeded_and_disjoint() {
        let frames: Vec<Labeled> = hacseg_core::synth::make_synthetic_dataset(6, 16, 3)
            .into_iter()
            .map(Into::into)
            .collect();
        let paths: Vec<PathBuf> = (0..6).map(|i| PathBuf::from(format!("f{i}.png"))).collect();
        let (t1, v1, h1) = hold_out(frames.clone(), Some(paths.clone()), 2, 7).unwrap();
        let (t2, v2, h2) = hold_out(frames.clone(), Some(paths), 2, 7).unwrap();
        assert_eq!((t1.len(), v1.len()), (4, 2));
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert_eq!(h1, h2);
        assert!(v1.iter().all(|v| !t1.contains(v)));
        assert!(hold_out(frames, None, 6, 7).is_err());
    }
}
