//! Evaluation protocols: repeated-context Dice, context-size sweeps, the
//! annotation-time model and the interactive adapter.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{workers, Dataset};
use crate::error::{Error, Result};
use crate::nn::{ModelState, Prediction};
use crate::prompt::{default_point_radius, render_box, render_point, simulate_prompts, BoundingBox2D, PointPrompt, PromptSpec};
use crate::synth::mix_seed;
use crate::volume::{dice, ContextSet, Mask3D, PromptChannel, PromptType, Shape3, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub n_runs: usize,
    #[serde(rename = "L")]
    pub context_size: usize,
    #[serde(rename = "P")]
    pub prompts_per_image: usize,
    pub prompt_type: PromptType,
    pub seed: u64,
    pub threshold: f64,
    pub jitter: bool,
    pub point_radius: Option<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_runs: 8,
            context_size: 8,
            prompts_per_image: 2,
            prompt_type: PromptType::Box,
            seed: 0,
            threshold: 0.5,
            jitter: true,
            point_radius: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(Error::config("eval.n_runs", "must be at least 1"));
        }
        if self.context_size < 1 {
            return Err(Error::config("eval.L", "must be at least 1"));
        }
        if self.prompts_per_image < 1 {
            return Err(Error::config("eval.P", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::config("eval.threshold", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A target image to segment, identified by family and sample index.
#[derive(Debug, Clone, Copy)]
pub struct TargetRef<'a> {
    pub family: usize,
    pub index: usize,
    pub image: &'a Volume3D<f32>,
}

/// Anything that turns a prompted context set into binary masks for targets.
pub trait Segmenter: Sync {
    fn segment(&self, ctx: &ContextSet<f32>, targets: &[TargetRef<'_>], threshold: f64) -> Result<Vec<Mask3D>>;
}

impl Segmenter for ModelState<f32> {
    fn segment(&self, ctx: &ContextSet<f32>, targets: &[TargetRef<'_>], threshold: f64) -> Result<Vec<Mask3D>> {
        let fused = self.fuse_context(ctx)?;
        let tau = threshold as f32;
        let one = |t: &TargetRef<'_>| self.predict_fused(t.image, &fused).map(|p| p.scores.threshold(tau));
        let n = workers().min(targets.len());
        if n <= 1 {
            return targets.iter().map(one).collect();
        }
        let chunk = targets.len().div_ceil(n);
        std::thread::scope(|s| {
            let handles: Vec<_> =
                targets.chunks(chunk).map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>())).collect();
            let mut out = Vec::with_capacity(targets.len());
            for h in handles {
                out.extend(h.join().expect("prediction worker panicked")?);
            }
            Ok(out)
        })
    }
}

/// Returns the reference masks; an upper bound for harness checks.
pub struct OracleSegmenter<'a>(pub &'a Dataset);

impl Segmenter for OracleSegmenter<'_> {
    fn segment(&self, _: &ContextSet<f32>, targets: &[TargetRef<'_>], _: f64) -> Result<Vec<Mask3D>> {
        targets.iter().map(|t| self.0.sample(t.family, t.index).map(|(_, m)| m)).collect()
    }
}

/// Predicts all-foreground or all-background regardless of input.
pub struct ConstantSegmenter(pub bool);

impl Segmenter for ConstantSegmenter {
    fn segment(&self, _: &ContextSet<f32>, targets: &[TargetRef<'_>], _: f64) -> Result<Vec<Mask3D>> {
        Ok(targets
            .iter()
            .map(|t| {
                let s = t.image.shape();
                Mask3D::new(s, vec![u8::from(self.0); s.len()]).expect("binary data")
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompt_type: PromptType,
    #[serde(rename = "L")]
    pub context_size: usize,
    #[serde(rename = "P")]
    pub prompts_per_image: usize,
    /// Mean Dice over all evaluation targets, one entry per run.
    pub per_run: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the per-run means.
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    fn from_runs(protocol: &EvalProtocol, per_run: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_run);
        EvalReport {
            prompt_type: protocol.prompt_type,
            context_size: protocol.context_size,
            prompts_per_image: protocol.prompts_per_image,
            per_run,
            mean,
            std,
        }
    }
}

/// Seed that selects run `run`'s context set for `family`.
///
/// Independent of `L` and `P`: the context for a smaller `L` is a prefix of
/// the one for a larger `L`, and each context image's prompts for a smaller
/// `P` are a subset of those for a larger `P`. Sweep cells are therefore
/// paired.
fn run_seed(seed: u64, family: usize, run: usize) -> u64 {
    mix_seed(mix_seed(seed, family as u64), run as u64)
}

fn context_for_run(data: &Dataset, family: usize, protocol: &EvalProtocol, run: usize) -> Result<ContextSet<f32>> {
    let pool = &data.families()[family].split.pool;
    if pool.len() < protocol.context_size {
        return Err(Error::InsufficientSamples { needed: protocol.context_size, available: pool.len() });
    }
    let seed = run_seed(protocol.seed, family, run);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = pool.clone();
    for i in 0..protocol.context_size {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let pairs = order[..protocol.context_size]
        .iter()
        .map(|&idx| {
            let (x, y) = data.sample(family, idx)?;
            let spec = PromptSpec {
                prompt_type: protocol.prompt_type,
                prompts_per_image: protocol.prompts_per_image,
                jitter_enabled: protocol.jitter,
                rng_seed: mix_seed(seed, 1 + idx as u64),
                point_radius: protocol.point_radius,
            };
            Ok((x, simulate_prompts(&y, &spec)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ContextSet::new(pairs, protocol.prompt_type)
}

/// Runs the repeated-context protocol on `families`.
///
/// Evaluation targets are each family's fixed eval split; every run draws a
/// fresh context set from the family's pool. A run's score is the mean Dice
/// over all targets of all families.
pub fn evaluate(seg: &dyn Segmenter, data: &Dataset, families: &[usize], protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    if families.is_empty() {
        return Err(Error::config("eval.families", "no families to evaluate"));
    }
    let mut targets = Vec::new();
    for &f in families {
        let entry = &data.families()[f];
        if entry.split.eval.iter().any(|i| entry.split.pool.contains(i)) {
            return Err(Error::config("eval.split", format!("family {} has eval targets inside its context pool", entry.name)));
        }
        let items = entry.split.eval.iter().map(|&i| data.sample(f, i).map(|s| (i, s))).collect::<Result<Vec<_>>>()?;
        targets.push((f, items));
    }
    let mut per_run = Vec::with_capacity(protocol.n_runs);
    for run in 0..protocol.n_runs {
        let mut scores = Vec::new();
        for (f, items) in &targets {
            let ctx = context_for_run(data, *f, protocol, run)?;
            let refs: Vec<TargetRef<'_>> =
                items.iter().map(|(i, (x, _))| TargetRef { family: *f, index: *i, image: x }).collect();
            let preds = seg.segment(&ctx, &refs, protocol.threshold)?;
            for (pred, (_, (_, y))) in preds.iter().zip(items) {
                scores.push(dice(pred, y)?);
            }
        }
        per_run.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    Ok(EvalReport::from_runs(protocol, per_run))
}

pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [1, 2, 4, 8, 16];
pub const DEFAULT_SWEEP_PROMPTS: [usize; 3] = [1, 2, 5];

/// Evaluates the full `sizes × prompts` grid under the protocol's seed.
pub fn context_size_sweep(
    seg: &dyn Segmenter,
    data: &Dataset,
    families: &[usize],
    sizes: &[usize],
    prompts: &[usize],
    protocol: &EvalProtocol,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(sizes.len() * prompts.len());
    for &l in sizes {
        for &p in prompts {
            let cell = EvalProtocol { context_size: l, prompts_per_image: p, ..protocol.clone() };
            out.push(evaluate(seg, data, families, &cell)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Point,
    Box,
    Mask2d,
    Mask3d,
}

impl From<PromptType> for AnnotationKind {
    fn from(t: PromptType) -> Self {
        match t {
            PromptType::Box => AnnotationKind::Box,
            PromptType::Point => AnnotationKind::Point,
        }
    }
}

impl FromStr for AnnotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(AnnotationKind::Point),
            "box" => Ok(AnnotationKind::Box),
            "mask2d" => Ok(AnnotationKind::Mask2d),
            "mask3d" => Ok(AnnotationKind::Mask3d),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnnotationKind::Point => "point",
            AnnotationKind::Box => "box",
            AnnotationKind::Mask2d => "mask2d",
            AnnotationKind::Mask3d => "mask3d",
        })
    }
}

/// Seconds to produce one annotation of each kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencyModel {
    pub t_point: u64,
    pub t_box: u64,
    pub t_mask2d: u64,
    pub t_mask3d: u64,
}

impl Default for EfficiencyModel {
    fn default() -> Self {
        EfficiencyModel { t_point: 5, t_box: 10, t_mask2d: 80, t_mask3d: 1600 }
    }
}

impl EfficiencyModel {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("t_point", self.t_point), ("t_box", self.t_box), ("t_mask2d", self.t_mask2d), ("t_mask3d", self.t_mask3d)] {
            if v == 0 {
                return Err(Error::config(format!("efficiency.{key}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Annotation seconds for a context set of `l` images with `p` annotations
/// each (`p` is ignored for 3D masks: one dense mask per image).
pub fn annotation_time(kind: AnnotationKind, l: u64, p: u64, model: &EfficiencyModel) -> Result<u64> {
    model.validate()?;
    if l < 1 || p < 1 {
        return Err(Error::config("annotation_time", "L and P must be at least 1"));
    }
    let overflow = || Error::config("annotation_time", "result overflows u64");
    let per = match kind {
        AnnotationKind::Point => model.t_point,
        AnnotationKind::Box => model.t_box,
        AnnotationKind::Mask2d => model.t_mask2d,
        AnnotationKind::Mask3d => return l.checked_mul(model.t_mask3d).ok_or_else(overflow),
    };
    l.checked_mul(p).and_then(|n| n.checked_mul(per)).ok_or_else(overflow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prompt_type: PromptType,
    #[serde(rename = "L")]
    pub context_size: usize,
    #[serde(rename = "P")]
    pub prompts_per_image: usize,
    pub run: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub prompt_type: AnnotationKind,
    #[serde(rename = "L")]
    pub context_size: usize,
    #[serde(rename = "P")]
    pub prompts_per_image: usize,
    pub seconds: u64,
    pub mean_dice: f64,
}

pub fn sweep_rows(reports: &[EvalReport]) -> Vec<SweepRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.per_run.iter().enumerate().map(move |(run, &d)| SweepRow {
                prompt_type: r.prompt_type,
                context_size: r.context_size,
                prompts_per_image: r.prompts_per_image,
                run,
                mean_dice: d,
            })
        })
        .collect()
}

/// Regroups per-run rows into one report per `(prompt_type, L, P)` cell.
pub fn reports_from_rows(rows: &[SweepRow]) -> Vec<EvalReport> {
    let mut cells: BTreeMap<(String, usize, usize), (PromptType, Vec<(usize, f64)>)> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.prompt_type.to_string(), r.context_size, r.prompts_per_image))
            .or_insert_with(|| (r.prompt_type, Vec::new()))
            .1
            .push((r.run, r.mean_dice));
    }
    cells
        .into_iter()
        .map(|((_, l, p), (prompt_type, mut runs))| {
            runs.sort_by_key(|&(run, _)| run);
            let per_run: Vec<f64> = runs.into_iter().map(|(_, d)| d).collect();
            let (mean, std) = mean_std(&per_run);
            EvalReport { prompt_type, context_size: l, prompts_per_image: p, per_run, mean, std }
        })
        .collect()
}

/// One row per sweep cell: annotation cost against achieved Dice.
pub fn efficiency_table(reports: &[EvalReport], model: &EfficiencyModel) -> Result<Vec<EfficiencyRow>> {
    reports
        .iter()
        .map(|r| {
            let kind = AnnotationKind::from(r.prompt_type);
            Ok(EfficiencyRow {
                prompt_type: kind,
                context_size: r.context_size,
                prompts_per_image: r.prompts_per_image,
                seconds: annotation_time(kind, r.context_size as u64, r.prompts_per_image as u64, model)?,
                mean_dice: r.mean,
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format { path: path.to_path_buf(), reason: format!("{other:?}") },
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// A user-supplied prompt with explicit voxel coordinates (slice along axis 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum UserPrompt {
    Box { slice: usize, row_min: usize, row_max: usize, col_min: usize, col_max: usize },
    Point { slice: usize, row: usize, col: usize, radius: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub prompts: Vec<UserPrompt>,
}

/// Renders explicit prompts; each must be in bounds and of the model's type.
pub fn render_user_prompts(shape: Shape3, prompts: &[UserPrompt], prompt_type: PromptType) -> Result<PromptChannel<f32>> {
    if prompts.is_empty() {
        return Err(Error::config("prompts", "at least one prompt is required"));
    }
    let mut channel = PromptChannel::zeros(shape);
    for (i, p) in prompts.iter().enumerate() {
        let key = format!("prompts[{i}]");
        match *p {
            UserPrompt::Box { slice, row_min, row_max, col_min, col_max } => {
                if prompt_type != PromptType::Box {
                    return Err(Error::PromptTypeMismatch { expected: prompt_type.to_string(), actual: "box".into() });
                }
                if slice >= shape.d() || row_max >= shape.h() || col_max >= shape.w() || row_min > row_max || col_min > col_max {
                    return Err(Error::config(key, format!("box out of bounds or inverted for shape {:?}", shape.0)));
                }
                render_box(&mut channel, &BoundingBox2D { slice_index: slice, row_min, row_max, col_min, col_max });
            }
            UserPrompt::Point { slice, row, col, radius } => {
                if prompt_type != PromptType::Point {
                    return Err(Error::PromptTypeMismatch { expected: prompt_type.to_string(), actual: "point".into() });
                }
                if slice >= shape.d() || row >= shape.h() || col >= shape.w() {
                    return Err(Error::config(key, format!("point out of bounds for shape {:?}", shape.0)));
                }
                let radius_voxels = radius.unwrap_or_else(|| default_point_radius(shape));
                if !(radius_voxels > 0.0 && radius_voxels.is_finite()) {
                    return Err(Error::config(key, "radius must be positive"));
                }
                render_point(&mut channel, &PointPrompt { slice_index: slice, row, col, radius_voxels });
            }
        }
    }
    Ok(channel)
}

/// Interactive use: the image is its own single-element context, prompted by
/// the user.
pub fn interactive_predict(state: &ModelState<f32>, x: &Volume3D<f32>, u: &PromptChannel<f32>) -> Result<Prediction<f32>> {
    let ctx = ContextSet::new(vec![(x.clone(), u.clone())], state.config.prompt_type)?;
    state.forward_icl(x, &ctx)
}
