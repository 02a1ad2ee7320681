//! Evaluation: answer accuracy, the information hit ratio and sweep harnesses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence_cache::EvidenceCache;
use crate::grounding::{
    discover_evidence, effective_k, extract_snapshot, DiscoveryParams, EvidenceSnapshot, PatchBox, Region, SourceSpace,
};
use crate::numerics::{RngStream, Scalar};
use crate::reward::normalize_answer;
use crate::rollout::{prompt_text, run_rollout, RolloutParams, TerminatedBy};
use crate::synth_data::Sample;
use crate::toy_vlm::Model;

/// Half-open pixel rectangle `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(Error::Shape(format!("degenerate box {self:?}")))
        }
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0) * h.max(0)
    }
}

/// 1 when the two boxes share positive area, else 0.
pub fn ihr(pred: &BBox, gt: &BBox) -> Result<u8> {
    pred.validate()?;
    gt.validate()?;
    Ok(u8::from(pred.intersection_area(gt) > 0))
}

/// Ground-truth boxes an anchor is scored against: the shape the anchor names
/// when it names one, otherwise every object the question mentions, otherwise
/// every object in the image.
pub fn gold_boxes_for(sample: &Sample, anchor: &str) -> Vec<BBox> {
    if let Some(g) = sample.gold_box(anchor) {
        return vec![g.bbox];
    }
    let mentioned = sample.mentioned_objects();
    if mentioned.is_empty() {
        sample.gold_boxes.iter().map(|g| g.bbox).collect()
    } else {
        mentioned.into_iter().map(|g| g.bbox).collect()
    }
}

/// 1 when `pred` overlaps any of `gts`.
pub fn ihr_any(pred: &BBox, gts: &[BBox]) -> Result<u8> {
    let mut hit = 0;
    for gt in gts {
        hit = hit.max(ihr(pred, gt)?);
    }
    Ok(hit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhrRecord {
    pub sample_id: String,
    pub anchor: String,
    pub pred: BBox,
    pub hit: u8,
}

/// Scores the matched (pre-expansion) box of a snapshot.
pub fn snapshot_ihr<T: Scalar>(sample: &Sample, snapshot: &EvidenceSnapshot<T>, model: &Model<T>) -> Result<IhrRecord> {
    let grid = (model.config.grid_side(), model.config.grid_side());
    let pred = snapshot.region.matched_patches(grid).to_pixels(model.config.patch_size);
    let hit = ihr_any(&pred, &gold_boxes_for(sample, &snapshot.anchor_token))?;
    Ok(IhrRecord { sample_id: sample.sample_id.clone(), anchor: snapshot.anchor_token.clone(), pred, hit })
}

fn mean_hit(records: &[IhrRecord]) -> f64 {
    if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| f64::from(r.hit)).sum::<f64>() / records.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layers: Vec<usize>,
    pub mean_ihr: f64,
    pub pairs: usize,
}

/// Mean IHR over (sample, anchor) pairs for each layer choice. `grounder`
/// returns the anchor token and predicted pixel box for every anchor it
/// grounds in a sample.
pub fn layer_sweep_with<F>(samples: &[Sample], layer_choices: &[Vec<usize>], grounder: F) -> Result<Vec<LayerRow>>
where
    F: Fn(&Sample, &[usize]) -> Result<Vec<(String, BBox)>> + Sync,
{
    layer_choices
        .iter()
        .map(|layers| {
            let per_sample: Vec<Vec<IhrRecord>> = samples
                .par_iter()
                .map(|s| {
                    grounder(s, layers)?
                        .into_iter()
                        .map(|(anchor, pred)| {
                            let hit = ihr_any(&pred, &gold_boxes_for(s, &anchor))?;
                            Ok(IhrRecord { sample_id: s.sample_id.clone(), anchor, pred, hit })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            let records: Vec<IhrRecord> = per_sample.into_iter().flatten().collect();
            Ok(LayerRow { layers: layers.clone(), mean_ihr: mean_hit(&records), pairs: records.len() })
        })
        .collect()
}

/// Layer sweep using the model's own grounding with top-1 block selection.
pub fn layer_sweep<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    layer_choices: &[Vec<usize>],
    params: &DiscoveryParams,
) -> Result<Vec<LayerRow>> {
    layer_sweep_with(samples, layer_choices, |s, layers| {
        let p = DiscoveryParams { k: 1, layers: Some(layers.to_vec()), ..params.clone() };
        discover_evidence(model, &s.image, &prompt_text(&s.question), &p)?
            .iter()
            .map(|snap| snapshot_ihr(s, snap, model).map(|r| (r.anchor, r.pred)))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub insertions: usize,
    pub failed_insertions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub insertion_rate: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    fn from_records(records: Vec<EvalRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let accuracy = records.iter().filter(|r| r.correct).count() as f64 / n;
        let insertion_rate = records.iter().filter(|r| r.insertions > 0).count() as f64 / n;
        Self { accuracy, insertion_rate, records }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub rollout: RolloutParams,
    pub discovery: DiscoveryParams,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            rollout: RolloutParams { temperature: 0.0, ..RolloutParams::default() },
            discovery: DiscoveryParams::default(),
            seed: 0,
        }
    }
}

/// Whether `predicted` matches `gold` after answer normalization.
pub fn answer_matches(predicted: Option<&str>, gold: &str) -> bool {
    predicted.is_some_and(|p| normalize_answer(p) == normalize_answer(gold))
}

/// Runs one rollout per sample against a prepared evidence cache.
pub fn evaluate_with_cache<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    cache: &EvidenceCache<T>,
    rollout: &RolloutParams,
    seed: u64,
) -> Result<EvalReport> {
    let root = RngStream::new(seed).split("eval");
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = root.split_index("sample", i as u64);
            let traj = run_rollout(model, s, cache, rollout, &mut rng)?;
            let answered = traj.terminated_by == TerminatedBy::Answer;
            let predicted = if answered { traj.final_answer.clone() } else { None };
            Ok(EvalRecord {
                sample_id: s.sample_id.clone(),
                correct: answer_matches(predicted.as_deref(), &s.gold_answer),
                predicted,
                gold: s.gold_answer.clone(),
                insertions: traj.insertion_count,
                failed_insertions: traj.failed_insertions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(records))
}

/// Discovers evidence with the current weights, then evaluates.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], params: &EvalParams) -> Result<EvalReport> {
    let cache = EvidenceCache::populate(samples, model, &params.discovery)?;
    evaluate_with_cache(model, samples, &cache, &params.rollout, params.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub effective_k: usize,
    pub clamped: bool,
    pub accuracy: f64,
    pub insertion_rate: f64,
}

pub fn k_sweep<T: Scalar>(model: &Model<T>, samples: &[Sample], k_values: &[usize], params: &EvalParams) -> Result<Vec<KRow>> {
    let blocks_per_side = model.config.grid_side().div_ceil(params.discovery.block_size.max(1));
    let block_count = blocks_per_side * blocks_per_side;
    k_values
        .iter()
        .map(|&k| {
            let p = EvalParams { discovery: DiscoveryParams { k, ..params.discovery.clone() }, ..params.clone() };
            let report = evaluate(model, samples, &p)?;
            let eff = effective_k(block_count, k);
            Ok(KRow { k, effective_k: eff, clamped: eff != k, accuracy: report.accuracy, insertion_rate: report.insertion_rate })
        })
        .collect()
}

/// A box of the given patch dimensions placed uniformly at random on the grid.
pub fn random_patch_box(rows: usize, cols: usize, grid: (usize, usize), rng: &mut RngStream) -> Result<PatchBox> {
    if rows == 0 || cols == 0 || rows > grid.0 || cols > grid.1 {
        return Err(Error::Shape(format!("{rows}x{cols} box does not fit a {}x{} grid", grid.0, grid.1)));
    }
    let row_min = rng.below(grid.0 - rows + 1);
    let col_min = rng.below(grid.1 - cols + 1);
    Ok(PatchBox { row_min, col_min, row_max: row_min + rows - 1, col_max: col_min + cols - 1 })
}

/// Replaces every discovered snapshot with one of the same size cut from a
/// uniformly random location of the same image, in the same source space.
pub fn randomize_cache<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    discovered: &EvidenceCache<T>,
    seed: u64,
) -> Result<EvidenceCache<T>> {
    let root = RngStream::new(seed).split("ablate");
    let ps = model.config.patch_size;
    let entries: Vec<Option<(String, Vec<EvidenceSnapshot<T>>)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let Some(entry) = discovered.lookup(&s.sample_id) else { return Ok(None) };
            let mut rng = root.split_index("sample", i as u64);
            let (vision, grid) = model.embed_image(&s.image)?;
            let snaps = entry
                .snapshots
                .iter()
                .map(|snap| {
                    let b = snap.region.bbox_patches;
                    let bbox_patches = random_patch_box(b.rows(), b.cols(), grid, &mut rng)?;
                    let region = Region {
                        blocks: Vec::new(),
                        block_size: snap.region.block_size,
                        bbox_patches,
                        bbox_pixels: bbox_patches.to_pixels(ps),
                    };
                    let source: Vec<T> = match snap.source_space {
                        SourceSpace::InputEmbedding => vision.clone(),
                        SourceSpace::MidLayer => {
                            return Err(Error::Config("random ablation supports input-embedding snapshots only".into()))
                        }
                    };
                    extract_snapshot(
                        &region,
                        &source,
                        grid,
                        (snap.anchor_id, &snap.anchor_token),
                        snap.source_space,
                        snap.model_version,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((s.sample_id.clone(), snaps)))
        })
        .collect::<Result<_>>()?;
    let mut cache = EvidenceCache::new();
    for (id, snaps) in entries.into_iter().flatten() {
        cache.upsert(&id, snaps, model.version);
    }
    Ok(cache)
}

/// Evaluation with randomly placed evidence of the discovered sizes.
pub fn ablate_random_embeddings<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    discovered: &EvidenceCache<T>,
    params: &EvalParams,
) -> Result<EvalReport> {
    let random = randomize_cache(model, samples, discovered, params.seed)?;
    evaluate_with_cache(model, samples, &random, &params.rollout, params.seed)
}

pub fn layer_csv(rows: &[LayerRow]) -> String {
    let mut out = String::from("layers,mean_ihr,pairs\n");
    for r in rows {
        let layers: Vec<String> = r.layers.iter().map(usize::to_string).collect();
        out.push_str(&format!("{},{:.6},{}\n", layers.join("+"), r.mean_ihr, r.pairs));
    }
    out
}

pub fn k_csv(rows: &[KRow]) -> String {
    let mut out = String::from("k,effective_k,clamped,accuracy,insertion_rate\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.k, r.effective_k, r.clamped, r.accuracy, r.insertion_rate));
    }
    out
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("sample_id,predicted,gold,correct,insertions,failed_insertions\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id,
            r.predicted.as_deref().unwrap_or(""),
            r.gold,
            u8::from(r.correct),
            r.insertions,
            r.failed_insertions
        ));
    }
    out
}
