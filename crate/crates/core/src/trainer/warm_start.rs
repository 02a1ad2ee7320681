//! Supervised warm start on scripted trajectories.
//!
//! The toy model starts from random weights, so before reinforcement
//! learning it is taught the turn protocol by teacher forcing: think spans of
//! two lengths, answers with and without an evidence insertion. A contrastive
//! term on the middle-layer matching space pulls the question's content
//! words towards the patches of the object the question is about.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamParams};
use super::replay::Replay;
use super::batch_indices;
use crate::error::Result;
use crate::grounding::{
    alignment_loss, expand_region, extract_snapshot, mid_layer_average, score_patch_values, select_region,
    DiscoveryParams, EvidenceSnapshot,
};
use crate::metrics::BBox;
use crate::numerics::{log_softmax, RngStream, Scalar};
use crate::rollout::{prompt_text, Suffix};
use crate::saliency::StopWords;
use crate::synth_data::{QuestionKind, Sample};
use crate::toy_vlm::{Model, Slot, TokenId, EVIDENCE_CLOSE, EVIDENCE_OPEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamParams,
    /// Weight of the grounding term; 0 disables it.
    pub align_weight: f64,
    pub align_tau: f64,
    /// Probability that a scripted trajectory inserts evidence.
    pub p_insert: f64,
    /// Probability that its think spans are long enough for the action reward.
    pub p_long: f64,
    pub seed: u64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch: 16,
            adam: AdamParams::default(),
            align_weight: 1.0,
            align_tau: 0.1,
            p_insert: 0.5,
            p_long: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub insert: bool,
    pub long: bool,
}

/// Generated text of a scripted trajectory: the first turn (its think span
/// is opened by the prompt) and, with insertion, the turn after the evidence.
pub fn script_text(sample: &Sample, script: Script) -> (String, Option<String>) {
    let answer = format!("<answer> {} </answer>", sample.gold_answer);
    let objects = sample.mentioned_objects();
    let a = objects.first().map_or("object", |g| g.object.as_str());
    let (think1, think2) = match (sample.kind, script.long) {
        (QuestionKind::Color, true) => {
            (format!("find the {a} and look at its color in the image"), format!("the evidence shows the {a} color"))
        }
        (QuestionKind::Color, false) => (format!("look at the {a}"), format!("{a} color")),
        (QuestionKind::LeftOf, long) => {
            let b = objects.get(1).map_or("object", |g| g.object.as_str());
            if long {
                (
                    format!("compare the position of the {a} and the {b} in the image"),
                    format!("the evidence shows the {a} position"),
                )
            } else {
                (format!("compare the {a} and {b}"), format!("{a} position"))
            }
        }
    };
    if script.insert {
        (format!("{think1} </think> <insert_evidence>"), Some(format!("<think> {think2} </think> {answer}")))
    } else {
        (format!("{think1} </think> {answer}"), None)
    }
}

/// Teacher-forcing sequence for a script. Log-probabilities are left at 0.
pub fn scripted_suffix<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    script: Script,
    snapshot: Option<&EvidenceSnapshot<T>>,
) -> Suffix<T> {
    let v = model.vocab();
    let (t1, t2) = script_text(sample, script);
    let mut slots = Vec::new();
    let mut fixed = Vec::new();
    let mut targets = Vec::new();
    let mut push_text = |slots: &mut Vec<Slot>, text: &str| {
        for id in v.tokenize(text) {
            targets.push((slots.len(), id, 0.0));
            slots.push(Slot::Token(id));
        }
    };
    push_text(&mut slots, &t1);
    if let Some(t2) = t2 {
        slots.push(Slot::Token(v.expect_id(EVIDENCE_OPEN)));
        if let Some(s) = snapshot {
            slots.extend(std::iter::repeat_n(Slot::Fixed, s.n_vectors()));
            fixed.extend_from_slice(&s.embeddings);
        }
        slots.push(Slot::Token(v.expect_id(EVIDENCE_CLOSE)));
        push_text(&mut slots, &t2);
    }
    Suffix { slots, fixed, targets }
}

/// Snapshot grounded on the gold box of the first object the question
/// names, with the same block, k and margin geometry discovery uses.
pub fn gold_snapshot<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    params: &DiscoveryParams,
) -> Result<Option<EvidenceSnapshot<T>>> {
    let Some(target) = sample.mentioned_objects().first().copied() else { return Ok(None) };
    let (vision, grid) = model.embed_image(&sample.image)?;
    let mask = patch_mask(&target.bbox, grid, model.config.patch_size);
    let values: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let blocks = score_patch_values(&values, grid, params.block_size)?;
    let region = select_region(&blocks, params.k, model.config.patch_size)?;
    let region = expand_region(&region, params.margin_blocks, grid, model.config.patch_size);
    let id = model.vocab().expect_id(&target.object);
    Ok(Some(extract_snapshot(&region, &vision, grid, (id, &target.object), params.source_space, model.version)?))
}

/// Patches whose pixel square overlaps `bbox` with positive area.
pub fn patch_mask(bbox: &BBox, grid: (usize, usize), patch_size: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let p = BBox {
                x_min: (c * patch_size) as i64,
                y_min: (r * patch_size) as i64,
                x_max: ((c + 1) * patch_size) as i64,
                y_max: ((r + 1) * patch_size) as i64,
            };
            out.push(p.intersection_area(bbox) > 0);
        }
    }
    out
}

/// Content-word positions of the prompt with the patches each should match:
/// a shape word its own object, any other word the objects the question
/// names.
fn alignment_targets(
    model: &Model<impl Scalar>,
    sample: &Sample,
    prompt_ids: &[TokenId],
    n_vision: usize,
    grid: (usize, usize),
) -> Vec<(usize, Vec<bool>)> {
    let v = model.vocab();
    let stop = StopWords::standard();
    let ps = model.config.patch_size;
    let named = sample.mentioned_objects();
    let mut out = Vec::new();
    for (i, &id) in prompt_ids.iter().enumerate() {
        let word = v.token(id).unwrap_or_default();
        if v.is_control(id) || stop.contains(word) {
            continue;
        }
        let boxes: Vec<&BBox> = match sample.gold_box(word) {
            Some(g) => vec![&g.bbox],
            None => named.iter().map(|g| &g.bbox).collect(),
        };
        if boxes.is_empty() {
            continue;
        }
        let mut mask = vec![false; grid.0 * grid.1];
        for b in boxes {
            for (m, hit) in mask.iter_mut().zip(patch_mask(b, grid, ps)) {
                *m |= hit;
            }
        }
        out.push((n_vision + i, mask));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmStartReport {
    /// `(cross-entropy, alignment)` per step.
    pub losses: Vec<(f64, f64)>,
}

/// Runs the supervised warm start in place.
pub fn warm_start<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    config: &WarmStartConfig,
    discovery: &DiscoveryParams,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<WarmStartReport> {
    let mut adam = Adam::new(model.n_params(), config.adam);
    let root = RngStream::new(config.seed).split("warm-start");
    let mut report = WarmStartReport::default();
    for step in 0..config.steps {
        let batch = batch_indices(samples.len(), config.batch, &mut root.split_index("batch", step as u64));
        let frozen: &Model<T> = model;
        let parts: Vec<(Vec<T>, f64, f64)> = batch
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let mut rng = root.split_index("step", step as u64).split_index("sample", b as u64);
                let script = Script { insert: rng.uniform() < config.p_insert, long: rng.uniform() < config.p_long };
                sample_gradient(frozen, &samples[i], script, config, discovery, batch.len())
            })
            .collect::<Result<_>>()?;
        let mut grads = vec![T::zero(); model.n_params()];
        let (mut ce, mut al) = (0.0, 0.0);
        for (g, c, a) in parts {
            for (x, y) in grads.iter_mut().zip(&g) {
                *x += *y;
            }
            ce += c;
            al += a;
        }
        if grads.iter().all(|g| g.is_finite()) {
            adam.step(&mut model.params, &grads);
            model.version += 1;
        } else {
            log::warn!("non-finite warm-start gradient at step {step}; skipped");
        }
        log::debug!("warm start {step}: ce {ce:.4} align {al:.4}");
        on_step(step, ce, al);
        report.losses.push((ce, al));
    }
    Ok(report)
}

fn sample_gradient<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    script: Script,
    config: &WarmStartConfig,
    discovery: &DiscoveryParams,
    batch: usize,
) -> Result<(Vec<T>, f64, f64)> {
    let mut grads = vec![T::zero(); model.n_params()];
    let prompt_ids = model.tokenize(&prompt_text(&sample.question));
    let snapshot = if script.insert { gold_snapshot(model, sample, discovery)? } else { None };
    let script = Script { insert: script.insert && snapshot.is_some(), ..script };
    let suffix = scripted_suffix(model, sample, script, snapshot.as_ref());
    let mut replay = Replay::new(model, &sample.image, &prompt_ids)?;
    let scale = 1.0 / (suffix.targets.len() as f64 * batch as f64);
    let tokens: Vec<TokenId> = suffix.targets.iter().map(|t| t.1).collect();
    let ce = replay.accumulate(&suffix, &mut grads, |logits| {
        let mut loss = 0.0;
        let mut d = Vec::with_capacity(logits.len());
        for (z, &tok) in logits.iter().zip(&tokens) {
            let ls = log_softmax(z, T::one());
            loss -= ls[tok as usize].to_f64_lossy() * scale;
            let mut dz: Vec<T> = ls.iter().map(|&l| l.exp() * T::of(scale)).collect();
            dz[tok as usize] -= T::of(scale);
            d.push(dz);
        }
        Ok((loss, d))
    })?;

    let mut d_hidden = Vec::new();
    let mut align = 0.0;
    if config.align_weight > 0.0 {
        let c = &model.config;
        let d = c.d_model;
        let grid = (c.grid_side(), c.grid_side());
        let n_vision = grid.0 * grid.1;
        let targets = alignment_targets(model, sample, &prompt_ids, n_vision, grid);
        if !targets.is_empty() {
            let trace = replay.prefix_trace();
            let layers = discovery.layers.clone().unwrap_or_else(|| c.mid_layer_list());
            let mean = mid_layer_average(&trace.hidden[1..], &layers)?;
            let mut rows = mean[..n_vision * d].to_vec();
            for (pos, _) in &targets {
                rows.extend_from_slice(&mean[pos * d..(pos + 1) * d]);
            }
            let masks: Vec<Vec<bool>> = targets.iter().map(|(_, m)| m.clone()).collect();
            let (loss, d_rows) =
                alignment_loss(&rows, d, n_vision, &masks, T::of(config.align_tau), discovery.center)?;
            let w = config.align_weight / batch as f64;
            align = loss.to_f64_lossy() / batch as f64;
            let per_layer = T::of(w / layers.len() as f64);
            let mut d_mean = vec![T::zero(); trace.n * d];
            for (dst, &src) in d_mean[..n_vision * d].iter_mut().zip(&d_rows[..n_vision * d]) {
                *dst = src * per_layer;
            }
            for (k, (pos, _)) in targets.iter().enumerate() {
                let src = &d_rows[(n_vision + k) * d..(n_vision + k + 1) * d];
                for (dst, &g) in d_mean[pos * d..(pos + 1) * d].iter_mut().zip(src) {
                    *dst += g * per_layer;
                }
            }
            d_hidden = layers.iter().map(|&l| (l, d_mean.clone())).collect();
        }
    }
    replay.finish(d_hidden, &mut grads)?;
    Ok((grads, ce, align))
}
