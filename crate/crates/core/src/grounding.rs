//! Anchor-to-region grounding and evidence snapshot extraction.
//!
//! Localization happens in the averaged middle-layer representation; the
//! snapshot payload is copied from the input-layer vision embeddings by
//! default, since that is the space inserted vectors are consumed in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::numerics::{argmax, dot, l2_norm, stable_softmax, Scalar};
use crate::saliency::{compute_saliency, select_anchors, Anchor, AnchorPolicy, AnchorSet, StopWords};
use crate::toy_vlm::{BackwardSeed, KvContext, LogitRows, Model, TokenId, TokenStream};
use crate::raster::RgbImage;

/// Mean of `H^(l)` over the given 1-based layers.
pub fn mid_layer_average<T: Scalar>(layers: &[Vec<T>], mid_layers: &[usize]) -> Result<Vec<T>> {
    if mid_layers.is_empty() {
        return Err(Error::Config("mid-layer range is empty".into()));
    }
    if let Some(&bad) = mid_layers.iter().find(|&&l| l == 0 || l > layers.len()) {
        return Err(Error::Config(format!("layer {bad} outside 1..={}", layers.len())));
    }
    let mut out = vec![T::zero(); layers[mid_layers[0] - 1].len()];
    for &l in mid_layers {
        for (o, &x) in out.iter_mut().zip(&layers[l - 1]) {
            *o += x;
        }
    }
    let inv = T::one() / T::of(mid_layers.len() as f64);
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Optionally subtracts the per-coordinate mean across rows, then scales each
/// row to unit length. Rows that end up all-zero stay all-zero.
pub fn normalize_rows<T: Scalar>(vectors: &[T], d: usize, center: bool) -> Vec<T> {
    let mut out = vectors.to_vec();
    if center {
        subtract_row_mean(&mut out, d);
    }
    for row in out.chunks_exact_mut(d) {
        let norm = l2_norm(row);
        // centering leaves rounding residue on rows that should vanish
        if norm <= T::of(1e-12) {
            row.fill(T::zero());
        } else {
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
    }
    out
}

fn subtract_row_mean<T: Scalar>(rows: &mut [T], d: usize) {
    let m = rows.len() / d;
    if m == 0 {
        return;
    }
    let mut mean = vec![T::zero(); d];
    for row in rows.chunks_exact(d) {
        for (a, &x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    let inv = T::one() / T::of(m as f64);
    for row in rows.chunks_exact_mut(d) {
        for (x, &mu) in row.iter_mut().zip(&mean) {
            *x -= mu * inv;
        }
    }
}

/// Backward of [`normalize_rows`]: maps `dL/d out` to `dL/d vectors`.
pub fn normalize_rows_backward<T: Scalar>(vectors: &[T], d: usize, center: bool, d_out: &[T]) -> Vec<T> {
    let mut centered = vectors.to_vec();
    if center {
        subtract_row_mean(&mut centered, d);
    }
    let mut dc = vec![T::zero(); vectors.len()];
    for ((c, dy), out) in centered.chunks_exact(d).zip(d_out.chunks_exact(d)).zip(dc.chunks_exact_mut(d)) {
        let norm = l2_norm(c);
        if norm <= T::of(1e-12) {
            continue;
        }
        let proj = dot(c, dy) / (norm * norm);
        for ((o, &ci), &gi) in out.iter_mut().zip(c).zip(dy) {
            *o = (gi - ci * proj) / norm;
        }
    }
    if center {
        subtract_row_mean(&mut dc, d);
    }
    dc
}

/// Contrastive grounding objective on the matching space. `rows` holds the
/// `n_patches` patch rows followed by one row per anchor; each anchor comes
/// with the set of patches it should match. The loss of one anchor is
/// `-ln Σ_{j∈target} softmax(s/τ)_j`, averaged over anchors. Returns the loss
/// and its gradient with respect to `rows`.
pub fn alignment_loss<T: Scalar>(
    rows: &[T],
    d: usize,
    n_patches: usize,
    targets: &[Vec<bool>],
    tau: T,
    center: bool,
) -> Result<(T, Vec<T>)> {
    let m = rows.len() / d;
    if m != n_patches + targets.len() || targets.iter().any(|t| t.len() != n_patches) {
        return Err(Error::Shape(format!(
            "{m} rows for {n_patches} patches and {} anchors",
            targets.len()
        )));
    }
    let unit = normalize_rows(rows, d, center);
    let (patches, anchors) = unit.split_at(n_patches * d);
    let mut d_unit = vec![T::zero(); unit.len()];
    let mut loss = T::zero();
    let scale = T::one() / T::of(targets.len().max(1) as f64);
    for (a, (q, target)) in anchors.chunks_exact(d).zip(targets).enumerate() {
        if !target.iter().any(|&t| t) {
            continue;
        }
        let sims: Vec<T> = patches.chunks_exact(d).map(|x| dot(q, x)).collect();
        let w = stable_softmax(&sims, tau)?;
        let hit = w.iter().zip(target).filter(|(_, &t)| t).fold(T::zero(), |acc, (&wj, _)| acc + wj);
        loss += -hit.ln() * scale;
        let (dp, da) = d_unit.split_at_mut(n_patches * d);
        let dq = &mut da[a * d..(a + 1) * d];
        for (j, ((&wj, &t), x)) in w.iter().zip(target).zip(patches.chunks_exact(d)).enumerate() {
            let mut g = wj;
            if t {
                g -= wj / hit;
            }
            let g = g / tau * scale;
            for ((dqi, &xi), (dxi, &qi)) in dq.iter_mut().zip(x).zip(dp[j * d..(j + 1) * d].iter_mut().zip(q)) {
                *dqi += g * xi;
                *dxi += g * qi;
            }
        }
    }
    Ok((loss, normalize_rows_backward(rows, d, center, &d_unit)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMap<T> {
    pub anchor_index: usize,
    pub sims: Vec<T>,
    pub weights: Vec<T>,
    pub grid: (usize, usize),
    pub tau: T,
}

/// Cosine similarities of a unit anchor vector against unit patch vectors and
/// their temperature softmax.
pub fn anchor_patch_affinity<T: Scalar>(
    anchor_index: usize,
    anchor: &[T],
    patches: &[T],
    grid: (usize, usize),
    tau: T,
) -> Result<AffinityMap<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("affinity temperature must be > 0, got {tau}")));
    }
    let d = anchor.len();
    if d == 0 || patches.len() != grid.0 * grid.1 * d {
        return Err(Error::Shape(format!(
            "{} patch values do not form a {}x{} grid of width {d}",
            patches.len(),
            grid.0,
            grid.1
        )));
    }
    let sims: Vec<T> =
        patches.chunks_exact(d).map(|x| dot(anchor, x).max(-T::one()).min(T::one())).collect();
    let weights = stable_softmax(&sims, tau)?;
    Ok(AffinityMap { anchor_index, sims, weights, grid, tau })
}

/// Block-level scores over a patch grid tiled into `block_size` squares;
/// edge blocks may be smaller.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores<T> {
    pub patch_grid: (usize, usize),
    pub block_size: usize,
    pub blocks: (usize, usize),
    pub scores: Vec<T>,
}

impl<T: Scalar> BlockScores<T> {
    pub fn block_count(&self) -> usize {
        self.scores.len()
    }

    /// Inclusive patch extent of block `(br, bc)`.
    pub fn block_extent(&self, br: usize, bc: usize) -> PatchBox {
        let bs = self.block_size;
        PatchBox {
            row_min: br * bs,
            col_min: bc * bs,
            row_max: ((br + 1) * bs).min(self.patch_grid.0) - 1,
            col_max: ((bc + 1) * bs).min(self.patch_grid.1) - 1,
        }
    }
}

/// Max-pools any per-patch values into blocks.
pub fn score_patch_values<T: Scalar>(
    values: &[T],
    grid: (usize, usize),
    block_size: usize,
) -> Result<BlockScores<T>> {
    if block_size < 1 {
        return Err(Error::Config("block_size must be >= 1".into()));
    }
    if values.len() != grid.0 * grid.1 || values.is_empty() {
        return Err(Error::Shape(format!("{} values for a {}x{} grid", values.len(), grid.0, grid.1)));
    }
    let blocks = (grid.0.div_ceil(block_size), grid.1.div_ceil(block_size));
    let mut scores = vec![T::neg_infinity(); blocks.0 * blocks.1];
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let b = (r / block_size) * blocks.1 + c / block_size;
            scores[b] = scores[b].max(values[r * grid.1 + c]);
        }
    }
    Ok(BlockScores { patch_grid: grid, block_size, blocks, scores })
}

pub fn score_blocks<T: Scalar>(map: &AffinityMap<T>, block_size: usize) -> Result<BlockScores<T>> {
    score_patch_values(&map.weights, map.grid, block_size)
}

/// Inclusive rectangle in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl PatchBox {
    pub fn rows(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn cols(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn patch_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, other: &PatchBox) -> bool {
        self.row_min <= other.row_min
            && self.col_min <= other.col_min
            && self.row_max >= other.row_max
            && self.col_max >= other.col_max
    }

    pub fn hull(&self, other: &PatchBox) -> PatchBox {
        PatchBox {
            row_min: self.row_min.min(other.row_min),
            col_min: self.col_min.min(other.col_min),
            row_max: self.row_max.max(other.row_max),
            col_max: self.col_max.max(other.col_max),
        }
    }

    /// Half-open pixel box.
    pub fn to_pixels(&self, patch_size: usize) -> BBox {
        BBox {
            x_min: (self.col_min * patch_size) as i64,
            y_min: (self.row_min * patch_size) as i64,
            x_max: ((self.col_max + 1) * patch_size) as i64,
            y_max: ((self.row_max + 1) * patch_size) as i64,
        }
    }

    pub fn within(&self, grid: (usize, usize)) -> bool {
        self.row_min <= self.row_max
            && self.col_min <= self.col_max
            && self.row_max < grid.0
            && self.col_max < grid.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Selected block coordinates `(block_row, block_col)` in selection order.
    pub blocks: Vec<(usize, usize)>,
    pub block_size: usize,
    pub bbox_patches: PatchBox,
    pub bbox_pixels: BBox,
}

impl Region {
    /// Hull of the selected blocks, before any expansion.
    pub fn matched_patches(&self, grid: (usize, usize)) -> PatchBox {
        let bs = self.block_size;
        self.blocks
            .iter()
            .map(|&(br, bc)| PatchBox {
                row_min: br * bs,
                col_min: bc * bs,
                row_max: ((br + 1) * bs).min(grid.0) - 1,
                col_max: ((bc + 1) * bs).min(grid.1) - 1,
            })
            .reduce(|a, b| a.hull(&b))
            .unwrap_or(self.bbox_patches)
    }
}

/// Number of blocks actually selected for a requested `k`.
pub fn effective_k(block_count: usize, k: usize) -> usize {
    k.min(block_count)
}

/// Picks the `k` highest-scoring blocks (row-major order breaks ties) and
/// returns their bounding rectangle. `k` above the block count is clamped.
pub fn select_region<T: Scalar>(scores: &BlockScores<T>, k: usize, patch_size: usize) -> Result<Region> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let k_used = effective_k(scores.block_count(), k);
    if k_used < k {
        log::warn!("k = {k} exceeds the {} available blocks; clamped", scores.block_count());
    }
    let mut taken = vec![false; scores.block_count()];
    let mut blocks = Vec::with_capacity(k_used);
    let mut bbox: Option<PatchBox> = None;
    for _ in 0..k_used {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.scores.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| s > scores.scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k_used never exceeds the block count");
        taken[b] = true;
        let (br, bc) = (b / scores.blocks.1, b % scores.blocks.1);
        blocks.push((br, bc));
        let ext = scores.block_extent(br, bc);
        bbox = Some(bbox.map_or(ext, |h| h.hull(&ext)));
    }
    let bbox_patches = bbox.expect("k_used >= 1");
    Ok(Region {
        blocks,
        block_size: scores.block_size,
        bbox_patches,
        bbox_pixels: bbox_patches.to_pixels(patch_size),
    })
}

/// Grows the bounding box by `margin_blocks` blocks on every side, clipped to
/// the patch grid. The selected blocks are unchanged.
pub fn expand_region(region: &Region, margin_blocks: usize, grid: (usize, usize), patch_size: usize) -> Region {
    let m = margin_blocks * region.block_size;
    let b = region.bbox_patches;
    let bbox_patches = PatchBox {
        row_min: b.row_min.saturating_sub(m),
        col_min: b.col_min.saturating_sub(m),
        row_max: (b.row_max + m).min(grid.0 - 1),
        col_max: (b.col_max + m).min(grid.1 - 1),
    };
    Region { bbox_patches, bbox_pixels: bbox_patches.to_pixels(patch_size), ..region.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceSpace {
    InputEmbedding,
    MidLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnapshot<T> {
    pub anchor_id: TokenId,
    pub anchor_token: String,
    pub region: Region,
    pub d: usize,
    /// `n_vectors × d`, row-major over the region.
    pub embeddings: Vec<T>,
    pub source_space: SourceSpace,
    pub model_version: u64,
}

impl<T: Scalar> EvidenceSnapshot<T> {
    pub fn n_vectors(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.embeddings.len() / self.d
        }
    }

    pub fn vector(&self, i: usize) -> &[T] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }
}

/// Copies the embedding of every patch inside the region's bounding box, in
/// row-major order.
pub fn extract_snapshot<T: Scalar>(
    region: &Region,
    vision: &[T],
    grid: (usize, usize),
    anchor: (TokenId, &str),
    source_space: SourceSpace,
    model_version: u64,
) -> Result<EvidenceSnapshot<T>> {
    let n = grid.0 * grid.1;
    if n == 0 || vision.len() % n != 0 {
        return Err(Error::Shape(format!("{} values for {} patches", vision.len(), n)));
    }
    let d = vision.len() / n;
    let b = region.bbox_patches;
    if !b.within(grid) {
        return Err(Error::Shape(format!("region {b:?} outside the {}x{} grid", grid.0, grid.1)));
    }
    let mut embeddings = Vec::with_capacity(b.patch_count() * d);
    for r in b.row_min..=b.row_max {
        for c in b.col_min..=b.col_max {
            let j = r * grid.1 + c;
            embeddings.extend_from_slice(&vision[j * d..(j + 1) * d]);
        }
    }
    Ok(EvidenceSnapshot {
        anchor_id: anchor.0,
        anchor_token: anchor.1.to_string(),
        region: region.clone(),
        d,
        embeddings,
        source_space,
        model_version,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryParams {
    pub anchors: AnchorPolicy,
    pub tau: f64,
    pub block_size: usize,
    pub k: usize,
    pub margin_blocks: usize,
    pub center: bool,
    pub source_space: SourceSpace,
    /// Overrides the model's configured middle layers (1-based).
    pub layers: Option<Vec<usize>>,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        Self {
            anchors: AnchorPolicy::default(),
            tau: 0.1,
            block_size: 2,
            k: 1,
            margin_blocks: 1,
            center: true,
            source_space: SourceSpace::InputEmbedding,
            layers: None,
        }
    }
}

/// Everything one discovery pass computed; the snapshots are what gets cached.
#[derive(Debug, Clone)]
pub struct Discovery<T> {
    pub target_id: TokenId,
    pub anchors: AnchorSet<T>,
    pub maps: Vec<AffinityMap<T>>,
    pub snapshots: Vec<EvidenceSnapshot<T>>,
}

/// Runs the full discovery procedure for one image and prompt.
pub fn discover_evidence<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    prompt: &str,
    params: &DiscoveryParams,
) -> Result<Vec<EvidenceSnapshot<T>>> {
    Ok(discover(model, image, prompt, params)?.snapshots)
}

pub fn discover<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    prompt: &str,
    params: &DiscoveryParams,
) -> Result<Discovery<T>> {
    let c = &model.config;
    let d = c.d_model;
    let ids = model.tokenize(prompt);
    let (inputs, stream) = model.embed_stream(image, &ids)?;
    let ctx = KvContext::empty(c.n_layers);
    let trace = model.forward_segment(&ctx, &inputs, &LogitRows::Last, true)?;
    let (row, logits) = trace.logits.first().cloned().ok_or_else(|| Error::Shape("empty prompt".into()))?;
    let target = argmax(&logits);
    let mut dz = vec![T::zero(); logits.len()];
    dz[target] = T::one();
    let seed = BackwardSeed { d_logits: vec![(row, dz)], ..Default::default() };
    let grads = model.backward_segment(&ctx, &trace, &seed, None, None)?;
    let scores = compute_saliency(&grads, &inputs, d)?;
    let anchors = select_anchors(&scores, &stream, model.vocab(), &StopWords::standard(), params.anchors)?;

    let layers = params.layers.clone().unwrap_or_else(|| c.mid_layer_list());
    let (maps, snapshots) = ground_anchors(model, &trace.hidden[1..], &inputs, &stream, &anchors.anchors, &layers, params)?;
    Ok(Discovery { target_id: target as TokenId, anchors, maps, snapshots })
}

/// Grounds each anchor against the vision block of one forward pass.
pub fn ground_anchors<T: Scalar>(
    model: &Model<T>,
    hidden_layers: &[Vec<T>],
    inputs: &[T],
    stream: &TokenStream,
    anchors: &[Anchor<T>],
    layers: &[usize],
    params: &DiscoveryParams,
) -> Result<(Vec<AffinityMap<T>>, Vec<EvidenceSnapshot<T>>)> {
    if anchors.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let c = &model.config;
    let d = c.d_model;
    let grid = stream.grid;
    let n_vision = stream.vision_len();
    let mean = mid_layer_average(hidden_layers, layers)?;
    let mut rows = mean[..n_vision * d].to_vec();
    for a in anchors {
        rows.extend_from_slice(&mean[a.position * d..(a.position + 1) * d]);
    }
    let unit = normalize_rows(&rows, d, params.center);
    let (patches, anchor_rows) = unit.split_at(n_vision * d);
    let source: &[T] = match params.source_space {
        SourceSpace::InputEmbedding => &inputs[..n_vision * d],
        SourceSpace::MidLayer => &mean[..n_vision * d],
    };
    let mut maps = Vec::with_capacity(anchors.len());
    let mut snapshots = Vec::with_capacity(anchors.len());
    for (a, q) in anchors.iter().zip(anchor_rows.chunks_exact(d)) {
        let map = anchor_patch_affinity(a.position, q, patches, grid, T::of(params.tau))?;
        let blocks = score_blocks(&map, params.block_size)?;
        let region = select_region(&blocks, params.k, c.patch_size)?;
        let region = expand_region(&region, params.margin_blocks, grid, c.patch_size);
        snapshots.push(extract_snapshot(
            &region,
            source,
            grid,
            (a.token_id, &a.token),
            params.source_space,
            model.version,
        )?);
        maps.push(map);
    }
    Ok((maps, snapshots))
}
