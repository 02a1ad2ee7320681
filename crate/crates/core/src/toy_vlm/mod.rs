//! A small deterministic multimodal transformer.
//!
//! Images are cut into square patches that are linearly projected into the
//! model width; text tokens come from a word-level vocabulary. Both share a
//! learned absolute position table. The body is a pre-norm causal
//! transformer with a hand-written backward pass, so gradients of any logit
//! with respect to input embeddings and parameters are exact.

mod config;
mod params;
mod segment;
mod vocab;

use std::io::Write as _;
use std::path::Path;

pub use config::ModelConfig;
pub use params::{LayerLayout, ParamLayout};
pub use segment::{BackwardSeed, KvContext, LayerKv, LogitRows, SegmentTrace};
pub use vocab::*;

use crate::error::{Error, Result};
use crate::numerics::{argmax, matmul_bias, matmul_tn_acc, RngStream, Scalar};
use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

/// Joint sequence of a vision block followed by text tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub grid: (usize, usize),
    pub text_ids: Vec<TokenId>,
}

impl TokenStream {
    pub fn vision_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn len(&self) -> usize {
        self.vision_len() + self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self, pos: usize) -> Modality {
        if pos < self.vision_len() {
            Modality::Vision
        } else {
            Modality::Text
        }
    }

    /// Token id at a text position; `None` for vision positions.
    pub fn id_at(&self, pos: usize) -> Option<TokenId> {
        pos.checked_sub(self.vision_len()).and_then(|i| self.text_ids.get(i).copied())
    }
}

/// What produced one row of an input sequence; used to route embedding
/// gradients back to parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Patch(usize),
    Token(TokenId),
    /// A vector supplied verbatim (inserted evidence); carries no parameters.
    Fixed,
}

/// Hidden states of one full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateStack<T> {
    pub n_tokens: usize,
    pub d_model: usize,
    pub inputs: Vec<T>,
    /// `layers[l - 1]` holds `H^(l)`, the residual stream after layer `l`.
    pub layers: Vec<Vec<T>>,
    /// Logits at the final position.
    pub logits: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport<T> {
    pub target_id: TokenId,
    pub target_logit: T,
    /// `∂ logit / ∂ h_i` for every input row, `n×d`.
    pub grads: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<T>,
    /// Incremented by every optimizer update.
    pub version: u64,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = params::init_params(&config);
        Ok(Self { config, layout, params, version: 0 })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.config.vocab.tokenize(text)
    }

    /// Pixel values (scaled to `[0, 1]`) of every patch in row-major patch
    /// order; each row is `patch_size × patch_size × 3`, channels interleaved.
    pub fn patch_pixels(&self, image: &RgbImage) -> Result<Vec<T>> {
        let c = &self.config;
        if image.width() != c.image_side || image.height() != c.image_side {
            return Err(Error::Shape(format!(
                "expected a {0}x{0} image, got {1}x{2}",
                c.image_side,
                image.width(),
                image.height()
            )));
        }
        let ps = c.patch_size;
        let side = c.grid_side();
        let scale = T::of(1.0 / 255.0);
        let mut out = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for pr in 0..side {
            for pc in 0..side {
                for y in 0..ps {
                    for x in 0..ps {
                        let px = image.get(pc * ps + x, pr * ps + y);
                        out.extend(px.iter().map(|&b| T::of(b as f64) * scale));
                    }
                }
            }
        }
        Ok(out)
    }

    fn pos_row(&self, pos: usize) -> &[T] {
        let d = self.config.d_model;
        &self.params[self.layout.pos_emb.clone()][pos * d..(pos + 1) * d]
    }

    /// Patch projections without position vectors.
    pub fn project_patches(&self, pixels: &[T]) -> Vec<T> {
        let c = &self.config;
        let n = pixels.len() / c.patch_dim();
        matmul_bias(
            pixels,
            &self.params[self.layout.patch_w.clone()],
            &self.params[self.layout.patch_b.clone()],
            n,
            c.patch_dim(),
            c.d_model,
        )
    }

    /// Vision embeddings (`N×d`, position vectors included) and grid dims.
    pub fn embed_image(&self, image: &RgbImage) -> Result<(Vec<T>, (usize, usize))> {
        let pixels = self.patch_pixels(image)?;
        let mut emb = self.project_patches(&pixels);
        let d = self.config.d_model;
        for (j, row) in emb.chunks_exact_mut(d).enumerate() {
            for (x, &p) in row.iter_mut().zip(self.pos_row(j)) {
                *x += p;
            }
        }
        let side = self.config.grid_side();
        Ok((emb, (side, side)))
    }

    /// Token embedding plus the position vector for sequence position `pos`.
    pub fn embed_token(&self, id: TokenId, pos: usize) -> Result<Vec<T>> {
        let c = &self.config;
        if id as usize >= c.vocab.len() {
            return Err(Error::Index { what: "vocabulary", index: id as usize, size: c.vocab.len() });
        }
        if pos >= c.max_seq {
            return Err(Error::Capacity { len: pos + 1, max: c.max_seq });
        }
        let d = c.d_model;
        let tok = &self.params[self.layout.tok_emb.clone()][id as usize * d..(id as usize + 1) * d];
        Ok(tok.iter().zip(self.pos_row(pos)).map(|(&a, &b)| a + b).collect())
    }

    /// Input embeddings for an image followed by text tokens.
    pub fn embed_stream(&self, image: &RgbImage, text_ids: &[TokenId]) -> Result<(Vec<T>, TokenStream)> {
        let (mut rows, grid) = self.embed_image(image)?;
        let n_vision = grid.0 * grid.1;
        for (i, &id) in text_ids.iter().enumerate() {
            rows.extend(self.embed_token(id, n_vision + i)?);
        }
        Ok((rows, TokenStream { grid, text_ids: text_ids.to_vec() }))
    }

    /// Routes input-embedding gradients of rows `start..` into the embedding
    /// tables. `pixels` is required when `slots` contains patches.
    pub fn embedding_backward(
        &self,
        slots: &[Slot],
        start: usize,
        pixels: Option<&[T]>,
        d_inputs: &[T],
        grads: &mut [T],
    ) {
        let c = &self.config;
        let d = c.d_model;
        let pd = c.patch_dim();
        for (i, (slot, g)) in slots.iter().zip(d_inputs.chunks_exact(d)).enumerate() {
            let pos = start + i;
            let add = |dst: &mut [T]| {
                for (a, &b) in dst.iter_mut().zip(g) {
                    *a += b;
                }
            };
            match *slot {
                Slot::Fixed => continue,
                Slot::Token(id) => {
                    let r = self.layout.tok_emb.start + id as usize * d;
                    add(&mut grads[r..r + d]);
                }
                Slot::Patch(j) => {
                    let px = pixels.expect("patch slots need pixel data");
                    matmul_tn_acc(&px[j * pd..(j + 1) * pd], g, 1, pd, d, &mut grads[self.layout.patch_w.clone()]);
                    add(&mut grads[self.layout.patch_b.clone()]);
                }
            }
            let r = self.layout.pos_emb.start + pos * d;
            add(&mut grads[r..r + d]);
        }
    }

    /// Full causal forward pass; logits are taken at the final position.
    pub fn forward(&self, inputs: &[T]) -> Result<HiddenStateStack<T>> {
        let ctx = KvContext::empty(self.config.n_layers);
        let trace = self.forward_segment(&ctx, inputs, &LogitRows::Last, true)?;
        let logits = trace.logits.first().map(|(_, z)| z.clone()).unwrap_or_default();
        let SegmentTrace { n, hidden, .. } = trace;
        let mut hidden = hidden.into_iter();
        let inputs = hidden.next().unwrap_or_default();
        Ok(HiddenStateStack {
            n_tokens: n,
            d_model: self.config.d_model,
            inputs,
            layers: hidden.collect(),
            logits,
        })
    }

    /// Exact gradient of `z_L[target_id]` with respect to every input row.
    pub fn grad_scalar_logit(&self, inputs: &[T], target_id: TokenId) -> Result<GradientReport<T>> {
        let vocab = self.config.vocab.len();
        if target_id as usize >= vocab {
            return Err(Error::Index { what: "vocabulary", index: target_id as usize, size: vocab });
        }
        let ctx = KvContext::empty(self.config.n_layers);
        let trace = self.forward_segment(&ctx, inputs, &LogitRows::Last, true)?;
        let (row, logits) = trace
            .logits
            .first()
            .cloned()
            .ok_or_else(|| Error::Shape("empty input sequence".into()))?;
        let mut dz = vec![T::zero(); vocab];
        dz[target_id as usize] = T::one();
        let seed = BackwardSeed { d_logits: vec![(row, dz)], ..Default::default() };
        let grads = self.backward_segment(&ctx, &trace, &seed, None, None)?;
        Ok(GradientReport { target_id, target_logit: logits[target_id as usize], grads })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.config).expect("config serializes");
        let mut buf = Vec::with_capacity(24 + header.len() + self.params.len() * 8);
        buf.extend_from_slice(b"SVMD");
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in &self.params {
            buf.write_all(&p.to_f64_lossy().to_le_bytes()).expect("vec write");
        }
        crate::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = crate::codec::Reader::new(&bytes);
        if r.take(4)? != b"SVMD" {
            return Err(Error::Format { offset: 0, msg: "bad model magic".into() });
        }
        let hlen = r.u32()? as usize;
        let at = r.offset();
        let config: ModelConfig = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Format { offset: at, msg: format!("model header: {e}") })?;
        let version = r.u64()?;
        let count = r.u64()? as usize;
        let mut model = Self::build(config)?;
        if count != model.params.len() {
            return Err(Error::Format {
                offset: r.offset(),
                msg: format!("expected {} parameters, file has {count}", model.params.len()),
            });
        }
        for p in model.params.iter_mut() {
            *p = T::of(r.f64()?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format { offset: r.offset(), msg: "trailing bytes".into() });
        }
        model.version = version;
        Ok(model)
    }
}

/// Incremental decoder: keeps the keys and values of everything pushed so far.
#[derive(Debug, Clone)]
pub struct Decoder<'m, T> {
    model: &'m Model<T>,
    ctx: KvContext<T>,
    last_logits: Vec<T>,
}

impl<'m, T: Scalar> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self { model, ctx: KvContext::empty(model.config.n_layers), last_logits: Vec::new() }
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn len(&self) -> usize {
        self.ctx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctx.is_empty()
    }

    /// Appends input rows and returns the logits at the new final position.
    pub fn push(&mut self, rows: &[T]) -> Result<&[T]> {
        let trace = self.model.forward_segment(&self.ctx, rows, &LogitRows::Last, false)?;
        self.ctx.extend(&trace);
        if let Some((_, z)) = trace.logits.into_iter().next() {
            self.last_logits = z;
        }
        Ok(&self.last_logits)
    }

    pub fn last_logits(&self) -> &[T] {
        &self.last_logits
    }
}

/// Greedy (temperature 0, lowest id on ties) or softmax sampling.
pub fn sample_next_token<T: Scalar>(logits: &[T], temperature: f64, rng: &mut RngStream) -> Result<TokenId> {
    if !(temperature >= 0.0) {
        return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty logits".into()));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at index {i}")));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits) as TokenId);
    }
    let probs = crate::numerics::stable_softmax(logits, T::of(temperature))?;
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.to_f64_lossy();
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return Ok(i as TokenId);
        }
    }
    Ok(last_nonzero as TokenId)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            patch_size: 8,
            image_side: 16,
            mid_layers: (1, 2),
            seed,
            max_seq: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_config_gives_identical_weights() {
        let a = Model::<f64>::build(ModelConfig::default()).unwrap();
        let b = Model::<f64>::build(ModelConfig::default()).unwrap();
        let bytes = |m: &Model<f64>| m.params.iter().flat_map(|p| p.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = Model::<f64>::build(small_config(1)).unwrap();
        let b = Model::<f64>::build(small_config(2)).unwrap();
        assert!(a.params.iter().zip(&b.params).any(|(x, y)| x != y));
    }

    #[test]
    fn invalid_head_count_is_a_config_error() {
        let c = ModelConfig { n_heads: 3, d_model: 64, ..ModelConfig::default() };
        assert!(matches!(Model::<f64>::build(c), Err(Error::Config(_))));
    }

    #[test]
    fn default_image_gives_8x8_grid() {
        let m = Model::<f64>::build(ModelConfig::default()).unwrap();
        let (emb, grid) = m.embed_image(&RgbImage::new(64, 64)).unwrap();
        assert_eq!(grid, (8, 8));
        assert_eq!(emb.len(), 64 * 64);
    }

    #[test]
    fn black_image_patches_project_identically() {
        let m = Model::<f64>::build(ModelConfig::default()).unwrap();
        let px = m.patch_pixels(&RgbImage::new(64, 64)).unwrap();
        let proj = m.project_patches(&px);
        let first = &proj[..64];
        for row in proj.chunks_exact(64) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn single_patch_edit_is_local() {
        let m = Model::<f64>::build(ModelConfig::default()).unwrap();
        let a = RgbImage::new(64, 64);
        let mut b = a.clone();
        b.put(20, 11, [255, 0, 0]); // patch row 1, col 2
        let (ea, _) = m.embed_image(&a).unwrap();
        let (eb, _) = m.embed_image(&b).unwrap();
        for j in 0..64 {
            let same = ea[j * 64..(j + 1) * 64] == eb[j * 64..(j + 1) * 64];
            assert_eq!(same, j != 10, "patch {j}");
        }
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let m = Model::<f64>::build(ModelConfig::default()).unwrap();
        assert!(matches!(m.embed_image(&RgbImage::new(32, 64)), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = Model::<f64>::build(small_config(3)).unwrap();
        let ids = m.tokenize("what color is the circle ?");
        let (x, _) = m.embed_stream(&RgbImage::new(16, 16), &ids).unwrap();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 2);
        assert_eq!(a.logits.len(), m.vocab().len());
        assert!(a.layers.iter().all(|h| h.len() == a.n_tokens * 16));
    }

    #[test]
    fn over_long_sequence_is_a_capacity_error() {
        let m = Model::<f64>::build(small_config(3)).unwrap();
        let x = vec![0.1; 33 * 16];
        assert!(matches!(m.forward(&x), Err(Error::Capacity { len: 33, max: 32 })));
    }

    #[test]
    fn incremental_decoding_matches_full_pass_bitwise() {
        let m = Model::<f64>::build(small_config(4)).unwrap();
        let ids = m.tokenize("is the circle left of the square ?");
        let (x, _) = m.embed_stream(&RgbImage::new(16, 16), &ids).unwrap();
        let d = 16;
        let n = x.len() / d;
        let mut dec = Decoder::new(&m);
        dec.push(&x[..5 * d]).unwrap();
        for i in 5..n {
            dec.push(&x[i * d..(i + 1) * d]).unwrap();
            let full = m.forward(&x[..(i + 1) * d]).unwrap();
            assert_eq!(dec.last_logits(), full.logits.as_slice(), "position {i}");
        }
    }

    #[test]
    fn target_outside_vocab_is_an_index_error() {
        let m = Model::<f64>::build(small_config(3)).unwrap();
        let x = vec![0.1; 4 * 16];
        assert!(matches!(m.grad_scalar_logit(&x, 10_000), Err(Error::Index { .. })));
    }

    #[test]
    fn zero_depth_gradient_is_the_head_column() {
        let c = ModelConfig { n_layers: 0, ..small_config(5) };
        let m = Model::<f64>::build(c).unwrap();
        let x: Vec<f64> = (0..5 * 16).map(|i| (i as f64 * 0.1).cos()).collect();
        let target = 7;
        let rep = m.grad_scalar_logit(&x, target).unwrap();
        let v = m.vocab().len();
        let head = &m.params[m.layout.head_w.clone()];
        for i in 0..5 {
            for k in 0..16 {
                let want = if i == 4 { head[k * v + target as usize] } else { 0.0 };
                assert_eq!(rep.grads[i * 16 + k], want);
            }
        }
    }

    #[test]
    fn greedy_sampling_rules() {
        let mut rng = RngStream::new(0);
        assert_eq!(sample_next_token(&[0.0f64, 5.0, 0.0], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(sample_next_token(&[1.0f64, 1.0, 1.0], 0.0, &mut rng).unwrap(), 0);
        assert!(matches!(sample_next_token(&[f64::INFINITY, 0.0], 1.0, &mut rng), Err(Error::Numeric(_))));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let logits = [0.3f64, -0.2, 1.0, 0.0, 0.5];
        let draw = || {
            let mut rng = RngStream::new(99);
            (0..50).map(|_| sample_next_token(&logits, 1.0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.iter().collect::<std::collections::BTreeSet<_>>().len() > 1);
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = Model::<f64>::build(small_config(8)).unwrap();
        m.version = 5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        assert_eq!(Model::<f64>::load(&path).unwrap(), m);
    }
}
