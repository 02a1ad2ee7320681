//! Teacher-forced replay of sequences that share one image-and-prompt prefix.
//!
//! The prefix is run once with activations kept. Each continuation is run on
//! top of its keys and values, backpropagated immediately, and its gradient
//! on the prefix keys, values and last-row logits is accumulated so the
//! prefix needs a single backward pass for the whole group.

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::raster::RgbImage;
use crate::rollout::Suffix;
use crate::toy_vlm::{BackwardSeed, KvContext, LogitRows, Model, SegmentTrace, Slot, TokenId};

pub struct Replay<'m, T> {
    model: &'m Model<T>,
    slots: Vec<Slot>,
    pixels: Vec<T>,
    trace: SegmentTrace<T>,
    ctx: KvContext<T>,
    d_last: Vec<T>,
    d_ctx: KvContext<T>,
}

impl<'m, T: Scalar> Replay<'m, T> {
    pub fn new(model: &'m Model<T>, image: &RgbImage, prompt_ids: &[TokenId]) -> Result<Self> {
        let pixels = model.patch_pixels(image)?;
        let (rows, stream) = model.embed_stream(image, prompt_ids)?;
        let slots: Vec<Slot> =
            (0..stream.vision_len()).map(Slot::Patch).chain(prompt_ids.iter().map(|&id| Slot::Token(id))).collect();
        let empty = KvContext::empty(model.config.n_layers);
        let trace = model.forward_segment(&empty, &rows, &LogitRows::Last, true)?;
        let mut ctx = empty;
        ctx.extend(&trace);
        let d_ctx = ctx.zeros_like();
        Ok(Self { model, slots, pixels, trace, ctx, d_last: vec![T::zero(); model.config.vocab.len()], d_ctx })
    }

    pub fn prefix_len(&self) -> usize {
        self.trace.n
    }

    /// Activations of the prefix (`hidden[l]` after layer `l`).
    pub fn prefix_trace(&self) -> &SegmentTrace<T> {
        &self.trace
    }

    fn last_logits(&self) -> &[T] {
        &self.trace.logits[0].1
    }

    fn suffix_rows(&self, suffix: &Suffix<T>) -> Result<Vec<T>> {
        let d = self.model.config.d_model;
        let start = self.prefix_len();
        let mut fixed = suffix.fixed.chunks_exact(d);
        let mut rows = Vec::with_capacity(suffix.slots.len() * d);
        for (i, slot) in suffix.slots.iter().enumerate() {
            match *slot {
                Slot::Token(id) => rows.extend(self.model.embed_token(id, start + i)?),
                Slot::Fixed => rows.extend_from_slice(
                    fixed.next().ok_or_else(|| Error::Shape("suffix has fewer fixed rows than slots".into()))?,
                ),
                Slot::Patch(_) => return Err(Error::Shape("patch slots cannot follow the prompt".into())),
            }
        }
        Ok(rows)
    }

    fn forward_suffix(&self, suffix: &Suffix<T>, keep: bool) -> Result<(SegmentTrace<T>, Vec<Vec<T>>)> {
        let rows = self.suffix_rows(suffix)?;
        let wanted: Vec<usize> = suffix.targets.iter().filter(|t| t.0 > 0).map(|t| t.0 - 1).collect();
        let trace = self.model.forward_segment(&self.ctx, &rows, &LogitRows::Rows(wanted), keep)?;
        let logits = suffix
            .targets
            .iter()
            .map(|&(s, _, _)| {
                if s == 0 {
                    self.last_logits().to_vec()
                } else {
                    trace.logits_for(s - 1).expect("requested row").to_vec()
                }
            })
            .collect();
        Ok((trace, logits))
    }

    /// Logits that predicted each target token, without gradients.
    pub fn target_logits(&self, suffix: &Suffix<T>) -> Result<Vec<Vec<T>>> {
        Ok(self.forward_suffix(suffix, false)?.1)
    }

    /// Runs one continuation. `loss` receives the logits behind every target
    /// and returns the loss value with `dL/dlogits` per target; the
    /// continuation's parameter gradients go into `grads` right away.
    pub fn accumulate<F>(&mut self, suffix: &Suffix<T>, grads: &mut [T], loss: F) -> Result<f64>
    where
        F: FnOnce(&[Vec<T>]) -> Result<(f64, Vec<Vec<T>>)>,
    {
        let (trace, logits) = self.forward_suffix(suffix, true)?;
        let (value, d_logits) = loss(&logits)?;
        let mut seed = BackwardSeed::default();
        for (&(s, _, _), dz) in suffix.targets.iter().zip(d_logits) {
            if s == 0 {
                for (a, b) in self.d_last.iter_mut().zip(&dz) {
                    *a += *b;
                }
            } else {
                seed.d_logits.push((s - 1, dz));
            }
        }
        let d_inputs = self.model.backward_segment(&self.ctx, &trace, &seed, Some(grads), Some(&mut self.d_ctx))?;
        self.model.embedding_backward(&suffix.slots, self.prefix_len(), None, &d_inputs, grads);
        Ok(value)
    }

    /// Backpropagates the prefix, adding `d_hidden` injections on its
    /// residual stream.
    pub fn finish(self, d_hidden: Vec<(usize, Vec<T>)>, grads: &mut [T]) -> Result<()> {
        let n = self.prefix_len();
        let seed = BackwardSeed {
            d_logits: vec![(n - 1, self.d_last)],
            d_hidden,
            d_kv: Some(self.d_ctx),
        };
        let empty = KvContext::empty(self.model.config.n_layers);
        let d_inputs = self.model.backward_segment(&empty, &self.trace, &seed, Some(grads), None)?;
        self.model.embedding_backward(&self.slots, 0, Some(&self.pixels), &d_inputs, grads);
        Ok(())
    }
}
