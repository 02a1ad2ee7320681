use std::ops::Range;

use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::numerics::{RngStream, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub ln1: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector. Layer-norm
/// tensors hold the gain followed by the bias (`2·d` values).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

enum Init {
    Normal,
    Zeros,
    LayerNorm,
}

struct Builder {
    next: usize,
    entries: Vec<(String, Range<usize>, Init)>,
}

impl Builder {
    fn take(&mut self, name: String, len: usize, init: Init) -> Range<usize> {
        let r = self.next..self.next + len;
        self.next += len;
        self.entries.push((name, r.clone(), init));
        r
    }
}

impl ParamLayout {
    fn build(c: &ModelConfig) -> (Self, Vec<(String, Range<usize>, Init)>) {
        let d = c.d_model;
        let f = c.mlp_dim();
        let v = c.vocab.len();
        let mut b = Builder { next: 0, entries: Vec::new() };
        let tok_emb = b.take("tok_emb".into(), v * d, Init::Normal);
        let pos_emb = b.take("pos_emb".into(), c.max_seq * d, Init::Normal);
        let patch_w = b.take("patch_w".into(), c.patch_dim() * d, Init::Normal);
        let patch_b = b.take("patch_b".into(), d, Init::Zeros);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let mut t = |name: &str, len, init| b.take(format!("layer{l}.{name}"), len, init);
            layers.push(LayerLayout {
                ln1: t("ln1", 2 * d, Init::LayerNorm),
                wq: t("wq", d * d, Init::Normal),
                bq: t("bq", d, Init::Zeros),
                wk: t("wk", d * d, Init::Normal),
                bk: t("bk", d, Init::Zeros),
                wv: t("wv", d * d, Init::Normal),
                bv: t("bv", d, Init::Zeros),
                wo: t("wo", d * d, Init::Normal),
                bo: t("bo", d, Init::Zeros),
                ln2: t("ln2", 2 * d, Init::LayerNorm),
                w1: t("w1", d * f, Init::Normal),
                b1: t("b1", f, Init::Zeros),
                w2: t("w2", f * d, Init::Normal),
                b2: t("b2", d, Init::Zeros),
            });
        }
        let head_w = b.take("head_w".into(), d * v, Init::Normal);
        let head_b = b.take("head_b".into(), v, Init::Zeros);
        let total = b.next;
        (Self { tok_emb, pos_emb, patch_w, patch_b, layers, head_w, head_b, total }, b.entries)
    }

    pub fn new(c: &ModelConfig) -> Self {
        Self::build(c).0
    }

    /// Named tensors in storage order.
    pub fn tensors(c: &ModelConfig) -> Vec<(String, Range<usize>)> {
        Self::build(c).1.into_iter().map(|(n, r, _)| (n, r)).collect()
    }
}

/// Draws every tensor from its own child stream of `config.seed`, so a
/// tensor's values do not depend on the order tensors are initialized in.
pub fn init_params<T: Scalar>(c: &ModelConfig) -> (ParamLayout, Vec<T>) {
    let (layout, entries) = ParamLayout::build(c);
    let mut params = vec![T::zero(); layout.total];
    let root = RngStream::new(c.seed).split("init");
    let normal = Normal::new(0.0, c.init_std).expect("init_std validated positive");
    for (name, range, init) in entries {
        let slot = &mut params[range];
        match init {
            Init::Zeros => {}
            Init::LayerNorm => {
                let d = slot.len() / 2;
                slot[..d].fill(T::one());
            }
            Init::Normal => {
                let mut rng = root.split(&name);
                for x in slot.iter_mut() {
                    *x = T::of(normal.sample(&mut rng));
                }
            }
        }
    }
    (layout, params)
}
