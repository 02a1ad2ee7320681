//! Segment-wise forward and backward passes.
//!
//! A segment is a run of consecutive positions whose queries attend to an
//! existing key/value context (everything before the segment) plus the
//! segment's own earlier positions. A full pass is one segment over an empty
//! context; incremental decoding is a sequence of one-row segments; training
//! can share the forward and backward work of a common prompt across a group
//! of continuations by treating the prompt as a separate segment.
//!
//! Every output row is computed with the same operation order regardless of
//! how the sequence is split into segments, so all three modes agree bitwise.

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{
    col_sum_acc, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_bias,
    matmul_nt_acc, matmul_tn_acc, softmax_in_place, NormStats, Scalar,
};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

/// Keys and values of every layer for positions `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvContext<T> {
    pub layers: Vec<LayerKv<T>>,
    len: usize,
}

impl<T: Scalar> KvContext<T> {
    pub fn empty(n_layers: usize) -> Self {
        Self { layers: vec![LayerKv { k: Vec::new(), v: Vec::new() }; n_layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn extend(&mut self, trace: &SegmentTrace<T>) {
        for (ctx, new) in self.layers.iter_mut().zip(&trace.kv) {
            ctx.k.extend_from_slice(&new.k);
            ctx.v.extend_from_slice(&new.v);
        }
        self.len += trace.n;
    }

    /// Zero-initialized gradient buffer with this context's shape.
    pub fn zeros_like(&self) -> KvContext<T> {
        KvContext {
            layers: self
                .layers
                .iter()
                .map(|l| LayerKv { k: vec![T::zero(); l.k.len()], v: vec![T::zero(); l.v.len()] })
                .collect(),
            len: self.len,
        }
    }

    pub fn add_assign(&mut self, other: &KvContext<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.k.iter_mut().zip(&b.k) {
                *x += y;
            }
            for (x, &y) in a.v.iter_mut().zip(&b.v) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<T> {
    ln1: Vec<NormStats<T>>,
    a: Vec<T>,
    q: Vec<T>,
    /// Attention probabilities indexed `[head * n + row]`, each of length
    /// `start + row + 1`.
    probs: Vec<Vec<T>>,
    o: Vec<T>,
    x1: Vec<T>,
    ln2: Vec<NormStats<T>>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Which rows of a segment produce logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogitRows {
    None,
    Last,
    All,
    Rows(Vec<usize>),
}

impl LogitRows {
    fn resolve(&self, n: usize) -> Vec<usize> {
        match self {
            LogitRows::None => Vec::new(),
            LogitRows::Last => n.checked_sub(1).into_iter().collect(),
            LogitRows::All => (0..n).collect(),
            LogitRows::Rows(r) => r.clone(),
        }
    }
}

/// Activations of one segment. `hidden[0]` is the input block and
/// `hidden[l]` the residual stream after layer `l`.
#[derive(Debug, Clone)]
pub struct SegmentTrace<T> {
    pub start: usize,
    pub n: usize,
    pub hidden: Vec<Vec<T>>,
    pub kv: Vec<LayerKv<T>>,
    pub logits: Vec<(usize, Vec<T>)>,
    layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> SegmentTrace<T> {
    pub fn logits_for(&self, row: usize) -> Option<&[T]> {
        self.logits.iter().find(|(r, _)| *r == row).map(|(_, z)| z.as_slice())
    }

    pub fn output(&self) -> &[T] {
        self.hidden.last().expect("hidden always holds the input block")
    }
}

/// Gradients fed into a segment's backward pass.
#[derive(Debug, Clone)]
pub struct BackwardSeed<T> {
    /// `(row, dL/dlogits)` for rows that produced logits.
    pub d_logits: Vec<(usize, Vec<T>)>,
    /// `(layer, dL/dH)` injected on the residual stream after `layer`
    /// (1-based; `n×d`).
    pub d_hidden: Vec<(usize, Vec<T>)>,
    /// Gradients on this segment's own keys and values, contributed by later
    /// segments that attended to it.
    pub d_kv: Option<KvContext<T>>,
}

impl<T> Default for BackwardSeed<T> {
    fn default() -> Self {
        Self { d_logits: Vec::new(), d_hidden: Vec::new(), d_kv: None }
    }
}

impl<T: Scalar> Model<T> {
    pub fn forward_segment(
        &self,
        ctx: &KvContext<T>,
        inputs: &[T],
        logit_rows: &LogitRows,
        keep_trace: bool,
    ) -> Result<SegmentTrace<T>> {
        let c = &self.config;
        let d = c.d_model;
        if inputs.len() % d != 0 {
            return Err(Error::Shape(format!(
                "input block of {} values is not a multiple of d_model {d}",
                inputs.len()
            )));
        }
        if ctx.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "context has {} layers, model has {}",
                ctx.layers.len(),
                c.n_layers
            )));
        }
        let n = inputs.len() / d;
        let start = ctx.len();
        if start + n > c.max_seq {
            return Err(Error::Capacity { len: start + n, max: c.max_seq });
        }
        let rows = logit_rows.resolve(n);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index { what: "segment rows", index: bad, size: n });
        }

        let f = c.mlp_dim();
        let p = &self.params;
        let mut hidden = vec![inputs.to_vec()];
        let mut kv = Vec::with_capacity(c.n_layers);
        let mut traces = Vec::new();
        for (li, lay) in self.layout.layers.iter().enumerate() {
            let x = hidden.last().unwrap();
            let (gain1, bias1) = p[lay.ln1.clone()].split_at(d);
            let (a, ln1) = layer_norm(x, gain1, bias1, d);
            let q = matmul_bias(&a, &p[lay.wq.clone()], &p[lay.bq.clone()], n, d, d);
            let k = matmul_bias(&a, &p[lay.wk.clone()], &p[lay.bk.clone()], n, d, d);
            let v = matmul_bias(&a, &p[lay.wv.clone()], &p[lay.bv.clone()], n, d, d);
            let (o, probs) = self.attend(&ctx.layers[li], &q, &k, &v, start, n, keep_trace);
            let mut x1 = matmul_bias(&o, &p[lay.wo.clone()], &p[lay.bo.clone()], n, d, d);
            for (y, &xi) in x1.iter_mut().zip(x) {
                *y += xi;
            }
            let (gain2, bias2) = p[lay.ln2.clone()].split_at(d);
            let (b, ln2) = layer_norm(&x1, gain2, bias2, d);
            let u = matmul_bias(&b, &p[lay.w1.clone()], &p[lay.b1.clone()], n, d, f);
            let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
            let mut x2 = matmul_bias(&g, &p[lay.w2.clone()], &p[lay.b2.clone()], n, f, d);
            for (y, &xi) in x2.iter_mut().zip(&x1) {
                *y += xi;
            }
            hidden.push(x2);
            kv.push(LayerKv { k, v });
            if keep_trace {
                traces.push(LayerTrace { ln1, a, q, probs, o, x1, ln2, b, u, g });
            }
        }

        let out = hidden.last().unwrap();
        let vocab = c.vocab.len();
        let head_w = &p[self.layout.head_w.clone()];
        let head_b = &p[self.layout.head_b.clone()];
        let logits = rows
            .into_iter()
            .map(|r| {
                let mut z = vec![T::zero(); vocab];
                matmul(&out[r * d..(r + 1) * d], head_w, 1, d, vocab, &mut z);
                for (zi, &bi) in z.iter_mut().zip(head_b) {
                    *zi += bi;
                }
                (r, z)
            })
            .collect();
        if !keep_trace {
            let last = hidden.pop().unwrap();
            hidden.clear();
            hidden.push(last);
        }
        Ok(SegmentTrace { start, n, hidden, kv, logits, layers: traces })
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        ctx: &LayerKv<T>,
        q: &[T],
        k: &[T],
        v: &[T],
        start: usize,
        n: usize,
        keep: bool,
    ) -> (Vec<T>, Vec<Vec<T>>) {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut o = vec![T::zero(); n * d];
        let mut probs = Vec::new();
        for h in 0..self.config.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let qi = &q[i * d..][cols.clone()];
                let total = start + i + 1;
                let mut s = Vec::with_capacity(total);
                for j in 0..total {
                    let kj = key_row(ctx, k, start, j, d);
                    s.push(dot(qi, &kj[cols.clone()]) * scale);
                }
                softmax_in_place(&mut s, T::one());
                let oi = &mut o[i * d..][cols.clone()];
                for (j, &pj) in s.iter().enumerate() {
                    let vj = value_row(ctx, v, start, j, d);
                    for (acc, &x) in oi.iter_mut().zip(&vj[cols.clone()]) {
                        *acc += pj * x;
                    }
                }
                if keep {
                    probs.push(s);
                }
            }
        }
        (o, probs)
    }

    /// Backpropagates through one segment.
    ///
    /// Returns `dL/d inputs` (`n×d`). Parameter gradients are accumulated into
    /// `grads` (laid out like the parameter vector) and gradients on the
    /// context's keys/values into `d_ctx`, when given.
    pub fn backward_segment(
        &self,
        ctx: &KvContext<T>,
        trace: &SegmentTrace<T>,
        seed: &BackwardSeed<T>,
        mut grads: Option<&mut [T]>,
        mut d_ctx: Option<&mut KvContext<T>>,
    ) -> Result<Vec<T>> {
        let c = &self.config;
        let d = c.d_model;
        let f = c.mlp_dim();
        let n = trace.n;
        let start = trace.start;
        if trace.layers.len() != c.n_layers || trace.hidden.len() != c.n_layers + 1 {
            return Err(Error::Shape("segment trace was recorded without activations".into()));
        }
        if ctx.len() != start {
            return Err(Error::Shape(format!(
                "context length {} does not match segment start {start}",
                ctx.len()
            )));
        }
        let vocab = c.vocab.len();
        let p = &self.params;

        let mut dx = vec![T::zero(); n * d];
        let out = trace.output();
        let head_w = &p[self.layout.head_w.clone()];
        for (r, dz) in &seed.d_logits {
            if dz.len() != vocab || *r >= n {
                return Err(Error::Shape(format!("bad logit gradient for row {r}")));
            }
            matmul_nt_acc(dz, head_w, 1, d, vocab, &mut dx[r * d..(r + 1) * d]);
            if let Some(g) = grads.as_deref_mut() {
                matmul_tn_acc(&out[r * d..(r + 1) * d], dz, 1, d, vocab, &mut g[self.layout.head_w.clone()]);
                for (gb, &z) in g[self.layout.head_b.clone()].iter_mut().zip(dz) {
                    *gb += z;
                }
            }
        }

        let hd = c.head_dim();
        let scale = T::one() / T::of(hd as f64).sqrt();
        for li in (0..c.n_layers).rev() {
            for (layer, dh) in &seed.d_hidden {
                if *layer == li + 1 {
                    if dh.len() != n * d {
                        return Err(Error::Shape(format!("bad hidden gradient for layer {layer}")));
                    }
                    for (a, &b) in dx.iter_mut().zip(dh) {
                        *a += b;
                    }
                }
            }
            let lay = &self.layout.layers[li];
            let t = &trace.layers[li];
            let x = &trace.hidden[li];

            // MLP
            let mut dg = vec![T::zero(); n * f];
            matmul_nt_acc(&dx, &p[lay.w2.clone()], n, f, d, &mut dg);
            if let Some(g) = grads.as_deref_mut() {
                matmul_tn_acc(&t.g, &dx, n, f, d, &mut g[lay.w2.clone()]);
                col_sum_acc(&dx, d, &mut g[lay.b2.clone()]);
            }
            for (gi, &ui) in dg.iter_mut().zip(&t.u) {
                *gi *= gelu_grad(ui);
            }
            let du = dg;
            let mut db = vec![T::zero(); n * d];
            matmul_nt_acc(&du, &p[lay.w1.clone()], n, d, f, &mut db);
            if let Some(g) = grads.as_deref_mut() {
                matmul_tn_acc(&t.b, &du, n, d, f, &mut g[lay.w1.clone()]);
                col_sum_acc(&du, f, &mut g[lay.b1.clone()]);
            }
            let mut dx1 = dx;
            let gain2 = &p[lay.ln2.clone()][..d];
            let ln2_grads = grads.as_deref_mut().map(|g| g[lay.ln2.clone()].split_at_mut(d));
            layer_norm_backward(&t.x1, &t.ln2, gain2, &db, d, &mut dx1, ln2_grads);

            // attention output projection
            let mut d_o = vec![T::zero(); n * d];
            matmul_nt_acc(&dx1, &p[lay.wo.clone()], n, d, d, &mut d_o);
            if let Some(g) = grads.as_deref_mut() {
                matmul_tn_acc(&t.o, &dx1, n, d, d, &mut g[lay.wo.clone()]);
                col_sum_acc(&dx1, d, &mut g[lay.bo.clone()]);
            }

            // attention core
            let own = &trace.kv[li];
            let ctx_l = &ctx.layers[li];
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            if let Some(inj) = &seed.d_kv {
                let l = &inj.layers[li];
                if l.k.len() != n * d || l.v.len() != n * d {
                    return Err(Error::Shape("injected key/value gradient has wrong shape".into()));
                }
                dk.copy_from_slice(&l.k);
                dv.copy_from_slice(&l.v);
            }
            let mut dctx_l = d_ctx.as_deref_mut().map(|g| &mut g.layers[li]);
            for h in 0..c.n_heads {
                let cols = h * hd..(h + 1) * hd;
                for i in 0..n {
                    let probs = &t.probs[h * n + i];
                    let doi = &d_o[i * d..][cols.clone()];
                    let mut dp = Vec::with_capacity(probs.len());
                    for j in 0..probs.len() {
                        let vj = value_row(ctx_l, &own.v, start, j, d);
                        dp.push(dot(doi, &vj[cols.clone()]));
                    }
                    let pdp = dot(probs, &dp);
                    let qi: Vec<T> = t.q[i * d..][cols.clone()].to_vec();
                    for (j, (&pj, &dpj)) in probs.iter().zip(&dp).enumerate() {
                        let ds = pj * (dpj - pdp) * scale;
                        let kj = key_row(ctx_l, &own.k, start, j, d);
                        let dqi = &mut dq[i * d..][cols.clone()];
                        for (a, &kv) in dqi.iter_mut().zip(&kj[cols.clone()]) {
                            *a += ds * kv;
                        }
                        let (dk_row, dv_row) = if j < start {
                            match dctx_l.as_deref_mut() {
                                Some(g) => (&mut g.k[j * d..(j + 1) * d], &mut g.v[j * d..(j + 1) * d]),
                                None => continue,
                            }
                        } else {
                            let r = j - start;
                            (&mut dk[r * d..(r + 1) * d], &mut dv[r * d..(r + 1) * d])
                        };
                        for (a, &qv) in dk_row[cols.clone()].iter_mut().zip(&qi) {
                            *a += ds * qv;
                        }
                        for (b, &g) in dv_row[cols.clone()].iter_mut().zip(doi) {
                            *b += pj * g;
                        }
                    }
                }
            }

            let mut da = vec![T::zero(); n * d];
            matmul_nt_acc(&dq, &p[lay.wq.clone()], n, d, d, &mut da);
            matmul_nt_acc(&dk, &p[lay.wk.clone()], n, d, d, &mut da);
            matmul_nt_acc(&dv, &p[lay.wv.clone()], n, d, d, &mut da);
            if let Some(g) = grads.as_deref_mut() {
                matmul_tn_acc(&t.a, &dq, n, d, d, &mut g[lay.wq.clone()]);
                col_sum_acc(&dq, d, &mut g[lay.bq.clone()]);
                matmul_tn_acc(&t.a, &dk, n, d, d, &mut g[lay.wk.clone()]);
                col_sum_acc(&dk, d, &mut g[lay.bk.clone()]);
                matmul_tn_acc(&t.a, &dv, n, d, d, &mut g[lay.wv.clone()]);
                col_sum_acc(&dv, d, &mut g[lay.bv.clone()]);
            }
            let mut dx0 = dx1;
            let gain1 = &p[lay.ln1.clone()][..d];
            let ln1_grads = grads.as_deref_mut().map(|g| g[lay.ln1.clone()].split_at_mut(d));
            layer_norm_backward(x, &t.ln1, gain1, &da, d, &mut dx0, ln1_grads);
            dx = dx0;
        }
        Ok(dx)
    }
}

#[inline]
fn key_row<'a, T>(ctx: &'a LayerKv<T>, own: &'a [T], start: usize, j: usize, d: usize) -> &'a [T] {
    if j < start {
        &ctx.k[j * d..(j + 1) * d]
    } else {
        &own[(j - start) * d..(j - start + 1) * d]
    }
}

#[inline]
fn value_row<'a, T>(ctx: &'a LayerKv<T>, own: &'a [T], start: usize, j: usize, d: usize) -> &'a [T] {
    if j < start {
        &ctx.v[j * d..(j + 1) * d]
    } else {
        &own[(j - start) * d..(j - start + 1) * d]
    }
}
