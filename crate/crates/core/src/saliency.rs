//! Gradient × input saliency and anchor selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Scalar};
use crate::toy_vlm::{Modality, TokenId, TokenStream, Vocab, STOP_WORDS_TXT};

/// `‖∇h_i s ⊙ h_i‖₂` for every row.
pub fn compute_saliency<T: Scalar>(grads: &[T], inputs: &[T], d: usize) -> Result<Vec<T>> {
    if grads.len() != inputs.len() || d == 0 || inputs.len() % d != 0 {
        return Err(Error::Shape(format!(
            "gradient ({}) and input ({}) blocks must match and be multiples of d={d}",
            grads.len(),
            inputs.len()
        )));
    }
    let mut prod = vec![T::zero(); d];
    Ok(grads
        .chunks_exact(d)
        .zip(inputs.chunks_exact(d))
        .map(|(g, h)| {
            for ((p, &gi), &hi) in prod.iter_mut().zip(g).zip(h) {
                *p = gi * hi;
            }
            l2_norm(&prod)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords(BTreeSet<String>);

impl StopWords {
    /// The bundled English function-word list.
    pub fn standard() -> Self {
        Self::from_text(STOP_WORDS_TXT)
    }

    /// One word per line; blank lines ignored.
    pub fn from_text(text: &str) -> Self {
        Self(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_lowercase).collect())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor<T> {
    pub position: usize,
    pub token_id: TokenId,
    pub token: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet<T> {
    /// Sorted by descending score; ties keep sequence order.
    pub anchors: Vec<Anchor<T>>,
    pub threshold_used: T,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    /// Applies the score threshold again; a no-op on a set produced by
    /// [`filter_anchors`] with the same threshold.
    pub fn refilter(&self, threshold: T) -> Self {
        Self {
            anchors: self.anchors.iter().filter(|a| a.score > threshold).cloned().collect(),
            threshold_used: threshold,
        }
    }
}

/// Keeps text positions whose score exceeds `threshold` and whose token is
/// neither a control token nor a stop word.
pub fn filter_anchors<T: Scalar>(
    scores: &[T],
    stream: &TokenStream,
    vocab: &Vocab,
    stop_words: &StopWords,
    threshold: T,
) -> Result<AnchorSet<T>> {
    if !(threshold >= T::zero()) {
        return Err(Error::Config(format!("anchor threshold must be >= 0, got {threshold}")));
    }
    if scores.len() != stream.len() {
        return Err(Error::Shape(format!(
            "{} saliency scores for a {}-token stream",
            scores.len(),
            stream.len()
        )));
    }
    let mut anchors: Vec<Anchor<T>> = candidates(stream, vocab, stop_words)
        .filter(|&(pos, _)| scores[pos] > threshold)
        .map(|(position, token_id)| Anchor {
            position,
            token_id,
            token: vocab.token(token_id).unwrap_or_default().to_string(),
            score: scores[position],
        })
        .collect();
    anchors.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(AnchorSet { anchors, threshold_used: threshold })
}

fn candidates<'a>(
    stream: &'a TokenStream,
    vocab: &'a Vocab,
    stop_words: &'a StopWords,
) -> impl Iterator<Item = (usize, TokenId)> + 'a {
    (0..stream.len())
        .filter(move |&p| stream.modality(p) == Modality::Text)
        .filter_map(move |p| stream.id_at(p).map(|id| (p, id)))
        .filter(move |&(_, id)| !vocab.is_control(id) && id != vocab.unk())
        .filter(move |&(_, id)| !stop_words.contains(vocab.token(id).unwrap_or_default()))
}

/// Threshold rule: keep candidates scoring above `relative × max candidate
/// score`, at most `max_anchors` of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPolicy {
    pub relative: f64,
    pub max_anchors: usize,
}

impl Default for AnchorPolicy {
    fn default() -> Self {
        Self { relative: 0.5, max_anchors: 4 }
    }
}

pub fn select_anchors<T: Scalar>(
    scores: &[T],
    stream: &TokenStream,
    vocab: &Vocab,
    stop_words: &StopWords,
    policy: AnchorPolicy,
) -> Result<AnchorSet<T>> {
    if scores.len() != stream.len() {
        return Err(Error::Shape(format!(
            "{} saliency scores for a {}-token stream",
            scores.len(),
            stream.len()
        )));
    }
    let max = candidates(stream, vocab, stop_words).map(|(p, _)| scores[p]).fold(T::zero(), T::max);
    let mut set = filter_anchors(scores, stream, vocab, stop_words, T::of(policy.relative) * max)?;
    set.anchors.truncate(policy.max_anchors);
    Ok(set)
}
