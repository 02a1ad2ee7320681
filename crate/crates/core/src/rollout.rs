//! Multi-turn generation with evidence insertion.
//!
//! A rollout starts from the image patches followed by the question and an
//! opening `<think>`. Each turn samples text until the policy emits
//! `<insert_evidence>`, closes an answer span, or spends its token budget.
//! An insertion appends `<evidence>`, the cached snapshot vectors verbatim,
//! and `</evidence>`; generation then continues on top of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence_cache::EvidenceCache;
use crate::grounding::{EvidenceSnapshot, PatchBox};
use crate::metrics::BBox;
use crate::numerics::{log_softmax, RngStream, Scalar};
use crate::raster::RgbImage;
use crate::synth_data::Sample;
use crate::toy_vlm::{
    sample_next_token, Decoder, Model, Slot, TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, EVIDENCE_CLOSE,
    EVIDENCE_OPEN, INSERT_EVIDENCE, THINK_CLOSE, THINK_OPEN,
};

/// Question text followed by the opening think marker.
pub fn prompt_text(question: &str) -> String {
    format!("{question} {THINK_OPEN}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutParams {
    pub max_turns: usize,
    pub turn_budget: usize,
    pub temperature: f64,
}

impl Default for RolloutParams {
    fn default() -> Self {
        Self { max_turns: 4, turn_budget: 64, temperature: 1.0 }
    }
}

/// Where the next token comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    /// Softmax sampling at the given temperature; 0 is greedy.
    Temperature(f64),
    /// Emits a fixed token sequence regardless of the logits.
    Scripted { tokens: Vec<TokenId>, next: usize },
}

impl Sampler {
    pub fn scripted(tokens: Vec<TokenId>) -> Self {
        Self::Scripted { tokens, next: 0 }
    }

    fn draw<T: Scalar>(&mut self, logits: &[T], rng: &mut RngStream) -> Result<TokenId> {
        match self {
            Self::Temperature(t) => sample_next_token(logits, *t, rng),
            Self::Scripted { tokens, next } => {
                let id = *tokens.get(*next).ok_or_else(|| Error::Config("scripted sampler ran out of tokens".into()))?;
                *next += 1;
                Ok(id)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    InsertEvidence,
    Answer,
    Continue,
    /// The sequence hit the model's context limit.
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Answer,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Insertion<T> {
    pub anchor_id: Option<TokenId>,
    pub anchor_token: Option<String>,
    pub bbox_patches: Option<PatchBox>,
    pub bbox_pixels: Option<BBox>,
    pub n_vectors: usize,
    pub failed: bool,
    #[serde(skip)]
    pub vectors: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Turn<T> {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each generated token under the sampling policy.
    pub logprobs: Vec<f64>,
    pub action: Action,
    pub insertion: Option<Insertion<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    pub sample_id: String,
    pub prompt_ids: Vec<TokenId>,
    pub turns: Vec<Turn<T>>,
    pub final_answer: Option<String>,
    pub insertion_count: usize,
    pub failed_insertions: usize,
    pub terminated_by: TerminatedBy,
    pub think_token_count: usize,
    pub model_version: u64,
}

/// The generated part of an assembled sequence, as needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct Suffix<T> {
    pub slots: Vec<Slot>,
    /// Rows for the `Fixed` slots, concatenated in order.
    pub fixed: Vec<T>,
    /// `(suffix index, token, logprob at generation)` for every sampled token.
    pub targets: Vec<(usize, TokenId, f64)>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn generated_len(&self) -> usize {
        self.turns.iter().map(|t| t.tokens.len()).sum()
    }

    /// Slots of everything after the prompt, in temporal order.
    pub fn suffix(&self, vocab: &Vocab) -> Suffix<T> {
        let mut slots = Vec::new();
        let mut fixed = Vec::new();
        let mut targets = Vec::new();
        for turn in &self.turns {
            for (&id, &lp) in turn.tokens.iter().zip(&turn.logprobs) {
                targets.push((slots.len(), id, lp));
                slots.push(Slot::Token(id));
            }
            if let Some(ins) = &turn.insertion {
                slots.push(Slot::Token(vocab.expect_id(EVIDENCE_OPEN)));
                slots.extend(std::iter::repeat_n(Slot::Fixed, ins.n_vectors));
                fixed.extend_from_slice(&ins.vectors);
                slots.push(Slot::Token(vocab.expect_id(EVIDENCE_CLOSE)));
            }
        }
        Suffix { slots, fixed, targets }
    }

    /// One JSON object per turn; the last carries the termination record.
    pub fn to_jsonl(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (i, turn) in self.turns.iter().enumerate() {
            let mut obj = serde_json::json!({
                "sample_id": self.sample_id,
                "turn": i,
                "token_ids": turn.tokens,
                "text": vocab.detokenize(&turn.tokens),
                "action": turn.action,
                "insertion": turn.insertion,
                "model_version": self.model_version,
            });
            if i + 1 == self.turns.len() {
                obj["termination"] = serde_json::json!({
                    "terminated_by": self.terminated_by,
                    "final_answer": self.final_answer,
                    "insertion_count": self.insertion_count,
                    "failed_insertions": self.failed_insertions,
                    "think_token_count": self.think_token_count,
                });
            }
            out.push_str(&obj.to_string());
            out.push('\n');
        }
        out
    }
}

/// Live generation state: the decoder holds keys and values for everything
/// assembled so far.
#[derive(Debug, Clone)]
pub struct RolloutState<'m, T> {
    decoder: Decoder<'m, T>,
    sample_id: String,
    prompt_ids: Vec<TokenId>,
    turns: Vec<Turn<T>>,
    ids: Ids,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    think_open: TokenId,
    think_close: TokenId,
    answer_open: TokenId,
    answer_close: TokenId,
    insert: TokenId,
    evidence_open: TokenId,
    evidence_close: TokenId,
}

impl Ids {
    fn new(v: &Vocab) -> Self {
        Self {
            think_open: v.expect_id(THINK_OPEN),
            think_close: v.expect_id(THINK_CLOSE),
            answer_open: v.expect_id(ANSWER_OPEN),
            answer_close: v.expect_id(ANSWER_CLOSE),
            insert: v.expect_id(INSERT_EVIDENCE),
            evidence_open: v.expect_id(EVIDENCE_OPEN),
            evidence_close: v.expect_id(EVIDENCE_CLOSE),
        }
    }
}

impl<'m, T: Scalar> RolloutState<'m, T> {
    /// Encodes the image and prompt.
    pub fn start(model: &'m Model<T>, sample_id: &str, image: &RgbImage, question: &str) -> Result<Self> {
        let prompt_ids = model.tokenize(&prompt_text(question));
        let (rows, _) = model.embed_stream(image, &prompt_ids)?;
        let mut decoder = Decoder::new(model);
        decoder.push(&rows)?;
        Ok(Self {
            decoder,
            sample_id: sample_id.to_string(),
            prompt_ids,
            turns: Vec::new(),
            ids: Ids::new(model.vocab()),
        })
    }

    pub fn len(&self) -> usize {
        self.decoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoder.is_empty()
    }

    pub fn turns(&self) -> &[Turn<T>] {
        &self.turns
    }

    pub fn last_logits(&self) -> &[T] {
        self.decoder.last_logits()
    }

    fn model(&self) -> &'m Model<T> {
        self.decoder.model()
    }

    /// Generates one turn of text.
    pub fn step(&mut self, sampler: &mut Sampler, rng: &mut RngStream, budget: usize) -> Result<Action> {
        let max_seq = self.model().config.max_seq;
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut in_answer = false;
        let mut action = Action::Continue;
        for _ in 0..budget {
            if self.decoder.len() >= max_seq {
                action = Action::Horizon;
                break;
            }
            let logits = self.decoder.last_logits();
            let id = sampler.draw(logits, rng)?;
            logprobs.push(token_logprob(logits, id));
            tokens.push(id);
            let pos = self.decoder.len();
            let row = self.model().embed_token(id, pos)?;
            self.decoder.push(&row)?;
            if id == self.ids.insert {
                action = Action::InsertEvidence;
                break;
            }
            if id == self.ids.answer_open {
                in_answer = true;
            } else if id == self.ids.answer_close && in_answer {
                action = Action::Answer;
                break;
            }
        }
        self.turns.push(Turn { tokens, logprobs, action, insertion: None });
        Ok(action)
    }

    /// Splices a snapshot after the last turn. A missing or empty snapshot
    /// leaves only the marker pair and is recorded as a failed insertion.
    /// Returns `false` when the markers and vectors would not fit.
    pub fn apply_insertion(&mut self, snapshot: Option<&EvidenceSnapshot<T>>) -> Result<bool> {
        let model = self.model();
        let d = model.config.d_model;
        let snap = snapshot.filter(|s| s.n_vectors() > 0);
        if let Some(s) = snap {
            if s.d != d {
                return Err(Error::Shape(format!("snapshot width {} does not match model width {d}", s.d)));
            }
        }
        let n = snap.map_or(0, |s| s.n_vectors());
        if self.decoder.len() + n + 2 > model.config.max_seq {
            return Ok(false);
        }
        let start = self.decoder.len();
        let mut rows = model.embed_token(self.ids.evidence_open, start)?;
        if let Some(s) = snap {
            rows.extend_from_slice(&s.embeddings);
        }
        rows.extend(model.embed_token(self.ids.evidence_close, start + n + 1)?);
        self.decoder.push(&rows)?;
        let record = Insertion {
            anchor_id: snap.map(|s| s.anchor_id),
            anchor_token: snap.map(|s| s.anchor_token.clone()),
            bbox_patches: snap.map(|s| s.region.bbox_patches),
            bbox_pixels: snap.map(|s| s.region.bbox_pixels),
            n_vectors: n,
            failed: snap.is_none(),
            vectors: snap.map(|s| s.embeddings.clone()).unwrap_or_default(),
        };
        let turn = self.turns.last_mut().ok_or_else(|| Error::Config("insertion before any turn".into()))?;
        turn.insertion = Some(record);
        Ok(true)
    }

    /// Runs turns until an answer, the turn limit or the context limit.
    pub fn run(
        mut self,
        snapshot: Option<&EvidenceSnapshot<T>>,
        sampler: &mut Sampler,
        rng: &mut RngStream,
        params: &RolloutParams,
    ) -> Result<Trajectory<T>> {
        let mut terminated_by = TerminatedBy::Horizon;
        for _ in 0..params.max_turns {
            match self.step(sampler, rng, params.turn_budget)? {
                Action::Answer => {
                    terminated_by = TerminatedBy::Answer;
                    break;
                }
                Action::InsertEvidence => {
                    if !self.apply_insertion(snapshot)? {
                        break;
                    }
                }
                Action::Continue => {}
                Action::Horizon => break,
            }
        }
        Ok(self.finish(terminated_by))
    }

    fn finish(self, terminated_by: TerminatedBy) -> Trajectory<T> {
        let ids = self.ids;
        let final_answer = match (terminated_by, self.turns.last()) {
            (TerminatedBy::Answer, Some(t)) => {
                let open = t.tokens.iter().rposition(|&x| x == ids.answer_open).unwrap_or(0);
                let body = &t.tokens[open + 1..t.tokens.len() - 1];
                Some(self.model().vocab().detokenize(body))
            }
            _ => None,
        };
        let insertion_count =
            self.turns.iter().filter(|t| t.insertion.as_ref().is_some_and(|i| !i.failed)).count();
        let failed_insertions =
            self.turns.iter().filter(|t| t.insertion.as_ref().is_some_and(|i| i.failed)).count();
        let vocab = self.model().vocab();
        let mut inside = false;
        let mut think_token_count = 0;
        for &id in self.prompt_ids.iter().chain(self.turns.iter().flat_map(|t| &t.tokens)) {
            if id == ids.think_open {
                inside = true;
            } else if id == ids.think_close {
                inside = false;
            } else if inside && !vocab.is_control(id) {
                think_token_count += 1;
            }
        }
        Trajectory {
            sample_id: self.sample_id,
            prompt_ids: self.prompt_ids,
            turns: self.turns,
            final_answer,
            insertion_count,
            failed_insertions,
            terminated_by,
            think_token_count,
            model_version: self.decoder.model().version,
        }
    }
}

/// Log-probability of `id` under the temperature-1 policy.
pub fn token_logprob<T: Scalar>(logits: &[T], id: TokenId) -> f64 {
    log_softmax(logits, T::one())[id as usize].to_f64_lossy()
}

/// Snapshot a rollout inserts for a cache entry: the one grounded from the
/// most salient anchor.
pub fn chosen_snapshot<'c, T: Scalar>(cache: &'c EvidenceCache<T>, sample_id: &str) -> Option<&'c EvidenceSnapshot<T>> {
    cache.lookup(sample_id).and_then(|e| e.snapshots.first())
}

/// One complete rollout for a sample, sampling at `params.temperature`.
pub fn run_rollout<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    cache: &EvidenceCache<T>,
    params: &RolloutParams,
    rng: &mut RngStream,
) -> Result<Trajectory<T>> {
    let state = RolloutState::start(model, &sample.sample_id, &sample.image, &sample.question)?;
    state.run(chosen_snapshot(cache, &sample.sample_id), &mut Sampler::Temperature(params.temperature), rng, params)
}
