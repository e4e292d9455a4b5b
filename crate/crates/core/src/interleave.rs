//! Interleaved text/latent sequences: construction from trajectories,
//! structural validation, forward passes with injected or self-fed latent
//! inputs, and autoregressive decoding.
//!
//! Position layout for every forward pass: the input image's patches come
//! first (one continuous embedding per patch), followed by the serialized
//! token stream. A latent segment serializes as `latent_start`, `K ×
//! latent_pad`, `latent_end`; the pad positions receive continuous inputs
//! instead of token embeddings.

use std::fmt;

use ilvr_numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{IlvrError, Result};
use crate::model::{self, Bound, ForwardOutput, Input, KvCache, Model, ModelConfig, ParameterSet};
use crate::tasks::{PatchGrid, Trajectory};
use crate::vocab::{self, TokenId, ANS, EOS, LATENT_END, LATENT_PAD, LATENT_START};

/// Where latent segments go relative to the reasoning text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// One latent segment after each reasoning step, replacing its helper image.
    Interleaved,
    /// A single latent segment right after the question; all helper images
    /// are collapsed into one.
    Direct,
}

impl std::str::FromStr for Structure {
    type Err = IlvrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(Structure::Interleaved),
            "direct" => Ok(Structure::Direct),
            other => Err(IlvrError::Config(format!(
                "unknown structure `{other}` (expected interleaved or direct)"
            ))),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Interleaved => "interleaved",
            Structure::Direct => "direct",
        })
    }
}

/// Back-reference from a latent segment to the helper image it replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HelperRef {
    /// `steps[m].image` of the trajectory.
    Step(usize),
    /// Elementwise overlay of all helper images (direct structure).
    Collapsed,
}

impl HelperRef {
    pub fn resolve(&self, traj: &Trajectory) -> Result<PatchGrid> {
        match *self {
            HelperRef::Step(m) => traj
                .steps
                .get(m)
                .map(|s| s.image.clone())
                .ok_or_else(|| IlvrError::Data(format!("no helper image for latent step {m}"))),
            HelperRef::Collapsed => {
                let grids: Vec<&PatchGrid> = traj.steps.iter().map(|s| &s.image).collect();
                PatchGrid::overlay(&grids)
                    .ok_or_else(|| IlvrError::Data("helper images cannot be collapsed".into()))
            }
        }
    }
}

impl fmt::Display for HelperRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HelperRef::Step(m) => write!(f, "step{m}"),
            HelperRef::Collapsed => f.write_str("collapsed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSegment {
    pub slots: usize,
    pub source: Option<HelperRef>,
    /// Alignment targets, one per slot.
    pub targets: Option<Vec<Vec<f64>>>,
    /// Continuous inputs at the pad positions, one per slot. Teacher targets
    /// during the first stage; fed-back hidden states after decoding.
    pub inputs: Option<Vec<Vec<f64>>>,
}

impl LatentSegment {
    pub fn new(slots: usize, source: Option<HelperRef>) -> Self {
        Self {
            slots,
            source,
            targets: None,
            inputs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(Vec<TokenId>),
    Latent(LatentSegment),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    /// Input image shown with the question; occupies the leading positions.
    pub image: Option<PatchGrid>,
    /// Number of leading stream tokens that form the question (never scored).
    pub question_len: usize,
    pub k: usize,
    pub segments: Vec<Segment>,
}

impl InterleavedSequence {
    pub fn n_image(&self) -> usize {
        self.image.as_ref().map_or(0, PatchGrid::n_patches)
    }

    /// Serialized token stream (latent slots as `latent_pad`).
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.extend_from_slice(t),
                Segment::Latent(l) => {
                    out.push(LATENT_START);
                    out.extend(std::iter::repeat_n(LATENT_PAD, l.slots));
                    out.push(LATENT_END);
                }
            }
        }
        out
    }

    /// Total positions including image patches.
    pub fn len(&self) -> usize {
        self.n_image() + self.tokens().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text tokens with every latent segment removed.
    pub fn text_tokens(&self) -> Vec<TokenId> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_slice()),
                Segment::Latent(_) => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    pub fn latent_segments(&self) -> impl Iterator<Item = &LatentSegment> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Latent(l) => Some(l),
            Segment::Text(_) => None,
        })
    }

    pub fn latent_segments_mut(&mut self) -> impl Iterator<Item = &mut LatentSegment> {
        self.segments.iter_mut().filter_map(|s| match s {
            Segment::Latent(l) => Some(l),
            Segment::Text(_) => None,
        })
    }

    pub fn n_latent(&self) -> usize {
        self.latent_segments().count()
    }

    /// Global positions of the pad slots, per latent segment.
    pub fn latent_positions(&self) -> Vec<Vec<usize>> {
        let mut pos = self.n_image();
        let mut out = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => pos += t.len(),
                Segment::Latent(l) => {
                    out.push((pos + 1..pos + 1 + l.slots).collect());
                    pos += l.slots + 2;
                }
            }
        }
        out
    }

    /// Global positions of each text segment's tokens, in order.
    pub fn text_positions(&self) -> Vec<Vec<usize>> {
        let mut pos = self.n_image();
        let mut out = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => {
                    out.push((pos..pos + t.len()).collect());
                    pos += t.len();
                }
                Segment::Latent(l) => pos += l.slots + 2,
            }
        }
        out
    }

    /// `(global position, next token)` pairs scored by cross-entropy: every
    /// text or `latent_end` position from the last question token on, whose
    /// successor is a real token. Pad and `latent_start` positions predict
    /// continuous inputs, and `latent_end` itself is forced, so neither is a
    /// target.
    pub fn ce_targets(&self) -> Vec<(usize, TokenId)> {
        let stream = self.tokens();
        let n_image = self.n_image();
        let first = self.question_len.saturating_sub(1);
        (first..stream.len().saturating_sub(1))
            .filter(|&s| {
                !matches!(stream[s], LATENT_START | LATENT_PAD)
                    && !matches!(stream[s + 1], LATENT_PAD | LATENT_END)
            })
            .map(|s| (n_image + s, stream[s + 1]))
            .collect()
    }

    /// Tokens after the last `answer` marker of the final text segment, up to `<eos>`.
    pub fn gold_answer(&self) -> Vec<TokenId> {
        match self.segments.last() {
            Some(Segment::Text(t)) => extract_answer(t),
            _ => Vec::new(),
        }
    }

    /// Debug dump: one JSON record per segment.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            let rec = match seg {
                Segment::Text(t) => json!({"segment": i, "kind": "text", "tokens": t}),
                Segment::Latent(l) => json!({
                    "segment": i,
                    "kind": "latent",
                    "slots": l.slots,
                    "source": l.source.map(|r| r.to_string()),
                    "input_dims": l.inputs.as_ref().map(|v| v.iter().map(Vec::len).collect::<Vec<_>>()),
                    "target_dims": l.targets.as_ref().map(|v| v.iter().map(Vec::len).collect::<Vec<_>>()),
                }),
            };
            s.push_str(&rec.to_string());
            s.push('\n');
        }
        s
    }
}

/// Replaces helper images with latent segments of `k` slots.
///
/// Interleaved: `question ++ text₁`, latent₁, `text₂`, …, latentₙ,
/// `answer …​ <eos>`. Direct: `question`, one collapsed latent, all reasoning
/// text followed by the answer. A trajectory without helper images yields a
/// pure text sequence either way.
pub fn build_supervision_sequence(
    traj: &Trajectory,
    k: usize,
    structure: Structure,
) -> Result<InterleavedSequence> {
    if k == 0 {
        return Err(IlvrError::Config("latent K must be >= 1".into()));
    }
    if traj.question.is_empty() {
        return Err(IlvrError::Data("trajectory has an empty question".into()));
    }
    for (m, step) in traj.steps.iter().enumerate() {
        if step.image.n_patches() == 0 {
            return Err(IlvrError::Data(format!("missing helper image for step {m}")));
        }
        if step.text.is_empty() {
            return Err(IlvrError::Data(format!("step {m} has no reasoning text")));
        }
    }
    let mut tail = vec![ANS];
    tail.extend_from_slice(&traj.answer);
    tail.push(EOS);

    let mut segments = Vec::new();
    let mut text = traj.question.clone();
    match structure {
        Structure::Interleaved => {
            for (m, step) in traj.steps.iter().enumerate() {
                text.extend_from_slice(&step.text);
                segments.push(Segment::Text(std::mem::take(&mut text)));
                segments.push(Segment::Latent(LatentSegment::new(k, Some(HelperRef::Step(m)))));
            }
        }
        Structure::Direct => {
            if !traj.steps.is_empty() {
                segments.push(Segment::Text(std::mem::take(&mut text)));
                segments.push(Segment::Latent(LatentSegment::new(k, Some(HelperRef::Collapsed))));
                for step in &traj.steps {
                    text.extend_from_slice(&step.text);
                }
            }
        }
    }
    text.extend(tail);
    segments.push(Segment::Text(text));
    Ok(InterleavedSequence {
        image: Some(traj.image.clone()),
        question_len: traj.question.len(),
        k,
        segments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    SegmentLength,
    UnbalancedMarkers,
    StrayPad,
    EmptyText,
    AdjacentLatent,
    Boundary,
    VectorCount,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::SegmentLength => "segment length",
            ViolationKind::UnbalancedMarkers => "unbalanced markers",
            ViolationKind::StrayPad => "stray pad",
            ViolationKind::EmptyText => "empty text",
            ViolationKind::AdjacentLatent => "adjacent latent segments",
            ViolationKind::Boundary => "must start and end with text",
            ViolationKind::VectorCount => "vector count",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Segment index, or stream index for [`validate_stream`].
    pub at: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.kind, self.at)
    }
}

/// Structural check of a sequence; returns every violation found.
pub fn validate(seq: &InterleavedSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, at| out.push(Violation { kind, at });
    if !matches!(seq.segments.first(), Some(Segment::Text(_)))
        || !matches!(seq.segments.last(), Some(Segment::Text(_)))
    {
        push(ViolationKind::Boundary, 0);
    }
    let mut prev_latent = false;
    for (i, seg) in seq.segments.iter().enumerate() {
        match seg {
            Segment::Text(t) => {
                if t.is_empty() {
                    push(ViolationKind::EmptyText, i);
                }
                if t.iter().any(|&x| x == LATENT_START || x == LATENT_END) {
                    push(ViolationKind::UnbalancedMarkers, i);
                }
                if t.contains(&LATENT_PAD) {
                    push(ViolationKind::StrayPad, i);
                }
                prev_latent = false;
            }
            Segment::Latent(l) => {
                if l.slots != seq.k {
                    push(ViolationKind::SegmentLength, i);
                }
                for v in [&l.inputs, &l.targets].into_iter().flatten() {
                    if v.len() != l.slots {
                        push(ViolationKind::VectorCount, i);
                    }
                }
                if prev_latent {
                    push(ViolationKind::AdjacentLatent, i);
                }
                prev_latent = true;
            }
        }
    }
    out
}

/// Grammar check of a serialized stream against
/// `text⁺ (latent_start pad^k latent_end text⁺)*`.
pub fn validate_stream(tokens: &[TokenId], k: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut i = 0;
    let mut text_run = 0;
    while i < tokens.len() {
        match tokens[i] {
            LATENT_START => {
                if text_run == 0 {
                    out.push(Violation {
                        kind: ViolationKind::EmptyText,
                        at: i,
                    });
                }
                let pads = tokens[i + 1..].iter().take_while(|&&t| t == LATENT_PAD).count();
                let end = i + 1 + pads;
                if tokens.get(end) != Some(&LATENT_END) {
                    out.push(Violation {
                        kind: ViolationKind::UnbalancedMarkers,
                        at: i,
                    });
                } else if pads != k {
                    out.push(Violation {
                        kind: ViolationKind::SegmentLength,
                        at: i,
                    });
                }
                i = end + 1;
                text_run = 0;
                continue;
            }
            LATENT_END => out.push(Violation {
                kind: ViolationKind::UnbalancedMarkers,
                at: i,
            }),
            LATENT_PAD => out.push(Violation {
                kind: ViolationKind::StrayPad,
                at: i,
            }),
            _ => text_run += 1,
        }
        i += 1;
    }
    if text_run == 0 {
        out.push(Violation {
            kind: ViolationKind::Boundary,
            at: tokens.len(),
        });
    }
    out
}

/// How pad positions get their inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentInputs {
    /// Each segment's `inputs` vectors (teacher forcing).
    Injected,
    /// The hidden state of the preceding position. With `detach`, gradients
    /// stop at the feedback boundary.
    SelfFeedback { detach: bool },
}

/// Chunked forward over a whole sequence on one tape.
#[derive(Debug, Clone)]
pub struct SequenceForward {
    pub chunks: Vec<ForwardOutput>,
    pub n_positions: usize,
}

impl SequenceForward {
    fn locate(&self, pos: usize) -> Result<(usize, usize)> {
        let idx = self.chunks.partition_point(|c| c.start <= pos);
        if idx == 0 || pos >= self.n_positions {
            return Err(IlvrError::Contract(format!("position {pos} outside forward pass")));
        }
        Ok((idx - 1, pos - self.chunks[idx - 1].start))
    }

    fn gather(&self, tape: &mut Tape, positions: &[usize], pick: impl Fn(&ForwardOutput) -> Var) -> Result<Var> {
        // group consecutive positions from the same chunk into one gather
        let mut parts = Vec::new();
        let mut i = 0;
        while i < positions.len() {
            let (c, r) = self.locate(positions[i])?;
            let mut rows = vec![r];
            i += 1;
            while i < positions.len() {
                let (c2, r2) = self.locate(positions[i])?;
                if c2 != c {
                    break;
                }
                rows.push(r2);
                i += 1;
            }
            parts.push(tape.gather_rows(pick(&self.chunks[c]), &rows)?);
        }
        match parts.len() {
            0 => Err(IlvrError::Contract("no positions requested".into())),
            1 => Ok(parts[0]),
            _ => Ok(tape.concat_rows(&parts)?),
        }
    }

    pub fn hidden_rows(&self, tape: &mut Tape, positions: &[usize]) -> Result<Var> {
        self.gather(tape, positions, |c| c.hidden)
    }

    pub fn logit_rows(&self, tape: &mut Tape, positions: &[usize]) -> Result<Var> {
        self.gather(tape, positions, |c| c.logits)
    }

    /// All final hidden states as one `[T × H]` tensor.
    pub fn hidden_values(&self, tape: &Tape) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.chunks.iter().map(|c| tape.value(c.hidden)).collect();
        Ok(Tensor::concat_rows(&parts)?)
    }

    /// All normalized attention inputs of `layer` as one `[T × H]` tensor.
    pub fn attn_input_values(&self, tape: &Tape, layer: usize) -> Result<Tensor> {
        let parts = self
            .chunks
            .iter()
            .map(|c| {
                c.attn_inputs
                    .get(layer)
                    .map(|&v| tape.value(v))
                    .ok_or_else(|| IlvrError::Contract(format!("layer {layer} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat_rows(&parts)?)
    }
}

/// Runs the model over `seq` (image patches first, then the stream).
pub fn forward_sequence(
    cfg: &ModelConfig,
    tape: &mut Tape,
    bound: &Bound,
    params: &ParameterSet,
    seq: &InterleavedSequence,
    mode: LatentInputs,
) -> Result<SequenceForward> {
    let total = seq.len();
    if total > cfg.max_seq_len {
        return Err(IlvrError::SequenceTooLong {
            len: total,
            max: cfg.max_seq_len,
        });
    }
    let mut pending: Vec<Input> = Vec::new();
    if let Some(img) = &seq.image {
        let c = model::encode_image(params, img)?;
        pending.extend(c.to_rows().into_iter().map(Input::Vector));
    }
    let mut cache = KvCache::new(cfg.n_layers);
    let mut chunks: Vec<ForwardOutput> = Vec::new();
    let mut flush = |tape: &mut Tape, pending: &mut Vec<Input>, chunks: &mut Vec<ForwardOutput>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let x = model::embed(tape, bound, pending)?;
        pending.clear();
        chunks.push(model::forward_chunk(cfg, tape, bound, &mut cache, x)?);
        Ok(())
    };
    for seg in &seq.segments {
        match seg {
            Segment::Text(t) => pending.extend(t.iter().map(|&x| Input::Token(x))),
            Segment::Latent(l) => {
                pending.push(Input::Token(LATENT_START));
                match mode {
                    LatentInputs::Injected => {
                        let inputs = l.inputs.as_ref().ok_or_else(|| {
                            IlvrError::Contract("latent segment has no injected inputs".into())
                        })?;
                        if inputs.len() != l.slots {
                            return Err(IlvrError::Contract(format!(
                                "{} injected inputs for {} slots",
                                inputs.len(),
                                l.slots
                            )));
                        }
                        pending.extend(inputs.iter().cloned().map(Input::Vector));
                    }
                    LatentInputs::SelfFeedback { detach } => {
                        for _ in 0..l.slots {
                            flush(tape, &mut pending, &mut chunks)?;
                            let last = chunks.last().expect("a chunk precedes every latent slot");
                            let rows = tape.value(last.hidden).rows();
                            let input = if detach {
                                Input::Vector(tape.value(last.hidden).row_vec(rows - 1))
                            } else {
                                Input::Row(tape.gather_rows(last.hidden, &[rows - 1])?)
                            };
                            pending.push(input);
                        }
                    }
                }
                pending.push(Input::Token(LATENT_END));
            }
        }
    }
    flush(tape, &mut pending, &mut chunks)?;
    Ok(SequenceForward {
        chunks,
        n_positions: total,
    })
}

/// Answer tokens of a generated text: after the last `answer` marker (or
/// from the start when there is none), up to the first `<eos>`.
pub fn extract_answer(tokens: &[TokenId]) -> Vec<TokenId> {
    let from = tokens.iter().rposition(|&t| t == ANS).map_or(0, |i| i + 1);
    tokens[from..].iter().copied().take_while(|&t| t != EOS).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    /// Budget of generated positions (text tokens, markers and latent steps).
    pub max_tokens: usize,
    /// 0 means greedy argmax.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_tokens: 160,
            temperature: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceInput {
    Token(TokenId),
    Vector(Vec<f64>),
}

/// One processed position during decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub input: TraceInput,
    /// Final hidden state at this position.
    pub hidden: Vec<f64>,
    /// Token drawn from this position's logits, if any was drawn.
    pub sampled: Option<TokenId>,
    pub latent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub sequence: InterleavedSequence,
    /// Generated stream (latent slots as `latent_pad`).
    pub generated: Vec<TokenId>,
    pub trace: Vec<TraceStep>,
}

impl Decoded {
    pub fn answer(&self) -> Vec<TokenId> {
        let after = self
            .generated
            .iter()
            .rposition(|&t| t == LATENT_END)
            .map_or(0, |i| i + 1);
        extract_answer(&self.generated[after..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Text,
    Latent { remaining: usize },
}

/// Decoder state for one generation.
struct DecodeState<'a> {
    cfg: &'a ModelConfig,
    tape: Tape,
    bound: Bound,
    cache: KvCache,
    trace: Vec<TraceStep>,
    logits: Vec<f64>,
}

impl DecodeState<'_> {
    fn push(&mut self, inputs: Vec<Input>, latent: bool) -> Result<()> {
        let x = model::embed(&mut self.tape, &self.bound, &inputs)?;
        let out = model::forward_chunk(self.cfg, &mut self.tape, &self.bound, &mut self.cache, x)?;
        let hidden = self.tape.value(out.hidden);
        let logits = self.tape.value(out.logits);
        for (r, inp) in inputs.into_iter().enumerate() {
            let input = match inp {
                Input::Token(t) => TraceInput::Token(t),
                Input::Vector(v) => TraceInput::Vector(v),
                Input::Row(v) => TraceInput::Vector(self.tape.value(v).data().to_vec()),
            };
            self.trace.push(TraceStep {
                input,
                hidden: hidden.row_vec(r),
                sampled: None,
                latent,
            });
        }
        self.logits = logits.row_vec(logits.rows() - 1);
        Ok(())
    }

    fn last_hidden(&self) -> Vec<f64> {
        self.trace.last().expect("prompt processed").hidden.clone()
    }
}

fn choose(logits: &[f64], banned: &[TokenId], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let allowed = |t: &usize| !banned.contains(t);
    if temperature <= 0.0 {
        let mut best = None;
        for (t, &v) in logits.iter().enumerate().filter(|(t, _)| allowed(t)) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        return best.expect("vocabulary has unbanned tokens").0;
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|(t, _)| allowed(t))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(t, &v)| if allowed(&t) { ((v - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (t, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return t;
            }
            u -= w;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).expect("positive weight")
}

/// Autoregressive generation from `image` + `prompt`.
///
/// Text mode picks tokens from the vocabulary (`latent_end` and
/// `latent_pad` are never eligible, nor is `latent_start` directly after a
/// latent segment). Emitting `latent_start` switches to latent mode for
/// exactly `K` steps, each feeding the previous final hidden state back as
/// the next input embedding; `latent_end` is then appended without sampling.
/// Generation stops at `<eos>` or when the budget runs out; running out
/// inside a latent segment, or before any text follows one, is an
/// [`IlvrError::Truncated`] carrying the partial sequence.
pub fn decode(
    model: &Model,
    image: Option<&PatchGrid>,
    prompt: &[TokenId],
    opts: &DecodeOptions,
) -> Result<Decoded> {
    if prompt.is_empty() {
        return Err(IlvrError::Contract("decode needs a nonempty prompt".into()));
    }
    let cfg = &model.config;
    let k = cfg.latent_k;
    let mut tape = Tape::new();
    let bound = model::bind_frozen(&mut tape, &model.params);
    let mut state = DecodeState {
        cfg,
        tape,
        bound,
        cache: KvCache::new(cfg.n_layers),
        trace: Vec::new(),
        logits: Vec::new(),
    };
    let mut inputs = Vec::new();
    if let Some(img) = image {
        inputs.extend(model.encode_image(img)?.to_rows().into_iter().map(Input::Vector));
    }
    inputs.extend(prompt.iter().map(|&t| Input::Token(t)));
    let n_prompt = inputs.len();
    state.push(inputs, false)?;

    let budget = opts.max_tokens.min(cfg.max_seq_len.saturating_sub(n_prompt));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut generated: Vec<TokenId> = Vec::new();
    let mut segments = Vec::new();
    let mut text: Vec<TokenId> = prompt.to_vec();
    let mut mode = Mode::Text;
    let mut after_latent = false;

    let partial = |segments: &[Segment], text: &[TokenId], open: Option<LatentSegment>| {
        let mut segs = segments.to_vec();
        if !text.is_empty() {
            segs.push(Segment::Text(text.to_vec()));
        }
        if let Some(l) = open {
            segs.push(Segment::Latent(l));
        }
        Box::new(InterleavedSequence {
            image: image.cloned(),
            question_len: prompt.len(),
            k,
            segments: segs,
        })
    };

    while generated.len() < budget {
        match mode {
            Mode::Text => {
                let mut banned = vec![LATENT_END, LATENT_PAD];
                if after_latent {
                    banned.push(LATENT_START);
                }
                let tok = choose(&state.logits, &banned, opts.temperature, &mut rng);
                state.trace.last_mut().expect("nonempty").sampled = Some(tok);
                generated.push(tok);
                if tok == LATENT_START {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                    state.push(vec![Input::Token(LATENT_START)], true)?;
                    mode = Mode::Latent { remaining: k };
                    continue;
                }
                text.push(tok);
                after_latent = false;
                if tok == EOS {
                    break;
                }
                state.push(vec![Input::Token(tok)], false)?;
            }
            Mode::Latent { remaining } if remaining > 0 => {
                let h = state.last_hidden();
                state.push(vec![Input::Vector(h)], true)?;
                generated.push(LATENT_PAD);
                mode = Mode::Latent {
                    remaining: remaining - 1,
                };
            }
            Mode::Latent { .. } => {
                let latents = collect_latents(&state.trace, k);
                segments.push(Segment::Latent(LatentSegment {
                    slots: k,
                    source: None,
                    targets: None,
                    inputs: Some(latents),
                }));
                generated.push(LATENT_END);
                state.push(vec![Input::Token(LATENT_END)], false)?;
                mode = Mode::Text;
                after_latent = true;
            }
        }
    }

    match mode {
        Mode::Latent { remaining } => {
            let done = k - remaining;
            let mut open = LatentSegment::new(done, None);
            open.inputs = Some(collect_latents(&state.trace, done));
            Err(IlvrError::Truncated {
                partial: partial(&segments, &text, Some(open)),
            })
        }
        Mode::Text if after_latent => Err(IlvrError::Truncated {
            partial: partial(&segments, &text, None),
        }),
        Mode::Text => {
            segments.push(Segment::Text(text));
            Ok(Decoded {
                sequence: InterleavedSequence {
                    image: image.cloned(),
                    question_len: prompt.len(),
                    k,
                    segments,
                },
                generated,
                trace: state.trace,
            })
        }
    }
}

/// Continuous inputs of the last `n` latent positions in the trace.
fn collect_latents(trace: &[TraceStep], n: usize) -> Vec<Vec<f64>> {
    trace[trace.len() - n..]
        .iter()
        .map(|s| match &s.input {
            TraceInput::Vector(v) => v.clone(),
            TraceInput::Token(_) => unreachable!("latent slots take vector inputs"),
        })
        .collect()
}

/// Renders a stream with latent segments compacted, e.g. `up [latent×8] down`.
pub fn render_stream(tokens: &[TokenId]) -> String {
    let mut parts = Vec::new();
    let mut pads = 0;
    for &t in tokens {
        match t {
            LATENT_START => pads = 0,
            LATENT_PAD => pads += 1,
            LATENT_END => parts.push(format!("[latent×{pads}]")),
            _ => parts.push(vocab::name(t)),
        }
    }
    parts.join(" ")
}
