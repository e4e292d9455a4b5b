//! Momentum teacher and supervision-target selection.
//!
//! The teacher is an EMA copy of the online parameters. For each latent
//! segment it encodes the helper image, pools the patch features into at
//! most `L` candidates, builds a step-specific query from the global intent,
//! the local text history, and the previous step's targets, and keeps the
//! `K` candidates most cosine-similar to that query.

use std::fmt;
use std::ops::Range;

use ilvr_numerics::{cosine, Tape, Tensor};

use crate::error::{IlvrError, Result};
use crate::interleave::{InterleavedSequence, Segment};
use crate::model::{self, Input, KvCache, ModelConfig, ParameterSet};
use crate::tasks::Trajectory;
use crate::vocab::{LATENT_END, LATENT_START};

/// Candidate-pool size used by the original large-scale setup.
pub const REFERENCE_GROUP_SIZE: usize = 784;
/// Desk-scale default: toy images have at most 64 patches.
pub const DEFAULT_GROUP_SIZE: usize = 16;
pub const DEFAULT_TAU: f64 = 0.999;

/// θ_m ← τ·θ_m + (1 − τ)·θ for every trainable array. Frozen arrays are
/// identical in both copies and are left alone.
pub fn ema_update(teacher: &mut ParameterSet, online: &ParameterSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(IlvrError::Config(format!("EMA decay {tau} outside [0, 1]")));
    }
    if teacher.params.len() != online.params.len() {
        return Err(IlvrError::Contract(format!(
            "teacher has {} parameter arrays, online model {}",
            teacher.params.len(),
            online.params.len()
        )));
    }
    for (t, o) in teacher.params.iter().zip(&online.params) {
        if t.name != o.name || t.tensor.shape() != o.tensor.shape() {
            return Err(IlvrError::ParamShape {
                name: o.name.clone(),
                left: t.tensor.shape().to_vec(),
                right: o.tensor.shape().to_vec(),
            });
        }
    }
    for (t, o) in teacher.params.iter_mut().zip(&online.params) {
        if o.frozen {
            continue;
        }
        for (a, &b) in t.tensor.data_mut().iter_mut().zip(o.tensor.data()) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumTeacher {
    pub params: ParameterSet,
    pub tau: f64,
}

impl MomentumTeacher {
    /// Starts as an exact copy of the online parameters (no gradients).
    pub fn new(online: &ParameterSet, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(IlvrError::Config(format!("EMA decay {tau} outside [0, 1]")));
        }
        let mut params = online.clone();
        for p in &mut params.params {
            p.tensor.set_requires_grad(false);
        }
        Ok(Self { params, tau })
    }

    pub fn update(&mut self, online: &ParameterSet) -> Result<()> {
        ema_update(&mut self.params, online, self.tau)
    }
}

/// Pooled candidates `C'_m` and the raw-patch range behind each one.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub features: Tensor,
    pub sources: Vec<Range<usize>>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Contiguous chunk sizes for `p` items into `l` groups, larger chunks first.
pub fn chunk_sizes(p: usize, l: usize) -> Vec<usize> {
    let (q, r) = (p / l, p % l);
    (0..l).map(|i| q + usize::from(i < r)).collect()
}

/// Mean-pools rows of `c` into `l` contiguous groups; identity when fewer
/// than `l` rows.
pub fn group_mean(c: &Tensor, l: usize) -> Result<CandidatePool> {
    let p = c.rows();
    if p == 0 || l == 0 {
        return Err(IlvrError::Contract("group_mean needs P >= 1 and L >= 1".into()));
    }
    if p < l {
        return Ok(CandidatePool {
            features: c.clone(),
            sources: (0..p).map(|i| i..i + 1).collect(),
        });
    }
    let h = c.cols();
    let mut data = Vec::with_capacity(l * h);
    let mut sources = Vec::with_capacity(l);
    let mut start = 0;
    for size in chunk_sizes(p, l) {
        let mut mean = vec![0.0; h];
        for r in start..start + size {
            mean.iter_mut().zip(c.row(r)).for_each(|(m, v)| *m += v);
        }
        data.extend(mean.into_iter().map(|m| m / size as f64));
        sources.push(start..start + size);
        start += size;
    }
    Ok(CandidatePool {
        features: Tensor::new([l, h], data)?,
        sources,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentSummary {
    /// Softmax over image positions of the text-averaged scores.
    pub weights: Vec<f64>,
    pub r_img: Vec<f64>,
    pub r_txt: Vec<f64>,
    /// Global intent `(r_img + r_txt) / 2`.
    pub u: Vec<f64>,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, h: usize) -> Vec<f64> {
    let mut acc = vec![0.0; h];
    let mut n = 0usize;
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

/// Attention-weighted visual summary, text summary and global intent from
/// final hidden states `hidden` (all positions) and scores `a` over
/// (`text_positions` × `image_positions`).
pub fn intent_summaries(
    hidden: &Tensor,
    a: &Tensor,
    text_positions: &[usize],
    image_positions: &[usize],
) -> Result<IntentSummary> {
    if a.rows() != text_positions.len() || a.cols() != image_positions.len() {
        return Err(IlvrError::Contract(format!(
            "score matrix {:?} does not match {} text × {} image positions",
            a.shape(),
            text_positions.len(),
            image_positions.len()
        )));
    }
    let weights = a.mean_axis(0)?.softmax(0)?.into_data();
    let h = hidden.cols();
    let mut r_img = vec![0.0; h];
    for (&w, &j) in weights.iter().zip(image_positions) {
        r_img.iter_mut().zip(hidden.row(j)).for_each(|(r, v)| *r += w * v);
    }
    let r_txt = mean_rows(text_positions.iter().map(|&p| hidden.row(p)), h);
    let u = r_img.iter().zip(&r_txt).map(|(a, b)| (a + b) / 2.0).collect();
    Ok(IntentSummary {
        weights,
        r_img,
        r_txt,
        u,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepQuery {
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub q_text: Option<Vec<f64>>,
    pub z_prev_mean: Option<Vec<f64>>,
    /// The text history was empty, so the query fell back to `u` alone.
    pub fallback: bool,
}

/// Step query for latent segment `m` (1-based): the mean of `u`, the mean
/// text-history state, and (for `m > 1`) the mean of the previous targets.
pub fn build_step_query(
    m: usize,
    u: &[f64],
    text_history: &[&[f64]],
    prev: Option<&SupervisionSet>,
) -> Result<StepQuery> {
    if m == 0 {
        return Err(IlvrError::Contract("step index is 1-based".into()));
    }
    if (m > 1) != prev.is_some() {
        return Err(IlvrError::Contract(format!(
            "previous targets must be given exactly when m > 1 (m = {m})"
        )));
    }
    let h = u.len();
    if text_history.is_empty() {
        return Ok(StepQuery {
            q: u.to_vec(),
            u: u.to_vec(),
            q_text: None,
            z_prev_mean: None,
            fallback: true,
        });
    }
    let q_text = mean_rows(text_history.iter().copied(), h);
    let z_prev_mean = prev.map(|z| mean_rows(z.vectors.iter().map(Vec::as_slice), h));
    let mut parts: Vec<&[f64]> = vec![u, &q_text];
    if let Some(z) = &z_prev_mean {
        parts.push(z);
    }
    let q = mean_rows(parts.into_iter(), h);
    Ok(StepQuery {
        q,
        u: u.to_vec(),
        q_text: Some(q_text),
        z_prev_mean,
        fallback: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionSet {
    /// `K` target vectors in spatial order of their candidates.
    pub vectors: Vec<Vec<f64>>,
    /// Candidate index behind each vector (spatial order).
    pub indices: Vec<usize>,
    /// `(candidate, cosine)` for the selected candidates in rank order.
    pub ranked: Vec<(usize, f64)>,
    /// Slots filled by repeating a candidate because the pool had fewer than `K`.
    pub padded: usize,
}

impl SupervisionSet {
    pub fn checksum(&self) -> u64 {
        let rows: Vec<Vec<f64>> = self.vectors.clone();
        Tensor::from_rows(&rows).map(|t| t.checksum()).unwrap_or(0)
    }

    fn pad_to(mut self, k: usize) -> Self {
        let n = self.indices.len();
        if n < k {
            // lowest-index selected candidate comes first in spatial order
            let (idx, v) = (self.indices[0], self.vectors[0].clone());
            for _ in n..k {
                self.indices.push(idx);
                self.vectors.push(v.clone());
            }
            self.padded = k - n;
        }
        self
    }
}

/// Ranks candidates by cosine to `q` (descending, lower index on ties) and
/// returns the best `k`, reordered spatially. A pool smaller than `k` is
/// padded by repeating its lowest-index candidate.
pub fn select_topk(q: &[f64], pool: &CandidatePool, k: usize) -> Result<SupervisionSet> {
    if k == 0 || pool.is_empty() {
        return Err(IlvrError::Contract("select_topk needs K >= 1 and a nonempty pool".into()));
    }
    if pool.features.cols() != q.len() {
        return Err(IlvrError::Contract(format!(
            "query dim {} vs candidate dim {}",
            q.len(),
            pool.features.cols()
        )));
    }
    let mut scored: Vec<(usize, f64)> = (0..pool.len())
        .map(|i| (i, cosine(q, pool.features.row(i)).unwrap_or(0.0)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    let mut indices: Vec<usize> = scored.iter().map(|&(i, _)| i).collect();
    indices.sort_unstable();
    let vectors = indices.iter().map(|&i| pool.features.row_vec(i)).collect();
    Ok(SupervisionSet {
        vectors,
        indices,
        ranked: scored,
        padded: 0,
    }
    .pad_to(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    /// Query-driven top-K selection.
    Adaptive,
    /// Mean-pool the candidates into `K` vectors, ignoring the query.
    Pooling,
}

impl std::str::FromStr for Mechanism {
    type Err = IlvrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Mechanism::Adaptive),
            "pooling" => Ok(Mechanism::Pooling),
            other => Err(IlvrError::Config(format!(
                "unknown mechanism `{other}` (expected adaptive or pooling)"
            ))),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Adaptive => "adaptive",
            Mechanism::Pooling => "pooling",
        })
    }
}

/// Which text positions drive the attention-based intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntentScope {
    /// The question only, computed once per trajectory.
    Question,
    /// All text seen before each latent segment, recomputed per step.
    PerStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetConfig {
    pub k: usize,
    pub group_size: usize,
    /// Layer supplying `W_Q`/`W_K` for the intent scores; `None` is the last.
    pub attention_layer: Option<usize>,
    pub mechanism: Mechanism,
    pub intent_scope: IntentScope,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            k: 8,
            group_size: DEFAULT_GROUP_SIZE,
            attention_layer: None,
            mechanism: Mechanism::Adaptive,
            intent_scope: IntentScope::Question,
        }
    }
}

/// Supervision set for every latent segment of `seq`, computed on its own
/// tape with the teacher parameters bound as constants. Each segment's
/// targets are injected as that segment's inputs before the text that
/// follows it is processed, so later text-history states see them.
pub fn build_targets(
    model_cfg: &ModelConfig,
    teacher: &ParameterSet,
    cfg: &TargetConfig,
    traj: &Trajectory,
    seq: &InterleavedSequence,
) -> Result<Vec<SupervisionSet>> {
    if seq.n_latent() == 0 {
        return Ok(Vec::new());
    }
    let image = seq
        .image
        .as_ref()
        .ok_or_else(|| IlvrError::Contract("latent targets need an input image".into()))?;
    let layer = cfg.attention_layer.unwrap_or(model_cfg.n_layers - 1);
    if layer >= model_cfg.n_layers {
        return Err(IlvrError::Config(format!("attention layer {layer} out of range")));
    }
    let mut tape = Tape::new();
    let bound = model::bind_frozen(&mut tape, teacher);
    let mut cache = KvCache::new(model_cfg.n_layers);
    let n_image = image.n_patches();
    let image_positions: Vec<usize> = (0..n_image).collect();
    let question_positions: Vec<usize> = (n_image..n_image + seq.question_len).collect();

    let mut hidden_rows: Vec<Vec<f64>> = Vec::new();
    let mut attn_rows: Vec<Vec<f64>> = Vec::new();
    let mut run = |tape: &mut Tape, inputs: Vec<Input>, hidden: &mut Vec<Vec<f64>>, attn: &mut Vec<Vec<f64>>| -> Result<()> {
        let x = model::embed(tape, &bound, &inputs)?;
        let out = model::forward_chunk(model_cfg, tape, &bound, &mut cache, x)?;
        hidden.extend(tape.value(out.hidden).to_rows());
        attn.extend(tape.value(out.attn_inputs[layer]).to_rows());
        Ok(())
    };

    let patches = model::encode_image(teacher, image)?;
    let mut pending: Vec<Input> = patches.to_rows().into_iter().map(Input::Vector).collect();
    let mut intent: Option<IntentSummary> = None;
    let mut history: Vec<usize> = Vec::new();
    let mut all_text: Vec<usize> = Vec::new();
    let mut sets: Vec<SupervisionSet> = Vec::new();
    let mut pos = n_image;

    for seg in &seq.segments {
        match seg {
            Segment::Text(t) => {
                pending.extend(t.iter().map(|&x| Input::Token(x)));
                history.extend(pos..pos + t.len());
                pos += t.len();
            }
            Segment::Latent(l) => {
                run(&mut tape, std::mem::take(&mut pending), &mut hidden_rows, &mut attn_rows)?;
                all_text.extend(&history);
                let hidden = Tensor::from_rows(&hidden_rows)?;
                let states = Tensor::from_rows(&attn_rows)?;
                let summary = match (cfg.intent_scope, &intent) {
                    (IntentScope::Question, Some(s)) => s.clone(),
                    (scope, _) => {
                        let text = match scope {
                            IntentScope::Question => &question_positions,
                            IntentScope::PerStep => &all_text,
                        };
                        let a = model::qk_scores(model_cfg, teacher, layer, text, &image_positions, &states)?;
                        intent_summaries(&hidden, &a, text, &image_positions)?
                    }
                };
                intent = Some(summary.clone());
                let source = l
                    .source
                    .ok_or_else(|| IlvrError::Data("latent segment has no helper image".into()))?;
                let helper = source.resolve(traj)?;
                let pool = group_mean(&model::encode_image(teacher, &helper)?, cfg.group_size)?;
                let set = match cfg.mechanism {
                    Mechanism::Adaptive => {
                        let hist: Vec<&[f64]> = history.iter().map(|&p| hidden.row(p)).collect();
                        let q = build_step_query(sets.len() + 1, &summary.u, &hist, sets.last())?;
                        select_topk(&q.q, &pool, cfg.k)?
                    }
                    Mechanism::Pooling => pooled_targets(&pool, cfg.k)?,
                };
                history.clear();
                let mut inputs = vec![Input::Token(LATENT_START)];
                inputs.extend(set.vectors.iter().cloned().map(Input::Vector));
                inputs.push(Input::Token(LATENT_END));
                pos += l.slots + 2;
                pending = inputs;
                sets.push(set);
            }
        }
    }
    Ok(sets)
}

/// Query-free baseline: the candidate pool mean-pooled into `k` vectors.
pub fn pooled_targets(pool: &CandidatePool, k: usize) -> Result<SupervisionSet> {
    let pooled = group_mean(&pool.features, k)?;
    let indices: Vec<usize> = (0..pooled.len()).collect();
    Ok(SupervisionSet {
        vectors: pooled.features.to_rows(),
        ranked: indices.iter().map(|&i| (i, 0.0)).collect(),
        indices,
        padded: 0,
    }
    .pad_to(k))
}

/// Installs each set as both the injected inputs and the alignment targets
/// of the matching latent segment.
pub fn attach_targets(seq: &mut InterleavedSequence, sets: &[SupervisionSet]) -> Result<()> {
    if sets.len() != seq.n_latent() {
        return Err(IlvrError::Contract(format!(
            "{} supervision sets for {} latent segments",
            sets.len(),
            seq.n_latent()
        )));
    }
    for (l, s) in seq.latent_segments_mut().zip(sets) {
        l.inputs = Some(s.vectors.clone());
        l.targets = Some(s.vectors.clone());
    }
    Ok(())
}

/// One JSON line per step: selected indices, scores and a vector checksum.
pub fn dump_targets(trajectory: usize, sets: &[SupervisionSet]) -> String {
    let mut s = String::new();
    for (m, set) in sets.iter().enumerate() {
        let rec = serde_json::json!({
            "trajectory": trajectory,
            "step": m + 1,
            "indices": set.indices,
            "scores": set.ranked.iter().map(|r| r.1).collect::<Vec<_>>(),
            "padded": set.padded,
            "checksum": format!("{:016x}", set.checksum()),
        });
        s.push_str(&rec.to_string());
        s.push('\n');
    }
    s
}
