//! Tiny pre-norm decoder-only transformer with a frozen linear patch encoder.
//!
//! The same [`ParameterSet`] layout serves the online model and its momentum
//! copy. Forward passes run in chunks over a [`KvCache`], so positions whose
//! inputs depend on earlier outputs (latent feedback) can be appended one at
//! a time on the same tape.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ilvr_numerics::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IlvrError, Result};
use crate::tasks::{PatchGrid, PATCH_FEATURE_DIM};
use crate::vocab::{self, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub latent_k: usize,
    pub patch_feature_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size: vocab::VOCAB_SIZE,
            max_seq_len: 256,
            latent_k: 8,
            patch_feature_dim: PATCH_FEATURE_DIM,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IlvrError::Config(m.to_string()));
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad("hidden_dim must be a positive multiple of n_heads");
        }
        if self.latent_k == 0 {
            return bad("latent_k must be >= 1");
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return bad("n_layers, ffn_dim and max_seq_len must be positive");
        }
        if self.vocab_size != vocab::VOCAB_SIZE {
            return bad("vocab_size must equal the task vocabulary (including the 3 latent ids)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Ordered `key=value` pairs; also the checkpoint header.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hidden_dim", self.hidden_dim.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("latent_k", self.latent_k.to_string()),
            ("patch_feature_dim", self.patch_feature_dim.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<u64> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| IlvrError::Checkpoint(format!("missing config key `{k}`")))?
                .1
                .parse()
                .map_err(|_| IlvrError::Checkpoint(format!("bad value for `{k}`")))
        };
        Ok(Self {
            hidden_dim: get("hidden_dim")? as usize,
            n_layers: get("n_layers")? as usize,
            n_heads: get("n_heads")? as usize,
            ffn_dim: get("ffn_dim")? as usize,
            vocab_size: get("vocab_size")? as usize,
            max_seq_len: get("max_seq_len")? as usize,
            latent_k: get("latent_k")? as usize,
            patch_feature_dim: get("patch_feature_dim")? as usize,
            seed: get("seed")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters never receive gradients and are skipped by EMA.
    pub frozen: bool,
}

/// Index of every parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub vision: usize,
    pub layers: Vec<LayerLayout>,
    pub ln_final: usize,
    pub out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLayout {
    pub ln1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2: usize,
    pub w1: usize,
    pub w2: usize,
}

impl Layout {
    fn new(n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let b = 3 + 8 * l;
                LayerLayout {
                    ln1: b,
                    wq: b + 1,
                    wk: b + 2,
                    wv: b + 3,
                    wo: b + 4,
                    ln2: b + 5,
                    w1: b + 6,
                    w2: b + 7,
                }
            })
            .collect();
        let after = 3 + 8 * n_layers;
        Self {
            tok_emb: 0,
            pos_emb: 1,
            vision: 2,
            layers,
            ln_final: after,
            out: after + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub params: Vec<Param>,
    pub layout: Layout,
}

impl ParameterSet {
    /// Seeded initialization. Residual output projections are scaled down by
    /// `sqrt(2 · n_layers)`; the patch encoder is sized so a three-hot patch
    /// maps to a vector of norm about `sqrt(H)`, like token embeddings.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden_dim;
        let resid = (2.0 * cfg.n_layers as f64).sqrt();
        let mut params = Vec::new();
        let mut normal = |name: String, shape: [usize; 2], std: f64, frozen: bool| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape[0] * shape[1]).map(|_| dist.sample(&mut rng)).collect();
            let t = Tensor::new(shape, data).expect("shape").with_requires_grad(!frozen);
            params.push(Param {
                name,
                tensor: t,
                frozen,
            });
        };
        normal("tok_emb".into(), [cfg.vocab_size, h], 1.0, false);
        normal("pos_emb".into(), [cfg.max_seq_len, h], 0.5, false);
        normal("vision".into(), [cfg.patch_feature_dim, h], (1.0f64 / 3.0).sqrt(), true);
        let hs = 1.0 / (h as f64).sqrt();
        for l in 0..cfg.n_layers {
            normal(format!("layer{l}.ln1"), [1, h], 0.0, false);
            normal(format!("layer{l}.wq"), [h, h], hs, false);
            normal(format!("layer{l}.wk"), [h, h], hs, false);
            normal(format!("layer{l}.wv"), [h, h], hs, false);
            normal(format!("layer{l}.wo"), [h, h], hs / resid, false);
            normal(format!("layer{l}.ln2"), [1, h], 0.0, false);
            normal(format!("layer{l}.w1"), [h, cfg.ffn_dim], hs, false);
            normal(
                format!("layer{l}.w2"),
                [cfg.ffn_dim, h],
                1.0 / (cfg.ffn_dim as f64).sqrt() / resid,
                false,
            );
        }
        normal("ln_final".into(), [1, h], 0.0, false);
        normal("out".into(), [h, cfg.vocab_size], hs, false);
        let mut set = Self {
            params,
            layout: Layout::new(cfg.n_layers),
        };
        for i in set.gain_indices() {
            set.params[i].tensor.data_mut().fill(1.0);
        }
        Ok(set)
    }

    fn gain_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.layout.layers.iter().flat_map(|l| [l.ln1, l.ln2]).collect();
        v.push(self.layout.ln_final);
        v
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn vision_checksum(&self) -> u64 {
        self.params[self.layout.vision].tensor.checksum()
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.tensor.checksum())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn n_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.tensor.len()).sum()
    }

    /// Concatenated trainable values in parameter order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.len()],
            })
            .collect()
    }

    pub fn load_trainable(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length");
    }

    /// Name of the trainable parameter holding flat coordinate `i`.
    pub fn trainable_name(&self, mut i: usize) -> Option<(&str, usize)> {
        for p in self.params.iter().filter(|p| !p.frozen) {
            if i < p.tensor.len() {
                return Some((&p.name, i));
            }
            i -= p.tensor.len();
        }
        None
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    layout: Layout,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Adds tape gradients into each trainable parameter's `grad` buffer.
    pub fn accumulate_grads(
        &self,
        grads: &ilvr_numerics::Gradients,
        params: &mut ParameterSet,
    ) -> Result<()> {
        for (p, &v) in params.params.iter_mut().zip(&self.vars) {
            if !p.frozen {
                grads.accumulate_into(v, &mut p.tensor)?;
            }
        }
        Ok(())
    }
}

/// Records the parameters as leaves; trainable ones will receive gradients.
pub fn bind(tape: &mut Tape, params: &ParameterSet) -> Bound {
    Bound {
        vars: params.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        layout: params.layout.clone(),
    }
}

/// Records the parameters as constants (teacher and inference passes).
pub fn bind_frozen(tape: &mut Tape, params: &ParameterSet) -> Bound {
    Bound {
        vars: params
            .params
            .iter()
            .map(|p| tape.constant(p.tensor.clone().with_requires_grad(false)))
            .collect(),
        layout: params.layout.clone(),
    }
}

/// Frozen patch encoder: `C = I · W_vis`, one `H`-vector per patch.
pub fn encode_image(params: &ParameterSet, grid: &PatchGrid) -> Result<Tensor> {
    if grid.n_patches() == 0 {
        return Err(IlvrError::Contract("helper image has no patches".into()));
    }
    let feats = grid.to_tensor()?;
    Ok(feats.matmul(params.tensor(params.layout.vision))?)
}

/// One input position.
#[derive(Debug, Clone)]
pub enum Input {
    Token(TokenId),
    /// A continuous embedding supplied from outside the tape (image patch,
    /// injected teacher target, or a copied hidden state).
    Vector(Vec<f64>),
    /// A `[1 × H]` row already on the tape; gradients flow through it.
    Row(Var),
}

/// Builds the `[n × H]` input embedding matrix for a run of positions.
pub fn embed(tape: &mut Tape, bound: &Bound, inputs: &[Input]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(IlvrError::Contract("empty input chunk".into()));
    }
    let mut parts = Vec::new();
    let mut i = 0;
    while i < inputs.len() {
        match &inputs[i] {
            Input::Token(_) => {
                let mut ids = Vec::new();
                while let Some(Input::Token(t)) = inputs.get(i) {
                    ids.push(*t);
                    i += 1;
                }
                parts.push(tape.embedding(bound.var(bound.layout.tok_emb), &ids)?);
            }
            Input::Vector(_) => {
                let mut rows = Vec::new();
                while let Some(Input::Vector(v)) = inputs.get(i) {
                    rows.push(v.clone());
                    i += 1;
                }
                parts.push(tape.constant(Tensor::from_rows(&rows)?));
            }
            Input::Row(v) => {
                parts.push(*v);
                i += 1;
            }
        }
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(tape.concat_rows(&parts)?)
    }
}

/// Keys and values of every position processed so far, per layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![None; n_layers],
            values: vec![None; n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Output for one chunk of positions.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-layer (post final norm) states, `[c × H]`; the vectors fed back
    /// during latent reasoning and aligned during Stage 1.
    pub hidden: Var,
    pub logits: Var,
    /// Per layer: the normalized residual stream that enters `W_Q`/`W_K`.
    pub attn_inputs: Vec<Var>,
    /// Global position of the first row.
    pub start: usize,
}

/// Runs `x` (`[c × H]` input embeddings) at positions `cache.len()..+c`.
pub fn forward_chunk(
    cfg: &ModelConfig,
    tape: &mut Tape,
    bound: &Bound,
    cache: &mut KvCache,
    x: Var,
) -> Result<ForwardOutput> {
    let c = tape.value(x).rows();
    let start = cache.len;
    if start + c > cfg.max_seq_len {
        return Err(IlvrError::SequenceTooLong {
            len: start + c,
            max: cfg.max_seq_len,
        });
    }
    let lay = &bound.layout;
    let positions: Vec<usize> = (start..start + c).collect();
    let pos = tape.gather_rows(bound.var(lay.pos_emb), &positions)?;
    let mut h = tape.add(x, pos)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn_inputs = Vec::with_capacity(cfg.n_layers);
    for (l, ll) in lay.layers.iter().enumerate() {
        let a_in = tape.layer_norm(h, bound.var(ll.ln1))?;
        attn_inputs.push(a_in);
        let q = tape.matmul(a_in, bound.var(ll.wq))?;
        let k = tape.matmul(a_in, bound.var(ll.wk))?;
        let v = tape.matmul(a_in, bound.var(ll.wv))?;
        let k_all = match cache.keys[l] {
            Some(prev) => tape.concat_rows(&[prev, k])?,
            None => k,
        };
        let v_all = match cache.values[l] {
            Some(prev) => tape.concat_rows(&[prev, v])?,
            None => v,
        };
        cache.keys[l] = Some(k_all);
        cache.values[l] = Some(v_all);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k_all, hd * dh, dh)?;
            let vh = tape.slice_cols(v_all, hd * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let p = tape.causal_softmax(s, start)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let o = tape.matmul(o, bound.var(ll.wo))?;
        h = tape.add(h, o)?;
        let f_in = tape.layer_norm(h, bound.var(ll.ln2))?;
        let f = tape.matmul(f_in, bound.var(ll.w1))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, bound.var(ll.w2))?;
        h = tape.add(h, f)?;
    }
    cache.len += c;
    let hidden = tape.layer_norm(h, bound.var(lay.ln_final))?;
    let logits = tape.matmul(hidden, bound.var(lay.out))?;
    Ok(ForwardOutput {
        hidden,
        logits,
        attn_inputs,
        start,
    })
}

/// Full-sequence forward from an empty cache.
pub fn forward(cfg: &ModelConfig, tape: &mut Tape, bound: &Bound, x: Var) -> Result<ForwardOutput> {
    let mut cache = KvCache::new(cfg.n_layers);
    forward_chunk(cfg, tape, bound, &mut cache, x)
}

/// Unnormalized text-to-image scores `A = (1/√H) · mean_h(Q_h K_hᵀ)` with
/// `Q = X_𝒫 W_Q`, `K = X_𝒥 W_K` taken from `layer`'s normalized input `states`.
pub fn qk_scores(
    cfg: &ModelConfig,
    params: &ParameterSet,
    layer: usize,
    text_positions: &[usize],
    image_positions: &[usize],
    states: &Tensor,
) -> Result<Tensor> {
    if text_positions.is_empty() || image_positions.is_empty() {
        return Err(IlvrError::Contract("qk_scores needs nonempty position sets".into()));
    }
    if text_positions.iter().any(|p| image_positions.contains(p)) {
        return Err(IlvrError::Contract("text and image positions overlap".into()));
    }
    let ll = params
        .layout
        .layers
        .get(layer)
        .ok_or_else(|| IlvrError::Contract(format!("layer {layer} out of range")))?;
    let q = states.gather_rows(text_positions)?.matmul(params.tensor(ll.wq))?;
    let k = states.gather_rows(image_positions)?.matmul(params.tensor(ll.wk))?;
    // Σ_h Q_h K_hᵀ is the full product, so the head mean divides by n_heads.
    let scale = 1.0 / (cfg.n_heads as f64 * (cfg.hidden_dim as f64).sqrt());
    Ok(q.matmul_nt(&k)?.scale(scale))
}

/// Online model: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ParameterSet::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn encode_image(&self, grid: &PatchGrid) -> Result<Tensor> {
        encode_image(&self.params, grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    /// Loads a checkpoint; fails if `expected` is given and differs.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let (config, params) = load_checkpoint(path)?;
        if let Some(e) = expected {
            if e != &config {
                return Err(IlvrError::Checkpoint(format!(
                    "config mismatch: checkpoint has {:?}, expected {:?}",
                    config.to_pairs(),
                    e.to_pairs()
                )));
            }
        }
        Ok(Self { config, params })
    }
}

const CHECKPOINT_MAGIC: &str = "ilvr-checkpoint 1";

/// Text checkpoint: magic line, `config k=v ...`, then for each parameter a
/// `param <name> <frozen> <dims...>` header followed by one line of values.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParameterSet) -> Result<()> {
    fs::write(path, checkpoint_string(cfg, params))?;
    Ok(())
}

pub fn checkpoint_string(cfg: &ModelConfig, params: &ParameterSet) -> String {
    let mut s = String::new();
    s.push_str(CHECKPOINT_MAGIC);
    s.push('\n');
    s.push_str("config");
    for (k, v) in cfg.to_pairs() {
        let _ = write!(s, " {k}={v}");
    }
    s.push('\n');
    for p in &params.params {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "param {} {} {}", p.name, p.frozen as u8, dims.join(" "));
        let vals: Vec<String> = p.tensor.data().iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterSet)> {
    let text = fs::read_to_string(path)?;
    let bad = |m: String| IlvrError::Checkpoint(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing or unsupported version header".into()));
    }
    let cfg_line = lines.next().ok_or_else(|| bad("missing config line".into()))?;
    let pairs: Vec<(String, String)> = cfg_line
        .strip_prefix("config")
        .ok_or_else(|| bad("expected config line".into()))?
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let cfg = ModelConfig::from_pairs(&pairs)?;
    cfg.validate()?;
    let reference = ParameterSet::init(&ModelConfig { seed: 0, ..cfg.clone() })?;
    let mut params = Vec::new();
    while let Some(header) = lines.next() {
        if header.is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        if parts.next() != Some("param") {
            return Err(bad(format!("expected param header, got `{header}`")));
        }
        let name = parts.next().ok_or_else(|| bad("param without name".into()))?.to_string();
        let frozen = parts.next() == Some("1");
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| bad(format!("bad dim in `{header}`"))))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = lines
            .next()
            .ok_or_else(|| bad(format!("missing values for {name}")))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad value in {name}"))))
            .collect::<Result<_>>()?;
        let tensor = Tensor::new(shape, values)
            .map_err(|e| bad(format!("{name}: {e}")))?
            .with_requires_grad(!frozen);
        params.push(Param {
            name,
            tensor,
            frozen,
        });
    }
    if params.len() != reference.params.len() {
        return Err(bad(format!(
            "expected {} parameters, found {}",
            reference.params.len(),
            params.len()
        )));
    }
    for (p, r) in params.iter().zip(&reference.params) {
        if p.name != r.name || p.tensor.shape() != r.tensor.shape() || p.frozen != r.frozen {
            return Err(IlvrError::ParamShape {
                name: p.name.clone(),
                left: p.tensor.shape().to_vec(),
                right: r.tensor.shape().to_vec(),
            });
        }
    }
    Ok((
        cfg,
        ParameterSet {
            params,
            layout: reference.layout,
        },
    ))
}
