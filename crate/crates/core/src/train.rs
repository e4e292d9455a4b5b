//! Two-stage training: teacher-forced latent alignment, then text-only
//! training through the model's own latent feedback.

use std::collections::BTreeMap;
use std::io::Write;

use ilvr_numerics::{finite_diff_check, GradCheckReport, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{IlvrError, Result};
use crate::interleave::{
    self, build_supervision_sequence, forward_sequence, DecodeOptions, InterleavedSequence,
    LatentInputs, Structure,
};
use crate::model::{self, Model, ModelConfig, ParameterSet};
use crate::tasks::{self, DatasetSpec, Family, Trajectory};
use crate::teacher::{self, attach_targets, build_targets, MomentumTeacher, TargetConfig};

/// Learning rate of the original large-model setup.
pub const REFERENCE_LR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub align: f64,
    pub total: f64,
    /// Number of aligned latent slots.
    pub slots: usize,
}

/// Vars of one loss graph plus its values.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub align: Option<Var>,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn ce_term(
    tape: &mut Tape,
    fwd: &interleave::SequenceForward,
    seq: &InterleavedSequence,
) -> Result<Var> {
    if seq.gold_answer().is_empty() {
        return Err(IlvrError::Contract("sequence has an empty answer".into()));
    }
    let (positions, targets): (Vec<usize>, Vec<usize>) = seq.ce_targets().into_iter().unzip();
    let logits = fwd.logit_rows(tape, &positions)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// `ce + λ·(1/ΣK)·Σ (1 − cos(h_{t−1}, z_t))` with the segment inputs
/// injected at the pad positions and `h_{t−1}` the final hidden state just
/// before slot `t`.
pub fn stage1_loss(
    cfg: &ModelConfig,
    tape: &mut Tape,
    bound: &model::Bound,
    params: &ParameterSet,
    seq: &InterleavedSequence,
    lambda: f64,
) -> Result<LossVars> {
    let fwd = forward_sequence(cfg, tape, bound, params, seq, LatentInputs::Injected)?;
    let ce = ce_term(tape, &fwd, seq)?;
    let mut prev_positions = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for (seg, pads) in seq.latent_segments().zip(seq.latent_positions()) {
        let z = seg
            .targets
            .as_ref()
            .ok_or_else(|| IlvrError::Contract("latent segment has no alignment targets".into()))?;
        if z.len() != pads.len() {
            return Err(IlvrError::Contract(format!(
                "{} targets for {} latent slots",
                z.len(),
                pads.len()
            )));
        }
        prev_positions.extend(pads.iter().map(|p| p - 1));
        targets.extend(z.iter().cloned());
    }
    let (align, total) = if targets.is_empty() {
        (None, ce)
    } else {
        let h = fwd.hidden_rows(tape, &prev_positions)?;
        let z = tape.constant(Tensor::from_rows(&targets)?);
        let mut cos_sum: Option<Var> = None;
        for i in 0..targets.len() {
            let hi = tape.gather_rows(h, &[i])?;
            let zi = tape.gather_rows(z, &[i])?;
            let c = tape.cosine_sim(hi, zi)?;
            cos_sum = Some(match cos_sum {
                Some(s) => tape.add(s, c)?,
                None => c,
            });
        }
        let n = targets.len() as f64;
        let count = tape.constant(Tensor::scalar(n));
        let gap = tape.sub(count, cos_sum.expect("nonempty"))?;
        let align = tape.scale(gap, 1.0 / n);
        let weighted = tape.scale(align, lambda);
        (Some(align), tape.add(ce, weighted)?)
    };
    Ok(LossVars {
        ce,
        align,
        total,
        breakdown: LossBreakdown {
            ce: tape.scalar(ce),
            align: align.map_or(0.0, |a| tape.scalar(a)),
            total: tape.scalar(total),
            slots: targets.len(),
        },
    })
}

/// Cross-entropy over text positions with latent inputs produced by the
/// model's own feedback loop.
pub fn stage2_loss(
    cfg: &ModelConfig,
    tape: &mut Tape,
    bound: &model::Bound,
    params: &ParameterSet,
    seq: &InterleavedSequence,
    detach: bool,
) -> Result<LossVars> {
    let fwd = forward_sequence(
        cfg,
        tape,
        bound,
        params,
        seq,
        LatentInputs::SelfFeedback { detach },
    )?;
    let ce = ce_term(tape, &fwd, seq)?;
    let v = tape.scalar(ce);
    Ok(LossVars {
        ce,
        align: None,
        total: ce,
        breakdown: LossBreakdown {
            ce: v,
            align: 0.0,
            total: v,
            slots: 0,
        },
    })
}

/// `base · ½ · (1 + cos(π · step / total))`; no warmup, reaches 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let s = step.min(total) as f64 / total as f64;
    (base * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParameterSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam step at learning rate `lr` using the
    /// accumulated `grad` buffers (scaled by `grad_scale`). Frozen arrays are
    /// skipped. Any non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64, grad_scale: f64) -> Result<()> {
        for p in params.params.iter().filter(|p| !p.frozen) {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(IlvrError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let grad: Vec<f64> = match p.tensor.grad() {
                Some(g) => g.iter().map(|x| x * grad_scale).collect(),
                None => vec![0.0; p.tensor.len()],
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * self.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Span of one cosine learning-rate cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSpan {
    /// One decay over both stages.
    Run,
    /// Restart at the base rate when Stage 2 begins.
    PerStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaSchedule {
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lambda_sim: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub structure: Structure,
    pub targets: TargetConfig,
    pub ema: EmaSchedule,
    pub lr_span: LrSpan,
    pub detach_feedback: bool,
    pub grad_accum: usize,
    /// Evaluate every this many epochs (0: only after training).
    pub eval_every: usize,
    pub max_decode_tokens: usize,
    /// Log a record for every optimizer step.
    pub log_steps: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 5,
            lambda_sim: 1.0,
            tau: teacher::DEFAULT_TAU,
            lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            structure: Structure::Interleaved,
            targets: TargetConfig::default(),
            ema: EmaSchedule::PerStep,
            lr_span: LrSpan::Run,
            detach_feedback: false,
            grad_accum: 1,
            eval_every: 0,
            max_decode_tokens: 160,
            log_steps: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(IlvrError::Config(m));
        if self.targets.k != model.latent_k {
            return bad(format!(
                "target K {} differs from model latent K {}",
                self.targets.k, model.latent_k
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.lambda_sim < 0.0 || self.weight_decay < 0.0 {
            return bad("lambda_sim and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("AdamW betas must be in [0, 1) and eps positive".into());
        }
        if self.grad_accum == 0 || self.targets.group_size == 0 || self.max_decode_tokens == 0 {
            return bad("grad_accum, group_size and max_decode_tokens must be >= 1".into());
        }
        if let Some(l) = self.targets.attention_layer {
            if l >= model.n_layers {
                return bad(format!("attention_layer {l} >= n_layers {}", model.n_layers));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step {
        stage: u8,
        epoch: usize,
        step: usize,
        lr: f64,
        ce: f64,
        align: f64,
        total: f64,
    },
    Epoch {
        stage: u8,
        epoch: usize,
        ce: f64,
        align: f64,
        total: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        eval_accuracy: Option<f64>,
        zero_norm_cosines: usize,
    },
    Final {
        accuracy: f64,
        correct: usize,
        total: usize,
        per_family: BTreeMap<String, f64>,
        vision_checksum: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub per_family: BTreeMap<String, (usize, usize)>,
    /// Generations that failed structurally (counted as wrong).
    pub malformed: usize,
}

impl EvalReport {
    pub fn family_accuracy(&self) -> BTreeMap<String, f64> {
        self.per_family
            .iter()
            .map(|(k, &(c, t))| (k.clone(), c as f64 / t.max(1) as f64))
            .collect()
    }
}

/// Exact-match accuracy of `predict` against gold answers.
pub fn score<F>(data: &[Trajectory], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&Trajectory) -> Result<Vec<usize>>,
{
    if data.is_empty() {
        return Err(IlvrError::Data("evaluation set is empty".into()));
    }
    let mut per_family: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut correct, mut malformed) = (0, 0);
    for t in data {
        let ok = match predict(t) {
            Ok(answer) => answer == t.answer,
            Err(IlvrError::Truncated { .. } | IlvrError::SequenceTooLong { .. }) => {
                malformed += 1;
                false
            }
            Err(e) => return Err(e),
        };
        let entry = per_family.entry(t.family.to_string()).or_default();
        entry.1 += 1;
        if ok {
            entry.0 += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        correct,
        total: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        per_family,
        malformed,
    })
}

/// Greedy-decodes every question and compares the extracted answer.
pub fn evaluate(model: &Model, data: &[Trajectory], max_tokens: usize) -> Result<EvalReport> {
    let opts = DecodeOptions {
        max_tokens,
        ..DecodeOptions::default()
    };
    score(data, |t| {
        interleave::decode(model, Some(&t.image), &t.question, &opts).map(|d| d.answer())
    })
}

/// Share of exact-match hits a uniform guesser gets: the mean over test
/// items of `1 / |answers of that item's length and family|`.
pub fn random_guess_floor(data: &[Trajectory]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let sum: f64 = data
        .iter()
        .map(|t| match t.family {
            Family::Gridnav => 0.25f64.powi(t.answer.len() as i32),
            Family::Count => 1.0 / (crate::vocab::MAX_NUMBER + 1) as f64,
        })
        .sum();
    sum / data.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub teacher: MomentumTeacher,
    pub eval: Option<EvalReport>,
    pub steps: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn write_record(log: &mut dyn Write, rec: &Record) -> Result<()> {
    serde_json::to_writer(&mut *log, rec)?;
    log.write_all(b"\n")?;
    log.flush()?;
    Ok(())
}

/// Runs Stage 1 then Stage 2 on `train`, evaluating on `test`, appending
/// metrics to `log`. Deterministic given the configs.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Trajectory],
    test: &[Trajectory],
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if train.is_empty() {
        return Err(IlvrError::Data("training set is empty".into()));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut teacher = MomentumTeacher::new(&model.params, cfg.tau)?;
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut sequences = train
        .iter()
        .map(|t| build_supervision_sequence(t, model_cfg.latent_k, cfg.structure))
        .collect::<Result<Vec<_>>>()?;
    let steps_per_epoch = train.len().div_ceil(cfg.grad_accum);
    let mut global_step = 0;
    let mut epoch_index = 0;

    let run_steps = (cfg.stage1_epochs + cfg.stage2_epochs) * steps_per_epoch;
    for (stage, epochs) in [(1u8, cfg.stage1_epochs), (2u8, cfg.stage2_epochs)] {
        let (total_steps, mut stage_step) = match cfg.lr_span {
            LrSpan::Run => (run_steps, global_step),
            LrSpan::PerStage => (epochs * steps_per_epoch, 0),
        };
        for epoch in 0..epochs {
            if stage == 1 {
                for (t, s) in train.iter().zip(sequences.iter_mut()) {
                    let sets = build_targets(model_cfg, &teacher.params, &cfg.targets, t, s)?;
                    attach_targets(s, &sets)?;
                }
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch_index as u64)));
            let (mut sum_ce, mut sum_align, mut sum_total) = (0.0, 0.0, 0.0);
            let mut zero_norm = 0;
            for batch in order.chunks(cfg.grad_accum) {
                model.params.zero_grad();
                let (mut b_ce, mut b_align, mut b_total) = (0.0, 0.0, 0.0);
                for &i in batch {
                    let mut tape = Tape::new();
                    let bound = model::bind(&mut tape, &model.params);
                    let loss = match stage {
                        1 => stage1_loss(model_cfg, &mut tape, &bound, &model.params, &sequences[i], cfg.lambda_sim)?,
                        _ => stage2_loss(model_cfg, &mut tape, &bound, &model.params, &sequences[i], cfg.detach_feedback)?,
                    };
                    let grads = tape.backward(loss.total)?;
                    bound.accumulate_grads(&grads, &mut model.params)?;
                    zero_norm += tape.diagnostics().zero_norm_cosines;
                    b_ce += loss.breakdown.ce;
                    b_align += loss.breakdown.align;
                    b_total += loss.breakdown.total;
                }
                let n = batch.len() as f64;
                let lr = cosine_lr(stage_step, total_steps, cfg.lr);
                opt.step(&mut model.params, lr, 1.0 / n)?;
                if stage == 1 && cfg.ema == EmaSchedule::PerStep {
                    teacher.update(&model.params)?;
                }
                if cfg.log_steps {
                    write_record(
                        log,
                        &Record::Step {
                            stage,
                            epoch,
                            step: global_step,
                            lr,
                            ce: b_ce / n,
                            align: b_align / n,
                            total: b_total / n,
                        },
                    )?;
                }
                sum_ce += b_ce;
                sum_align += b_align;
                sum_total += b_total;
                stage_step += 1;
                global_step += 1;
            }
            if stage == 1 && cfg.ema == EmaSchedule::PerEpoch {
                teacher.update(&model.params)?;
            }
            epoch_index += 1;
            let eval_accuracy = if cfg.eval_every > 0 && epoch_index % cfg.eval_every == 0 && !test.is_empty() {
                Some(evaluate(&model, test, cfg.max_decode_tokens)?.accuracy)
            } else {
                None
            };
            let n = train.len() as f64;
            write_record(
                log,
                &Record::Epoch {
                    stage,
                    epoch,
                    ce: sum_ce / n,
                    align: sum_align / n,
                    total: sum_total / n,
                    eval_accuracy,
                    zero_norm_cosines: zero_norm,
                },
            )?;
        }
    }

    let eval = if test.is_empty() {
        None
    } else {
        let report = evaluate(&model, test, cfg.max_decode_tokens)?;
        write_record(
            log,
            &Record::Final {
                accuracy: report.accuracy,
                correct: report.correct,
                total: report.total,
                per_family: report.family_accuracy(),
                vision_checksum: format!("{:016x}", model.params.vision_checksum()),
            },
        )?;
        Some(report)
    };
    Ok(TrainOutcome {
        model,
        teacher,
        eval,
        steps: global_step,
    })
}

/// Finite-difference audit of both stage losses on a seeded micro-model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Coordinates sampled per parameter array.
    pub coords_per_param: usize,
    pub eps: f64,
    pub lambda_sim: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                latent_k: 2,
                max_seq_len: 64,
                ..ModelConfig::default()
            },
            coords_per_param: 8,
            eps: ilvr_numerics::DEFAULT_EPS,
            lambda_sim: 1.0,
            tolerance: 1e-3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
    /// Arrays with no coordinate above [`GRAD_MAGNITUDE_FLOOR`] for this loss.
    pub skipped_params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub checks: Vec<LossCheck>,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&LossCheck> {
        self.checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// The micro-instance used by the gradient check: a short gridnav
/// trajectory with two helper images, so both losses pass through latent
/// segments.
pub fn gradcheck_instance(seed: u64) -> Result<Trajectory> {
    let spec = DatasetSpec {
        size: 1,
        width: 3,
        height: 3,
        hazards: 1,
        max_steps: 2,
        seed,
        ..DatasetSpec::default()
    };
    let mut data = tasks::gen_gridnav(&spec)?;
    Ok(data.remove(0))
}

/// Coordinates whose analytic gradient is smaller than this are not
/// sampled: at `ε = 1e-5` the central difference carries roundoff near
/// `1e-10`, which alone exceeds a 1e-3 relative tolerance below this size.
pub const GRAD_MAGNITUDE_FLOOR: f64 = 1e-6;

/// Up to `per_param` distinct coordinates per trainable array, drawn among
/// those with `|analytic| >= GRAD_MAGNITUDE_FLOOR`.
fn sample_coords(
    params: &ParameterSet,
    analytic: &[f64],
    per_param: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<String>) {
    let mut coords = Vec::new();
    let mut skipped = Vec::new();
    let mut offset = 0;
    for p in params.params.iter().filter(|p| !p.frozen) {
        let n = p.tensor.len();
        let mut eligible: Vec<usize> = (offset..offset + n)
            .filter(|&i| analytic[i].abs() >= GRAD_MAGNITUDE_FLOOR)
            .collect();
        if eligible.is_empty() {
            skipped.push(p.name.clone());
        }
        eligible.shuffle(rng);
        coords.extend(eligible.into_iter().take(per_param));
        offset += n;
    }
    (coords, skipped)
}

pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckOutcome> {
    let mcfg = ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    let model = Model::new(mcfg.clone())?;
    let traj = gradcheck_instance(cfg.seed)?;
    let mut seq = build_supervision_sequence(&traj, mcfg.latent_k, Structure::Interleaved)?;
    // a differently seeded teacher, so targets are not the model's own states
    let teacher_params = ParameterSet::init(&ModelConfig {
        seed: cfg.seed.wrapping_add(1),
        ..mcfg.clone()
    })?;
    let tcfg = TargetConfig {
        k: mcfg.latent_k,
        ..TargetConfig::default()
    };
    let sets = build_targets(&mcfg, &teacher_params, &tcfg, &traj, &seq)?;
    attach_targets(&mut seq, &sets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    for stage in [1u8, 2u8] {
        let eval = |params: &ParameterSet, grads: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let bound = if grads {
                model::bind(&mut tape, params)
            } else {
                model::bind_frozen(&mut tape, params)
            };
            let loss = match stage {
                1 => stage1_loss(&mcfg, &mut tape, &bound, params, &seq, cfg.lambda_sim)?,
                _ => stage2_loss(&mcfg, &mut tape, &bound, params, &seq, false)?,
            };
            if !grads {
                return Ok((loss.breakdown.total, None));
            }
            let g = tape.backward(loss.total)?;
            let mut p = params.clone();
            p.zero_grad();
            bound.accumulate_grads(&g, &mut p)?;
            Ok((loss.breakdown.total, Some(p.flatten_grads())))
        };
        let (_, analytic) = eval(&model.params, true)?;
        let analytic = analytic.expect("gradients requested");
        let (coords, skipped) = sample_coords(&model.params, &analytic, cfg.coords_per_param, &mut rng);
        let x0 = model.params.flatten_trainable();
        let mut probe = model.params.clone();
        let report: GradCheckReport = finite_diff_check(
            |x: &[f64]| {
                probe.load_trainable(x);
                eval(&probe, false).map(|r| r.0)
            },
            &x0,
            &analytic,
            &coords,
            cfg.eps,
        )?;
        let worst = report.worst().expect("coordinates sampled");
        let (name, idx) = model
            .params
            .trainable_name(worst.index)
            .expect("coordinate within parameters");
        checks.push(LossCheck {
            loss: if stage == 1 { "stage1" } else { "stage2" },
            max_rel_error: report.max_rel_error(),
            worst_param: name.to_string(),
            worst_index: idx,
            analytic: worst.analytic,
            numeric: worst.numeric,
            coords: coords.len(),
            skipped_params: skipped,
        });
    }
    Ok(GradCheckOutcome {
        checks,
        tolerance: cfg.tolerance,
    })
}
