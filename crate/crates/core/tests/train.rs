use ilvr_core::interleave::{build_supervision_sequence, forward_sequence, InterleavedSequence, LatentInputs, Structure};
use ilvr_core::model::{self, ModelConfig, ParameterSet};
use ilvr_core::tasks::{generate, DatasetSpec, Trajectory};
use ilvr_core::teacher::{attach_targets, build_targets, TargetConfig};
use ilvr_core::train::*;
use ilvr_numerics::Tape;
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        n_heads: 2,
        ffn_dim: 32,
        max_seq_len: 96,
        latent_k: 2,
        ..ModelConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> Vec<Trajectory> {
    generate(&DatasetSpec {
        size: n,
        width: 3,
        height: 3,
        hazards: 1,
        max_steps: 4,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 1,
        targets: TargetConfig {
            k: 2,
            ..TargetConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// A supervised sequence with teacher inputs attached.
fn prepared(cfg: &ModelConfig, params: &ParameterSet) -> InterleavedSequence {
    let t = tiny_data(4, 1).into_iter().find(|t| t.steps.len() >= 2).unwrap();
    let mut seq = build_supervision_sequence(&t, cfg.latent_k, Structure::Interleaved).unwrap();
    let sets = build_targets(cfg, params, &TargetConfig { k: cfg.latent_k, ..TargetConfig::default() }, &t, &seq).unwrap();
    attach_targets(&mut seq, &sets).unwrap();
    seq
}

/// Final hidden states at the positions just before each latent slot.
fn pre_slot_states(cfg: &ModelConfig, params: &ParameterSet, seq: &InterleavedSequence) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model::bind_frozen(&mut tape, params);
    let fwd = forward_sequence(cfg, &mut tape, &b, params, seq, LatentInputs::Injected).unwrap();
    let h = fwd.hidden_values(&tape).unwrap();
    seq.latent_positions().iter().flatten().map(|&p| h.row_vec(p - 1)).collect()
}

fn set_targets(seq: &mut InterleavedSequence, flat: &[Vec<f64>]) {
    let mut it = flat.iter().cloned();
    for seg in seq.latent_segments_mut() {
        seg.targets = Some((0..seg.slots).map(|_| it.next().unwrap()).collect());
    }
}

fn align_of(cfg: &ModelConfig, params: &ParameterSet, seq: &InterleavedSequence) -> LossBreakdown {
    let mut tape = Tape::new();
    let b = model::bind_frozen(&mut tape, params);
    stage1_loss(cfg, &mut tape, &b, params, seq, 1.0).unwrap().breakdown
}

#[test]
fn align_is_zero_when_targets_are_the_states() {
    let cfg = tiny();
    let params = ParameterSet::init(&cfg).unwrap();
    let mut seq = prepared(&cfg, &params);
    let states = pre_slot_states(&cfg, &params, &seq);
    set_targets(&mut seq, &states);
    let l = align_of(&cfg, &params, &seq);
    assert!(l.align.abs() < 1e-12);
    assert!((l.total - l.ce).abs() < 1e-12);
    assert_eq!(l.slots, states.len());
}

#[test]
fn align_is_one_for_orthogonal_targets() {
    let cfg = tiny();
    let params = ParameterSet::init(&cfg).unwrap();
    let mut seq = prepared(&cfg, &params);
    let states = pre_slot_states(&cfg, &params, &seq);
    // Gram-Schmidt a fixed direction against each state
    let ortho: Vec<Vec<f64>> = states
        .iter()
        .map(|h| {
            let d: Vec<f64> = (0..h.len()).map(|i| (i as f64 + 1.0).cos()).collect();
            let c = d.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / h.iter().map(|v| v * v).sum::<f64>();
            d.iter().zip(h).map(|(a, b)| a - c * b).collect()
        })
        .collect();
    set_targets(&mut seq, &ortho);
    assert!((align_of(&cfg, &params, &seq).align - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn align_ignores_target_scale(scales in proptest::collection::vec(0.01f64..100.0, 32)) {
        let cfg = tiny();
        let params = ParameterSet::init(&cfg).unwrap();
        let mut seq = prepared(&cfg, &params);
        let base = align_of(&cfg, &params, &seq).align;
        let flat: Vec<Vec<f64>> = seq.latent_segments().flat_map(|s| s.targets.clone().unwrap()).collect();
        let scaled: Vec<Vec<f64>> = flat.iter().zip(scales.iter().cycle())
            .map(|(z, s)| z.iter().map(|v| v * s).collect()).collect();
        set_targets(&mut seq, &scaled);
        prop_assert!((align_of(&cfg, &params, &seq).align - base).abs() < 1e-12);
    }
}

#[test]
fn stage2_gradient_flows_through_feedback() {
    let cfg = tiny();
    let params = ParameterSet::init(&cfg).unwrap();
    let seq = prepared(&cfg, &params);
    let grads = |detach: bool| {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let b = model::bind(&mut tape, &p);
        let loss = stage2_loss(&cfg, &mut tape, &b, &p, &seq, detach).unwrap();
        let g = tape.backward(loss.total).unwrap();
        b.accumulate_grads(&g, &mut p).unwrap();
        (loss.breakdown.total, p.flatten_grads())
    };
    let (l_attached, g_attached) = grads(false);
    let (l_detached, g_detached) = grads(true);
    // same forward values, different backward paths
    assert_eq!(l_attached, l_detached);
    let diff: f64 = g_attached.iter().zip(&g_detached).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-8, "feedback path carried no gradient");
}

#[test]
fn empty_answer_is_a_contract_error() {
    let cfg = tiny();
    let params = ParameterSet::init(&cfg).unwrap();
    let mut t = tiny_data(1, 2).remove(0);
    t.answer.clear();
    let seq = build_supervision_sequence(&t, cfg.latent_k, Structure::Interleaved).unwrap();
    let mut tape = Tape::new();
    let b = model::bind(&mut tape, &params);
    assert!(stage2_loss(&cfg, &mut tape, &b, &params, &seq, false).is_err());
}

#[test]
fn gradient_check_passes_for_both_losses() {
    let out = gradient_check(&GradCheckConfig::default()).unwrap();
    assert_eq!(out.checks.len(), 2);
    assert!(out.passed(), "{:?}", out.worst());
    assert!(out.max_rel_error() < 1e-3);
}

#[test]
fn gradient_check_catches_a_broken_backward() {
    ilvr_numerics::set_corrupt_gelu_backward(true);
    let out = gradient_check(&GradCheckConfig::default());
    ilvr_numerics::set_corrupt_gelu_backward(false);
    assert!(!out.unwrap().passed());
}

fn run(cfg: &TrainConfig, seed: u64) -> (String, TrainOutcome) {
    let data = tiny_data(24, seed);
    let (train, test) = data.split_at(20);
    let mut log = Vec::new();
    let mcfg = ModelConfig { seed, ..tiny() };
    let out = run_training(&mcfg, &TrainConfig { seed, ..cfg.clone() }, train, test, &mut log).unwrap();
    (String::from_utf8(log).unwrap(), out)
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = tiny_train_config();
    let (a, _) = run(&cfg, 42);
    let (b, _) = run(&cfg, 42);
    let (c, _) = run(&cfg, 43);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn vision_encoder_is_constant_across_training() {
    let (log, out) = run(&tiny_train_config(), 42);
    let init = ParameterSet::init(&ModelConfig { seed: 42, ..tiny() }).unwrap();
    assert_eq!(out.model.params.vision_checksum(), init.vision_checksum());
    assert_eq!(out.teacher.params.vision_checksum(), init.vision_checksum());
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["kind"], "final");
    assert_eq!(last["vision_checksum"], format!("{:016x}", init.vision_checksum()));
}

#[test]
fn stage_two_only_run_completes() {
    let cfg = TrainConfig {
        stage1_epochs: 0,
        stage2_epochs: 1,
        ..tiny_train_config()
    };
    let (log, out) = run(&cfg, 42);
    assert_eq!(out.steps, 20);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] != "final" {
            assert_eq!(v["stage"], 2);
            assert_eq!(v["align"], 0.0);
        }
    }
}

#[test]
fn stage_one_loss_decreases() {
    let cfg = TrainConfig {
        stage1_epochs: 6,
        stage2_epochs: 0,
        log_steps: false,
        ..tiny_train_config()
    };
    let (log, _) = run(&cfg, 42);
    let totals: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "epoch")
        .map(|v| v["total"].as_f64().unwrap())
        .collect();
    assert_eq!(totals.len(), 6);
    let head = (totals[0] + totals[1]) / 2.0;
    let tail = (totals[4] + totals[5]) / 2.0;
    assert!(tail < head, "{totals:?}");
}

#[test]
fn mismatched_k_is_rejected() {
    let cfg = TrainConfig::default();
    assert!(cfg.validate(&tiny()).is_err());
    assert!(tiny_train_config().validate(&tiny()).is_ok());
}
