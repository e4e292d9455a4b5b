use ilvr_core::model::*;
use ilvr_core::tasks::{Category, PatchGrid};
use ilvr_core::vocab;
use ilvr_numerics::{Tape, Tensor};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        n_heads: 4,
        ffn_dim: 32,
        max_seq_len: 48,
        latent_k: 2,
        ..ModelConfig::default()
    }
}

fn grid_3x3() -> PatchGrid {
    use Category::*;
    PatchGrid::from_categories(
        3,
        3,
        &[Empty, Agent, Empty, Hazard, Empty, Goal, Object, Counted, Empty],
    )
}

#[test]
fn encode_image_matches_naive_product() {
    let m = Model::new(ModelConfig::default()).unwrap();
    let grid = grid_3x3();
    let c = m.encode_image(&grid).unwrap();
    let w = m.params.tensor(m.params.layout.vision);
    assert_eq!(c.shape(), &[9, 64]);
    for p in 0..9 {
        for j in 0..64 {
            let mut s = 0.0;
            for (f, &x) in grid.patches[p].iter().enumerate() {
                s += x * w.data()[f * 64 + j];
            }
            assert!((c.row(p)[j] - s).abs() < 1e-12);
        }
    }
}

fn hidden_for(cfg: &ModelConfig, params: &ParameterSet, inputs: &[Input]) -> Tensor {
    let mut tape = Tape::new();
    let b = bind_frozen(&mut tape, params);
    let x = embed(&mut tape, &b, inputs).unwrap();
    let out = forward(cfg, &mut tape, &b, x).unwrap();
    tape.value(out.hidden).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Outputs at a position depend only on that position and earlier ones.
    #[test]
    fn prefix_outputs_ignore_the_future(
        ids in proptest::collection::vec(3usize..vocab::VOCAB_SIZE, 2..20),
        cut in 1usize..20,
    ) {
        let cfg = small();
        let params = ParameterSet::init(&cfg).unwrap();
        let cut = cut.min(ids.len());
        let inputs: Vec<Input> = ids.iter().map(|&t| Input::Token(t)).collect();
        let full = hidden_for(&cfg, &params, &inputs);
        let prefix = hidden_for(&cfg, &params, &inputs[..cut]);
        for r in 0..cut {
            for (a, b) in full.row(r).iter().zip(prefix.row(r)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    // Cached chunked evaluation equals one full pass.
    #[test]
    fn chunked_forward_matches_full(
        ids in proptest::collection::vec(3usize..vocab::VOCAB_SIZE, 3..20),
        split in 1usize..19,
    ) {
        let cfg = small();
        let params = ParameterSet::init(&cfg).unwrap();
        let split = split.min(ids.len() - 1);
        let inputs: Vec<Input> = ids.iter().map(|&t| Input::Token(t)).collect();
        let full = hidden_for(&cfg, &params, &inputs);
        let mut tape = Tape::new();
        let b = bind_frozen(&mut tape, &params);
        let mut cache = KvCache::new(cfg.n_layers);
        let x1 = embed(&mut tape, &b, &inputs[..split]).unwrap();
        let o1 = forward_chunk(&cfg, &mut tape, &b, &mut cache, x1).unwrap();
        let x2 = embed(&mut tape, &b, &inputs[split..]).unwrap();
        let o2 = forward_chunk(&cfg, &mut tape, &b, &mut cache, x2).unwrap();
        prop_assert_eq!(o2.start, split);
        let rows: Vec<Vec<f64>> = tape.value(o1.hidden).to_rows().into_iter()
            .chain(tape.value(o2.hidden).to_rows()).collect();
        for (r, row) in rows.iter().enumerate() {
            for (a, b) in full.row(r).iter().zip(row) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn qk_scores_match_per_head_oracle() {
    let cfg = ModelConfig::default();
    let params = ParameterSet::init(&cfg).unwrap();
    let states: Vec<Vec<f64>> = (0..7)
        .map(|r| (0..64).map(|c| ((r * 64 + c) as f64 * 0.37).sin()).collect())
        .collect();
    let states = Tensor::from_rows(&states).unwrap();
    let (text, image) = ([4usize, 6], [0usize, 1, 2, 3]);
    let layer = 1;
    let a = qk_scores(&cfg, &params, layer, &text, &image, &states).unwrap();
    let ll = params.layout.layers[layer];
    let wq = params.tensor(ll.wq);
    let wk = params.tensor(ll.wk);
    let proj = |row: &[f64], w: &Tensor| -> Vec<f64> {
        (0..64)
            .map(|j| (0..64).map(|i| row[i] * w.data()[i * 64 + j]).sum())
            .collect()
    };
    let dh = cfg.head_dim();
    for (pi, &p) in text.iter().enumerate() {
        let q = proj(states.row(p), wq);
        for (ji, &j) in image.iter().enumerate() {
            let k = proj(states.row(j), wk);
            let mut mean = 0.0;
            for h in 0..cfg.n_heads {
                let dot: f64 = (h * dh..(h + 1) * dh).map(|d| q[d] * k[d]).sum();
                mean += dot / cfg.n_heads as f64;
            }
            let expect = mean / (cfg.hidden_dim as f64).sqrt();
            assert!((a.data()[pi * image.len() + ji] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::new(small()).unwrap();
    m.save(&path).unwrap();
    let back = Model::load(&path, Some(&small())).unwrap();
    assert_eq!(back.params.checksum(), m.params.checksum());
    assert_eq!(back, m);
    let other = ModelConfig {
        latent_k: 3,
        ..small()
    };
    assert!(Model::load(&path, Some(&other)).is_err());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::new(small()).unwrap();
    let text = checkpoint_string(&m.config, &m.params);
    let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
    std::fs::write(&path, truncated).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, "not a checkpoint\n").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn vision_encoder_receives_no_gradient() {
    let cfg = small();
    let mut params = ParameterSet::init(&cfg).unwrap();
    let before = params.vision_checksum();
    let mut tape = Tape::new();
    let b = bind(&mut tape, &params);
    let c = encode_image(&params, &grid_3x3()).unwrap();
    let mut inputs: Vec<Input> = c.to_rows().into_iter().map(Input::Vector).collect();
    inputs.push(Input::Token(vocab::NAV));
    let x = embed(&mut tape, &b, &inputs).unwrap();
    let out = forward(&cfg, &mut tape, &b, x).unwrap();
    let loss = tape.sum(out.logits);
    let grads = tape.backward(loss).unwrap();
    b.accumulate_grads(&grads, &mut params).unwrap();
    assert!(params.params[params.layout.vision].tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert_eq!(params.vision_checksum(), before);
    assert!(params.flatten_grads().iter().any(|&g| g != 0.0));
}
