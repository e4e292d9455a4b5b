//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints its own PASS/FAIL line; the process fails if any does.
//! `ACCEPTANCE_ONLY=1,6` restricts the run to the listed criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ilvr_cli::{cmd_export_heatmap, cmd_gen_data, cmd_gradcheck, cmd_sweep, cmd_train, RunConfig};
use ilvr_core::interleave::{decode, DecodeOptions, TraceInput};
use ilvr_core::model::{Model, ModelConfig, ParameterSet};
use ilvr_core::tasks::{generate, verify_count, verify_gridnav, DatasetSpec, Family};
use ilvr_core::teacher::{group_mean, select_topk, CandidatePool, MomentumTeacher};
use ilvr_core::vocab::{LATENT_END, LATENT_PAD, LATENT_START};
use ilvr_numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

type Outcome = Result<String, String>;
type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(pairs: &[(&str, String)]) -> Result<RunConfig, String> {
    let overrides: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    RunConfig::load(None, &overrides).map_err(|e| e.to_string())
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

fn gradient_correctness(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = config(&[("out", path(&dir.join("gradcheck")))])?;
    let outcome = cmd_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let err = outcome.max_rel_error();
    ensure(cfg.gradcheck.model.hidden_dim == 64 && cfg.gradcheck.model.n_layers == 2, || {
        "gradient check model is not 2-layer H=64".into()
    })?;
    ensure(outcome.checks.len() == 2, || "expected one check per stage loss".into())?;
    ensure(err < 1e-3, || format!("max relative error {err:.3e}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {err:.3e} in {:.1}s", elapsed.as_secs_f64()))
}

/// Exhaustive ranking with ties to the lower index, reported in index order
/// and padded by repeating the lowest winner.
fn oracle_topk(q: &[f64], rows: &[Vec<f64>], k: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let c: Vec<f64> = rows
        .iter()
        .map(|r| {
            let (nq, nr) = (norm(q), norm(r));
            if nq < 1e-12 || nr < 1e-12 {
                0.0
            } else {
                (q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (nq * nr)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    let mut won: Vec<usize> = (0..rows.len())
        .filter(|&i| (0..rows.len()).filter(|&j| c[j] > c[i] || (c[j] == c[i] && j < i)).count() < k)
        .collect();
    won.sort_unstable();
    while won.len() < k {
        won.push(won[0]);
    }
    won
}

fn topk_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for case in 0..1000 {
        let h = rng.random_range(1..8);
        let n = rng.random_range(1..20);
        let k = rng.random_range(1..12);
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h).map(|_| rng.random_range(-3..=3) as f64).collect())
            .collect();
        if n > 2 && case % 4 == 0 {
            rows[n - 1] = rows[1].clone();
        }
        let q: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pool = CandidatePool {
            features: Tensor::from_rows(&rows).map_err(|e| e.to_string())?,
            sources: (0..n).map(|i| i..i + 1).collect(),
        };
        let got = select_topk(&q, &pool, k).map_err(|e| e.to_string())?;
        if got.indices != oracle_topk(&q, &rows, k) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} of 1000 instances differ"))?;
    Ok("1000 instances, 0 mismatches".into())
}

fn ema_exactness() -> Outcome {
    let cfg = ModelConfig {
        hidden_dim: 16,
        n_heads: 2,
        ffn_dim: 32,
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    let online = ParameterSet::init(&cfg).map_err(|e| e.to_string())?;
    let start = ParameterSet::init(&ModelConfig { seed: 7, ..cfg.clone() }).map_err(|e| e.to_string())?;
    let theta = online.flatten_trainable();
    let init = start.flatten_trainable();
    let mut worst = 0.0f64;
    for tau in [0.0, 0.5, 0.999] {
        for n in [1, 10, 100] {
            let mut t = MomentumTeacher::new(&start, tau).map_err(|e| e.to_string())?;
            for _ in 0..n {
                t.update(&online).map_err(|e| e.to_string())?;
            }
            let f = tau.powi(n);
            for ((now, s), o) in t.params.flatten_trainable().iter().zip(&init).zip(&theta) {
                worst = worst.max(((now - o) - f * (s - o)).abs());
            }
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("9 (tau, n) cells, max deviation {worst:.1e}"))
}

fn grammar_and_feedback() -> Outcome {
    let tasks = generate(&DatasetSpec {
        size: 20,
        seed: 5,
        ..DatasetSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let mut generations = 0;
    let mut latent_steps = 0;
    for k in [1, 4, 8] {
        let model = Model::new(ModelConfig {
            hidden_dim: 32,
            n_heads: 4,
            ffn_dim: 64,
            max_seq_len: 512,
            latent_k: k,
            seed: 300 + k as u64,
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let re = Regex::new(&format!("^T+(SP{{{k}}}ET+)*$")).unwrap();
        for seed in 0..100u64 {
            let t = &tasks[seed as usize % tasks.len()];
            let opts = DecodeOptions {
                max_tokens: 400,
                temperature: 1.0,
                seed,
            };
            let d = decode(&model, Some(&t.image), &t.question, &opts).map_err(|e| e.to_string())?;
            let stream: String = d
                .sequence
                .tokens()
                .iter()
                .map(|&tok| match tok {
                    LATENT_START => 'S',
                    LATENT_PAD => 'P',
                    LATENT_END => 'E',
                    _ => 'T',
                })
                .collect();
            ensure(re.is_match(&stream), || format!("K={k} seed={seed}: {stream}"))?;
            for i in 1..d.trace.len() {
                if let (true, TraceInput::Vector(v)) = (d.trace[i].latent, &d.trace[i].input) {
                    let bits = |x: &[f64]| x.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                    ensure(bits(v) == bits(&d.trace[i - 1].hidden), || {
                        format!("K={k} seed={seed}: latent input {i} is not the previous hidden state")
                    })?;
                    latent_steps += 1;
                }
            }
            generations += 1;
        }
    }
    ensure(latent_steps > 0, || "no latent steps were generated".into())?;
    Ok(format!("{generations} generations, {latent_steps} latent steps checked"))
}

fn group_mean_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut identity, mut pooled) = (0, 0);
    for _ in 0..500 {
        let p = rng.random_range(1..300);
        let l = rng.random_range(1..200);
        let h = rng.random_range(1..5);
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..h).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let pool = group_mean(&Tensor::from_rows(&rows).unwrap(), l).map_err(|e| e.to_string())?;
        let expect = if p >= l { l } else { p };
        ensure(pool.len() == expect, || format!("P={p} L={l}: {} candidates", pool.len()))?;
        if p >= l {
            pooled += 1;
        } else {
            identity += 1;
        }
        for d in 0..h {
            let total: f64 = rows.iter().map(|r| r[d]).sum();
            let kept: f64 = pool
                .sources
                .iter()
                .enumerate()
                .map(|(i, r)| r.len() as f64 * pool.features.row(i)[d])
                .sum();
            ensure((total - kept).abs() < 1e-10, || format!("P={p} L={l}: sum drift {:.3e}", total - kept))?;
        }
    }
    ensure(identity > 0 && pooled > 0, || "both branches must be exercised".into())?;
    Ok(format!("500 pairs ({pooled} pooled, {identity} passthrough)"))
}

fn desk_ordering(dir: &Path) -> Outcome {
    let start = Instant::now();
    let arms = [("interleaved", "adaptive"), ("direct", "adaptive"), ("direct", "pooling")];
    let mut lines = Vec::new();
    let mut holds = 0;
    for (i, seed) in [42u64, 43, 44].into_iter().enumerate() {
        let data = dir.join(format!("desk-data-{seed}"));
        let base = [
            ("seed", seed.to_string()),
            ("family", "gridnav".into()),
            ("width", "4".into()),
            ("height", "4".into()),
            ("size", "600".into()),
            ("data", path(&data)),
        ];
        let gen = cmd_gen_data(&config(&base)?).map_err(|e| e.to_string())?;
        ensure(gen.train == 500 && gen.test == 100, || format!("split {}/{}", gen.train, gen.test))?;
        let mut acc = Vec::new();
        for (structure, mechanism) in arms {
            let mut pairs = base.to_vec();
            pairs.push(("structure", structure.into()));
            pairs.push(("mechanism", mechanism.into()));
            pairs.push(("out", path(&dir.join(format!("desk-{seed}-{structure}-{mechanism}")))));
            let report = cmd_train(&config(&pairs)?).map_err(|e| e.to_string())?;
            let eval = report.eval.ok_or("training produced no final evaluation")?;
            acc.push(eval.accuracy);
        }
        let ok = acc[0] >= acc[1] && acc[1] >= acc[2] && acc[0] - acc[2] >= 0.03 - 1e-12;
        lines.push(format!(
            "seed {seed}: IA {:.2} DA {:.2} DP {:.2} {}",
            acc[0],
            acc[1],
            acc[2],
            if ok { "holds" } else { "violated" }
        ));
        if ok {
            holds += 1;
        }
        // seed 42 alone settles it when the ordering holds there
        if i == 0 && ok {
            break;
        }
        if holds >= 2 || i + 1 - holds >= 2 {
            break;
        }
    }
    let elapsed = start.elapsed();
    let summary = format!("{} ({:.0}s)", lines.join("; "), elapsed.as_secs_f64());
    let passed = (lines.len() == 1 && holds == 1) || holds >= 2;
    ensure(elapsed < Duration::from_secs(3600), || format!("{summary}: over 60 minutes"))?;
    ensure(passed, || summary.clone())?;
    Ok(summary)
}

fn small_run(dir: &Path, name: &str) -> Result<RunConfig, String> {
    let data = dir.join(format!("{name}-data"));
    let pairs = [
        ("seed", "42".to_string()),
        ("size", "24".into()),
        ("width", "3".into()),
        ("height", "3".into()),
        ("hazards", "1".into()),
        ("max_steps", "4".into()),
        ("data", path(&data)),
        ("out", path(&dir.join(name))),
        ("hidden_dim", "16".into()),
        ("n_heads", "2".into()),
        ("ffn_dim", "32".into()),
        ("max_seq_len", "256".into()),
        ("stage1_epochs", "1".into()),
        ("stage2_epochs", "1".into()),
    ];
    let cfg = config(&pairs)?;
    cmd_gen_data(&cfg).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn ablation_harness(dir: &Path) -> Outcome {
    let cfg = small_run(dir, "ablation")?;
    let mut files = 0;
    for (key, values) in [("latent_k", vec!["1", "4", "8", "12"]), ("lambda_sim", vec!["0.1", "1", "10"])] {
        let values: Vec<String> = values.into_iter().map(String::from).collect();
        let reports = cmd_sweep(&cfg, key, &values).map_err(|e| e.to_string())?;
        ensure(reports.len() == values.len(), || format!("{key}: {} runs", reports.len()))?;
        for (v, r) in &reports {
            let text = fs::read_to_string(&r.metrics).map_err(|e| e.to_string())?;
            let last = text.lines().last().unwrap_or_default();
            ensure(last.contains("\"kind\":\"final\""), || format!("{key}={v}: metrics end without a final record"))?;
            ensure(r.metrics.starts_with(cfg.out.join(format!("{key}={v}"))), || {
                format!("{key}={v}: metrics written to {}", r.metrics.display())
            })?;
            files += 1;
        }
    }
    Ok(format!("{files} configurations, one metrics file each"))
}

fn heatmap_normalization(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs = 0;
    let mut maps = 0;
    for c in 0..10u64 {
        let family = if c % 2 == 0 { "gridnav" } else { "count" };
        let k = rng.random_range(1..=8usize);
        let structure = if rng.random_bool(0.5) { "interleaved" } else { "direct" };
        let data = dir.join(format!("heat-data-{c}"));
        let ckpt = dir.join(format!("heat-{c}.ckpt"));
        let model = Model::new(ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            latent_k: k,
            seed: rng.random(),
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        model.save(&ckpt).map_err(|e| e.to_string())?;
        let mut cfg = config(&[
            ("seed", (1000 + c).to_string()),
            ("family", family.into()),
            ("size", "60".into()),
            ("data", path(&data)),
            ("out", path(&dir.join(format!("heat-{c}")))),
            ("checkpoint", path(&ckpt)),
            ("latent_k", k.to_string()),
            ("structure", structure.into()),
            ("group_size", rng.random_range(2..=16usize).to_string()),
        ])?;
        cmd_gen_data(&cfg).map_err(|e| e.to_string())?;
        cfg.trajectories = (0..10).map(|_| rng.random_range(0..cfg.data.size - cfg.data.size * 5 / 6)).collect();
        for (i, h) in cmd_export_heatmap(&cfg).map_err(|e| e.to_string())? {
            let sum = h.sum();
            ensure((sum - 1.0).abs() < 1e-9, || format!("checkpoint {c} trajectory {i}: sum {sum}"))?;
            ensure(h.values.iter().all(|&v| v >= 0.0), || format!("checkpoint {c} trajectory {i}: negative entry"))?;
            maps += 1;
        }
        pairs += cfg.trajectories.len();
    }
    ensure(pairs == 100, || format!("{pairs} pairs"))?;
    Ok(format!("{pairs} checkpoint/trajectory pairs, {maps} maps"))
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = small_run(dir, "determinism")?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let mut c = cfg.clone();
        c.out = dir.join(format!("determinism-{run}"));
        let r = cmd_train(&c).map_err(|e| e.to_string())?;
        logs.push(fs::read(&r.metrics).map_err(|e| e.to_string())?);
    }
    ensure(!logs[0].is_empty(), || "empty metrics log".into())?;
    ensure(logs[0] == logs[1], || "metrics logs differ".into())?;
    Ok(format!("two seed-42 runs, {} identical bytes", logs[0].len()))
}

fn dataset_soundness() -> Outcome {
    let mut counts = Vec::new();
    for family in [Family::Gridnav, Family::Count] {
        let data = generate(&DatasetSpec {
            family,
            size: 1000,
            seed: 42,
            ..DatasetSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let bad: Vec<_> = data
            .iter()
            .filter(|t| match family {
                Family::Gridnav => verify_gridnav(t).is_err(),
                Family::Count => verify_count(t).is_err(),
            })
            .map(|t| t.seed)
            .collect();
        ensure(bad.is_empty(), || format!("{family:?}: {} failures, first seed {}", bad.len(), bad[0]))?;
        counts.push(data.len());
    }
    Ok(format!("{} gridnav replayed, {} count recounted", counts[0], counts[1]))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let dir = scratch.path();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Box::new(|| gradient_correctness(dir))),
        (2, "top-K oracle equivalence", Box::new(topk_oracle)),
        (3, "EMA exactness", Box::new(ema_exactness)),
        (4, "interleave grammar and feedback", Box::new(grammar_and_feedback)),
        (5, "group-mean conservation", Box::new(group_mean_conservation)),
        (6, "desk-scale ordering", Box::new(|| desk_ordering(dir))),
        (7, "ablation harness", Box::new(|| ablation_harness(dir))),
        (8, "heatmap normalization", Box::new(|| heatmap_normalization(dir))),
        (9, "determinism", Box::new(|| determinism(dir))),
        (10, "dataset soundness", Box::new(dataset_soundness)),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("acceptance {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                println!("acceptance {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
                failed.push(*n);
            }
        }
    }
    // exit() skips destructors, so clean up the scratch directory first
    drop(criteria);
    drop(scratch);
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
