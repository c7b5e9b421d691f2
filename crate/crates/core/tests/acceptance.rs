//! Acceptance criteria: one PASS/FAIL line each, non-zero exit on any failure.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::perturb_trainables;
use rand::Rng;
use refflow::attention::{self, RotaryTable};
use refflow::commands::{self, RunConfig, SeparationReport, CHECKPOINT_FILE, LOSS_LOG_FILE, SAMPLES_FILE};
use refflow::datapipe::FilterThresholds;
use refflow::flowmatch::{self, SamplerSchedule};
use refflow::fusion::{random_inputs, ModelConfig, ModelInputs, TwinBackbone};
use refflow::objectives::{build_negative_pass, LossWeights, NegativeSource};
use refflow::reflora::GlobalEmbeddings;
use refflow::seed::stream;
use refflow::trainer::{self, AdamWConfig, AdamWState, DataConfig, SyntheticWorld};
use refflow::{Tape, Tensor};
use tempfile::tempdir;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_check() -> Outcome {
    let cfg = RunConfig::default();
    let g = &cfg.gradcheck;
    if g.model.depth != 2 || g.model.width != 16 || g.model.lora_rank != 4 {
        return Err(format!("unexpected gradcheck model {:?}", g.model));
    }
    let start = Instant::now();
    let r = commands::run_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(
        r.passed && r.max_rel_err < 1e-4 && took < Duration::from_secs(60),
        format!(
            "max rel err {:.2e} over {} elements of {} tensors (worst {}[{}]) in {}",
            r.max_rel_err,
            r.elements_checked,
            r.parameters_checked,
            r.worst_param,
            r.worst_index,
            secs(took)
        ),
    )
}

fn small(depth: usize, width: usize) -> ModelConfig {
    ModelConfig {
        depth,
        width,
        video_dim: 4,
        audio_dim: 3,
        text_seq: 3,
        text_vocab: 3,
        face_dim: 6,
        timbre_dim: 5,
        lora_rank: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn removed(inputs: &ModelInputs) -> ModelInputs {
    ModelInputs {
        ref_image: None,
        ref_audio: None,
        ..inputs.clone()
    }
}

fn zero_init() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, cfg) in [small(2, 16), RunConfig::default().model].into_iter().enumerate() {
        let model = TwinBackbone::init(cfg.clone(), i as u64).map_err(|e| e.to_string())?;
        let mut x = random_inputs(&cfg, 6, 5, 4, &mut stream(i as u64, "zero-init"));
        x.embeddings = Some(GlobalEmbeddings::zeros(cfg.face_dim, cfg.timbre_dim));
        let (v, a) = model.predict(&x, true).map_err(|e| e.to_string())?;
        let (v0, a0) = model.predict(&removed(&x), false).map_err(|e| e.to_string())?;
        worst = worst.max(v.max_abs_diff(&v0)).max(a.max_abs_diff(&a0));
    }
    ensure(worst < 1e-12, format!("max abs diff {worst:.2e}"))
}

fn reference_blocking() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = stream(2024, "blocking-configs");
    for k in 0..20u64 {
        let cfg = small(rng.random_range(1..=3), 2 * rng.random_range(2..=8));
        let mut model = TwinBackbone::init(cfg.clone(), k).map_err(|e| e.to_string())?;
        perturb_trainables(&mut model, 0.5, k);
        let (sv, sa, sr) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..6));
        let x = random_inputs(&cfg, sv, sa, sr, &mut stream(k, "blocking-inputs"));
        let neg = build_negative_pass(&x);
        let (v, a) = model.predict(&neg.inputs, neg.mask_refs).map_err(|e| e.to_string())?;
        let (v0, a0) = model.predict(&removed(&neg.inputs), false).map_err(|e| e.to_string())?;
        worst = worst.max(v.max_abs_diff(&v0)).max(a.max_abs_diff(&a0));
    }
    ensure(worst < 1e-12, format!("20 configurations, max abs diff {worst:.2e}"))
}

fn stop_gradient() -> Outcome {
    let cfg = small(2, 16);
    let mut model = TwinBackbone::init(cfg.clone(), 4).map_err(|e| e.to_string())?;
    perturb_trainables(&mut model, 0.2, 4);
    let data = DataConfig {
        video_seq: 5,
        audio_seq: 5,
        ref_seq: 3,
        ..DataConfig::default()
    };
    let world = SyntheticWorld::new(&data, &cfg, 4).map_err(|e| e.to_string())?;
    let provider = refflow::reflora::SyntheticEmbeddingProvider::new(4, cfg.face_dim, cfg.timbre_dim);
    let snapshot = model.clone();
    let mut checked = 0;
    for (i, b) in trainer::gen_synthetic(world, 4, "stopgrad").take(3).enumerate() {
        let s = b.to_sample(&provider).map_err(|e| e.to_string())?;
        let clamp = [None, Some(0.1), None][i];
        let w = LossWeights::default();
        let (_, live) = trainer::loss_and_grads(&model, &s, &w, clamp, NegativeSource::Live).map_err(|e| e.to_string())?;
        let (_, snap) =
            trainer::loss_and_grads(&model, &s, &w, clamp, NegativeSource::Snapshot(&snapshot)).map_err(|e| e.to_string())?;
        for (name, g) in &live {
            if !g.bit_eq(&snap[name]) {
                return Err(format!("{name} differs on batch {i}"));
            }
            checked += g.numel();
        }
    }
    Ok(format!("{checked} gradient entries bit-identical over 3 batches"))
}

fn sampler_oracle() -> Outcome {
    let mut rng = stream(5, "euler");
    let z0 = Tensor::randn(&[7, 4], 1.0, &mut rng);
    let z1 = Tensor::randn(&[7, 4], 1.0, &mut rng);
    let v = flowmatch::fm_target(&z0, &z1).map_err(|e| e.to_string())?;
    let schedule = SamplerSchedule::uniform(50).map_err(|e| e.to_string())?;
    let out = flowmatch::integrate(z1, &schedule, |_, _| Ok::<_, flowmatch::FlowError>(v.clone()))
        .map_err(|e| e.to_string())?;
    let err = out.max_abs_diff(&z0);
    ensure(err < 1e-12, format!("50 steps, max abs err {err:.2e}"))
}

fn frozen_partition() -> Outcome {
    let cfg = RunConfig::default();
    let mut model = TwinBackbone::init(cfg.model.clone(), 6).map_err(|e| e.to_string())?;
    let before = model.params().frozen_hash();
    let trainable_before: Vec<Tensor> = model.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
    let world = SyntheticWorld::new(&cfg.data, &cfg.model, 6).map_err(|e| e.to_string())?;
    let provider = refflow::reflora::SyntheticEmbeddingProvider::new(6, cfg.model.face_dim, cfg.model.timbre_dim);
    let mut opt = AdamWState::new(AdamWConfig {
        lr: 1e-3,
        ..AdamWConfig::default()
    });
    for b in trainer::gen_synthetic(world, 6, "frozen").take(100) {
        let s = b.to_sample(&provider).map_err(|e| e.to_string())?;
        trainer::train_step(&mut model, &s, &LossWeights::default(), None, &mut opt).map_err(|e| e.to_string())?;
    }
    let last = cfg.model.depth - 1;
    let detached = |name: &str| {
        name.starts_with(&format!("blocks.{last}."))
            && (name.contains("self_attn.lora_q.") || name.contains("self_attn.lora_o."))
    };
    let mut moved = 0;
    for (p, b) in model.params().iter().filter(|p| p.trainable).zip(&trainable_before) {
        let changed = !p.value.bit_eq(b);
        if changed == detached(&p.name) {
            return Err(format!("{} changed={changed}", p.name));
        }
        moved += changed as usize;
    }
    let after = model.params().frozen_hash();
    ensure(
        after == before,
        format!(
            "frozen hash {}... unchanged after 100 steps, {moved}/{} trainable tensors updated",
            &after[..12],
            trainable_before.len()
        ),
    )
}

fn toy_config(lambda_cl: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.weights.lambda_identity = lambda_cl;
    cfg.train.weights.lambda_timbre = lambda_cl;
    cfg
}

fn toy_run(cfg: &RunConfig, out: &Path) -> Result<SeparationReport, String> {
    commands::run_train(cfg, out).map_err(|e| e.to_string())?;
    let toy = commands::load_toy(&out.join(CHECKPOINT_FILE), &cfg.model).map_err(|e| e.to_string())?;
    commands::evaluate_separation(&toy, &cfg.eval, &cfg.sample, cfg.seed).map_err(|e| e.to_string())
}

fn toy_conditioning(root: &Path) -> Outcome {
    let base = toy_config(0.1);
    let m = &base.model;
    let d = &base.data;
    if m.width != 64 || m.depth != 2 || base.train.steps != 2000 || d.n_identities != 2 || d.n_timbres != 2 {
        return Err("toy configuration drifted".into());
    }
    let start = Instant::now();
    let with_cl = toy_run(&base, &root.join("cl"))?;
    let without_cl = toy_run(&toy_config(0.0), &root.join("no-cl"))?;
    let took = start.elapsed();
    let a = with_cl.identity_accuracy >= 0.9
        && with_cl.timbre_accuracy >= 0.9
        && with_cl.identity_accuracy_without_references <= 0.6
        && with_cl.timbre_accuracy_without_references <= 0.6;
    let b = with_cl.velocity_separation > without_cl.velocity_separation
        && with_cl.identity_accuracy >= without_cl.identity_accuracy
        && with_cl.timbre_accuracy >= without_cl.timbre_accuracy;
    ensure(
        a && b && took < Duration::from_secs(15 * 60),
        format!(
            "accuracy id/timbre {:.2}/{:.2} with refs, {:.2}/{:.2} without; separation {:.4} (λ_CL=0.1) vs {:.4} (λ_CL=0), accuracy {:.2}/{:.2} at λ_CL=0; {}",
            with_cl.identity_accuracy,
            with_cl.timbre_accuracy,
            with_cl.identity_accuracy_without_references,
            with_cl.timbre_accuracy_without_references,
            with_cl.velocity_separation,
            without_cl.velocity_separation,
            without_cl.identity_accuracy,
            without_cl.timbre_accuracy,
            secs(took)
        ),
    )
}

fn manifest_golden() -> Outcome {
    let manifest = include_str!("data/manifest.jsonl");
    let kept = include_str!("data/expected_kept.txt");
    let rejected = include_str!("data/expected_rejected.tsv");
    let report = commands::run_filter(manifest, &FilterThresholds::default());
    let got: Vec<&str> = report.kept().map(|r| r.clip_id.as_str()).collect();
    let want: Vec<&str> = kept.lines().collect();
    ensure(
        report.outcomes.len() == 1000
            && !report.has_errors()
            && got == want
            && commands::rejection_report(&report) == rejected,
        format!("{} kept, {} rejected of {}", got.len(), report.rejected().count(), report.outcomes.len()),
    )
}

fn rope_invariance() -> Outcome {
    let d = 16;
    let table = RotaryTable::new(d, 10_000.0, 256).map_err(|e| e.to_string())?;
    let mut rng = stream(9, "rope-shift");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let q = Tensor::randn(&[1, d], 1.0, &mut rng);
        let k = Tensor::randn(&[1, d], 1.0, &mut rng);
        let (m, n) = (rng.random_range(0..200), rng.random_range(0..200));
        let score = |a: usize, b: usize| -> Result<f64, String> {
            let mut tape = Tape::new();
            let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
            let qr = attention::rope_apply(&mut tape, qv, &[a], &table).map_err(|e| e.to_string())?;
            let kr = attention::rope_apply(&mut tape, kv, &[b], &table).map_err(|e| e.to_string())?;
            Ok(tape.value(qr).data().iter().zip(tape.value(kr).data()).map(|(x, y)| x * y).sum())
        };
        let s0 = score(m, n)?;
        for shift in 1..=16 {
            worst = worst.max((score(m + shift, n + shift)? - s0).abs());
        }
    }
    ensure(worst < 1e-10, format!("200 pairs x 16 shifts, max deviation {worst:.2e}"))
}

fn determinism(root: &Path) -> Outcome {
    let cfg = toy_config(0.1);
    let mut digests = Vec::new();
    for name in ["cl", "cl-repeat"] {
        let out = root.join(name);
        if !out.join(CHECKPOINT_FILE).exists() {
            commands::run_train(&cfg, &out).map_err(|e| e.to_string())?;
        }
        commands::run_sample(&cfg, &out.join(CHECKPOINT_FILE), &out).map_err(|e| e.to_string())?;
        let files: Vec<Vec<u8>> = [CHECKPOINT_FILE, LOSS_LOG_FILE, SAMPLES_FILE]
            .iter()
            .map(|f| fs::read(out.join(f)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        digests.push(files);
    }
    let same = digests[0] == digests[1];
    let bytes: usize = digests[0].iter().map(Vec::len).sum();
    ensure(same, format!("checkpoint, loss log and samples ({bytes} bytes) identical across two runs"))
}

fn main() -> ExitCode {
    let scratch = tempdir().expect("temp dir");
    let root = scratch.path();
    let criteria: Vec<Criterion> = vec![
        ("end-to-end gradient check", Box::new(gradient_check)),
        ("zero-init equivalence", Box::new(zero_init)),
        ("reference-blocking equivalence", Box::new(reference_blocking)),
        ("stop-gradient correctness", Box::new(stop_gradient)),
        ("sampler oracle", Box::new(sampler_oracle)),
        ("frozen partition", Box::new(frozen_partition)),
        ("toy conditioning", Box::new(|| toy_conditioning(root))),
        ("manifest golden", Box::new(manifest_golden)),
        ("rope shift invariance", Box::new(rope_invariance)),
        ("determinism", Box::new(|| determinism(root))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{}]", i + 1, secs(start.elapsed()));
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
