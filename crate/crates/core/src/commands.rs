//! Command implementations behind the `refflow` binary: train, sample,
//! gradcheck, filter and eval-separation.
//!
//! Every command is a pure function of its [`RunConfig`] and inputs, so
//! equal seeds give bit-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::datapipe::{self, FilterReport, FilterThresholds};
use crate::flowmatch::{self, GuidanceConfig, SamplerSchedule};
use crate::fusion::{random_inputs, ModelConfig, ModelError, TwinBackbone};
use crate::numerics::Tensor;
use crate::objectives::{self, LossBreakdown, LossWeights, NegativeSource, FlowTargets};
use crate::reflora::{ReferenceKey, SyntheticEmbeddingProvider};
use crate::sampling::{self, SampleError, SampleRequest};
use crate::seed;
use crate::trainer::{
    self, AdamWConfig, AdamWState, DataConfig, SyntheticWorld, TrainError, TrainingSample,
};
use crate::Tape;

pub const CHECKPOINT_FILE: &str = "checkpoint.rflw";
pub const LOSS_LOG_FILE: &str = "losses.tsv";
pub const RUN_LOG_FILE: &str = "run.log";
pub const SAMPLES_FILE: &str = "samples.rflw";
pub const LATENTS_KIND: &str = "latents";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 1,
            CommandError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CommandError {
            fn from(e: $t) -> Self {
                CommandError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    TrainError,
    ModelError,
    SampleError,
    CheckpointError,
    objectives::ObjectiveError,
    flowmatch::FlowError,
    crate::NumericsError
);

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Runtime(format!("io: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub weights: LossWeights,
    pub clamp: Option<f64>,
    pub optimizer: AdamWConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            weights: LossWeights::default(),
            clamp: None,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub scale_video: f64,
    pub scale_audio: f64,
    pub identity: usize,
    pub timbre: usize,
    pub text_id: usize,
    /// Sample without reference tokens or global embeddings.
    pub unconditional: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            steps: 50,
            scale_video: g.scale_video,
            scale_audio: g.scale_audio,
            identity: 0,
            timbre: 0,
            text_id: 0,
            unconditional: false,
        }
    }
}

impl SampleSection {
    fn guidance(&self) -> Result<GuidanceConfig, CommandError> {
        GuidanceConfig::new(self.scale_video, self.scale_audio).map_err(|e| CommandError::Usage(e.to_string()))
    }

    fn schedule(&self) -> Result<SamplerSchedule, CommandError> {
        SamplerSchedule::uniform(self.steps).map_err(|e| CommandError::Usage(format!("sample.steps: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub model: ModelConfig,
    pub video_seq: usize,
    pub audio_seq: usize,
    pub ref_seq: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Std of the random values given to the zero-initialized trainables.
    pub perturb_std: f64,
    pub weights: LossWeights,
    /// Negates the analytic LoRA gradients; the check must then fail.
    pub inject_fault: bool,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                depth: 2,
                width: 16,
                video_dim: 4,
                audio_dim: 4,
                text_seq: 2,
                text_vocab: 3,
                lora_rank: 4,
                mlp_ratio: 2,
                ..ModelConfig::default()
            },
            video_seq: 3,
            audio_seq: 3,
            ref_seq: 2,
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            perturb_std: 0.1,
            weights: LossWeights::default(),
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub heldout_batches: usize,
    /// Noise draws; each is sampled once per identity.
    pub pairs: usize,
    pub sample_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            heldout_batches: 32,
            pairs: 50,
            sample_steps: 50,
        }
    }
}

/// Resolved settings of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub gradcheck: GradcheckSection,
    pub eval: EvalSection,
    pub filter: FilterThresholds,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CommandError> {
        serde_json::from_str(text).map_err(|e| CommandError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CommandError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        let usage = |e: String| CommandError::Usage(e);
        self.model.validate().map_err(|e| usage(format!("model: {e}")))?;
        self.data.validate(&self.model).map_err(|e| usage(format!("data: {e}")))?;
        self.gradcheck.model.validate().map_err(|e| usage(format!("gradcheck.model: {e}")))?;
        if self.sample.identity >= self.data.n_identities || self.sample.timbre >= self.data.n_timbres {
            return Err(usage("sample.identity/timbre out of range for data config".into()));
        }
        if self.sample.text_id >= self.model.text_vocab {
            return Err(usage("sample.text_id out of range".into()));
        }
        self.sample.guidance()?;
        self.sample.schedule()?;
        if self.eval.sample_steps == 0 {
            return Err(usage("eval.sample_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf, CommandError> {
    fs::create_dir_all(out)?;
    Ok(out.join(name))
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: LossBreakdown,
    pub frozen_hash: String,
    pub checkpoint: PathBuf,
}

/// Trains from a fresh model and writes checkpoint, loss log and run log.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary, CommandError> {
    cfg.validate()?;
    let world = SyntheticWorld::new(&cfg.data, &cfg.model, cfg.seed)?;
    let provider = provider_for(cfg.seed, &cfg.model);
    let mut model = TwinBackbone::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamWState::new(cfg.train.optimizer);
    let mut log = vec![objectives::LOG_HEADER.to_string()];
    let mut last = LossBreakdown::default();
    for (step, batch) in trainer::gen_synthetic(world, cfg.seed, "train")
        .take(cfg.train.steps)
        .enumerate()
    {
        let sample = batch.to_sample(&provider)?;
        last = trainer::train_step(&mut model, &sample, &cfg.train.weights, cfg.train.clamp, &mut opt)?;
        log.push(last.log_line(step));
    }
    log.push(String::new());
    fs::write(out_file(out, LOSS_LOG_FILE)?, log.join("\n"))?;
    fs::write(out_file(out, RUN_LOG_FILE)?, format!("config {}\n", cfg.to_json()))?;

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), json!(cfg.seed));
    meta.insert("data".into(), json!(cfg.data));
    meta.insert("train".into(), json!(cfg.train));
    meta.insert("final_loss".into(), json!(last));
    let path = out_file(out, CHECKPOINT_FILE)?;
    trainer::save_checkpoint(&path, &model, &opt, meta)?;
    Ok(TrainSummary {
        steps: cfg.train.steps,
        final_loss: last,
        frozen_hash: model.params().frozen_hash(),
        checkpoint: path,
    })
}

fn provider_for(seed: u64, model: &ModelConfig) -> SyntheticEmbeddingProvider {
    SyntheticEmbeddingProvider::new(seed, model.face_dim, model.timbre_dim)
}

/// Model plus the synthetic world it was trained on.
pub struct TrainedToy {
    pub model: TwinBackbone,
    pub world: SyntheticWorld,
    pub provider: SyntheticEmbeddingProvider,
    pub train_seed: u64,
}

/// Loads a training checkpoint and rebuilds its data world.
pub fn load_toy(checkpoint: &Path, expected: &ModelConfig) -> Result<TrainedToy, CommandError> {
    let loaded = trainer::load_checkpoint(checkpoint, Some(&expected.hash()))?;
    let bad = |what: &str| CommandError::Runtime(format!("checkpoint metadata lacks a valid {what:?}"));
    let train_seed = loaded.metadata.get("seed").and_then(Value::as_u64).ok_or_else(|| bad("seed"))?;
    let data: DataConfig = loaded
        .metadata
        .get("data")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| bad("data"))?;
    let world = SyntheticWorld::new(&data, loaded.model.config(), train_seed)?;
    Ok(TrainedToy {
        provider: provider_for(train_seed, loaded.model.config()),
        model: loaded.model,
        world,
        train_seed,
    })
}

impl TrainedToy {
    /// Sampling request for `key` with fresh noise and references from `rng`.
    pub fn request<R: rand::Rng + ?Sized>(
        &self,
        key: ReferenceKey,
        text_id: usize,
        conditioned: bool,
        rng: &mut R,
    ) -> SampleRequest {
        let d = &self.world.data;
        let cfg = self.model.config();
        let video_noise = Tensor::randn(&[d.video_seq, cfg.video_dim], 1.0, rng);
        let audio_noise = Tensor::randn(&[d.audio_seq, cfg.audio_dim], 1.0, rng);
        let (ri, ra) = self.world.references(key, rng);
        SampleRequest {
            video_noise,
            audio_noise,
            text_id,
            ref_image: conditioned.then_some(ri),
            ref_audio: conditioned.then_some(ra),
            embeddings: conditioned.then(|| self.provider.embed_key(key)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub output: PathBuf,
    pub identity_cluster: usize,
    pub timbre_cluster: usize,
}

/// Samples one video/audio pair from a checkpoint and writes a latents container.
pub fn run_sample(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<SampleSummary, CommandError> {
    cfg.validate()?;
    let toy = load_toy(checkpoint, &cfg.model)?;
    let s = &cfg.sample;
    if s.identity >= toy.world.data.n_identities || s.timbre >= toy.world.data.n_timbres {
        return Err(CommandError::Usage("sample.identity/timbre out of range for checkpoint data".into()));
    }
    let key = ReferenceKey {
        identity: s.identity,
        timbre: s.timbre,
    };
    let mut rng = seed::stream(cfg.seed, "sample");
    let req = toy.request(key, s.text_id, !s.unconditional, &mut rng);
    let (video, audio) = sampling::sample(&toy.model, &req, &s.schedule()?, &s.guidance()?)?;

    let mut c = Container::new(LATENTS_KIND, json!(toy.model.config()));
    c.metadata.insert("seed".into(), json!(cfg.seed));
    c.metadata.insert("sample".into(), json!(s));
    c.metadata.insert("checkpoint_config_hash".into(), json!(cfg.model.hash()));
    let identity_cluster = nearest_centroid(&video, &toy.world.identity_means)?;
    let timbre_cluster = nearest_centroid(&audio, &toy.world.timbre_means)?;
    c.metadata.insert("nearest_identity".into(), json!(identity_cluster));
    c.metadata.insert("nearest_timbre".into(), json!(timbre_cluster));
    c.push("video", video);
    c.push("audio", audio);
    if let (Some(ri), Some(ra)) = (req.ref_image, req.ref_audio) {
        c.push("ref_image", ri);
        c.push("ref_audio", ra);
    }
    let path = out_file(out, SAMPLES_FILE)?;
    c.save(&path)?;
    Ok(SampleSummary {
        output: path,
        identity_cluster,
        timbre_cluster,
    })
}

/// Index of the centroid closest to the token mean of `latents`.
pub fn nearest_centroid(latents: &Tensor, centroids: &[Vec<f64>]) -> Result<usize, CommandError> {
    let m = latents.row_mean()?;
    let dist = |c: &Vec<f64>| m.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    centroids
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
        .map(|(i, _)| i)
        .ok_or_else(|| CommandError::Runtime("no centroids".into()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Worst element of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
    pub parameters_checked: usize,
    pub tolerance: f64,
    pub fault_injected: bool,
}

/// Scalar objective without building gradients.
fn objective_value(model: &TwinBackbone, sample: &TrainingSample, weights: &LossWeights) -> Result<f64, CommandError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, crate::fusion::Binding::Frozen);
    let (_, b) = objectives::compute_objective(
        &mut tape,
        model,
        &bound,
        &sample.inputs,
        &sample.targets,
        weights,
        None,
        NegativeSource::Live,
    )?;
    Ok(b.total)
}

/// Checks every trainable element's analytic gradient against a central
/// difference of the full weighted objective.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport, CommandError> {
    let g = &cfg.gradcheck;
    g.model.validate().map_err(|e| CommandError::Usage(format!("gradcheck.model: {e}")))?;
    if !(g.step > 0.0 && g.tolerance > 0.0 && g.floor > 0.0) {
        return Err(CommandError::Usage("gradcheck step, tolerance and floor must be positive".into()));
    }
    let mut model = TwinBackbone::init(g.model.clone(), cfg.seed)?;
    let mut rng = seed::stream(cfg.seed, "gradcheck");
    for p in model.params_mut().params_mut().filter(|p| p.trainable) {
        p.value = Tensor::randn(p.value.shape(), g.perturb_std, &mut rng);
    }
    let mut inputs = random_inputs(&g.model, g.video_seq, g.audio_seq, g.ref_seq, &mut rng);
    let targets = FlowTargets {
        video_z0: Tensor::randn(inputs.video.shape(), 1.0, &mut rng),
        video_z1: Tensor::randn(inputs.video.shape(), 1.0, &mut rng),
        audio_z0: Tensor::randn(inputs.audio.shape(), 1.0, &mut rng),
        audio_z1: Tensor::randn(inputs.audio.shape(), 1.0, &mut rng),
    };
    inputs.video = flowmatch::corrupt(&targets.video_z0, &targets.video_z1, inputs.t)?;
    inputs.audio = flowmatch::corrupt(&targets.audio_z0, &targets.audio_z1, inputs.t)?;
    let sample = TrainingSample { inputs, targets };

    let (_, mut grads) = trainer::loss_and_grads(&model, &sample, &g.weights, None, NegativeSource::Live)?;
    if g.inject_fault {
        for (name, grad) in grads.iter_mut() {
            if name.contains(".lora_") {
                *grad = grad.scale(-1.0);
            }
        }
    }

    let mut report = GradcheckReport {
        passed: true,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
        parameters_checked: grads.len(),
        tolerance: g.tolerance,
        fault_injected: g.inject_fault,
    };
    for (name, grad) in &grads {
        for (i, &a) in grad.data().iter().enumerate() {
            let orig = model.params().get(name).expect("trainable").value.data()[i];
            let mut eval_at = |x: f64| -> Result<f64, CommandError> {
                model.params_mut().value_mut(name).expect("trainable").data_mut()[i] = x;
                objective_value(&model, &sample, &g.weights)
            };
            let plus = eval_at(orig + g.step)?;
            let minus = eval_at(orig - g.step)?;
            model.params_mut().value_mut(name).expect("trainable").data_mut()[i] = orig;
            let n = (plus - minus) / (2.0 * g.step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(g.floor);
            report.elements_checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report.passed = report.max_rel_err < g.tolerance;
    Ok(report)
}

/// Filters JSON Lines manifest text.
pub fn run_filter(text: &str, th: &FilterThresholds) -> FilterReport {
    datapipe::filter_manifest(datapipe::parse_manifest(text), th)
}

/// Tab-separated `clip_id`, `reason` rows for rejected records.
pub fn rejection_report(report: &FilterReport) -> String {
    let mut out = String::from("clip_id\treason\n");
    for r in report.rejected() {
        out.push_str(&format!("{}\t{}\n", r.clip_id, r.reason));
    }
    out
}

/// Conditioning strength measured on a trained toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationReport {
    /// Mean of the video and audio separations.
    pub velocity_separation: f64,
    pub velocity_separation_video: f64,
    pub velocity_separation_audio: f64,
    pub identity_accuracy: f64,
    pub timbre_accuracy: f64,
    pub identity_accuracy_without_references: f64,
    pub timbre_accuracy_without_references: f64,
    pub identity_cosine: f64,
    pub timbre_cosine: f64,
    pub samples: usize,
    pub heldout_batches: usize,
    pub sample_steps: usize,
}

pub fn run_eval_separation(cfg: &RunConfig, checkpoint: &Path) -> Result<SeparationReport, CommandError> {
    cfg.validate()?;
    let toy = load_toy(checkpoint, &cfg.model)?;
    evaluate_separation(&toy, &cfg.eval, &cfg.sample, cfg.seed)
}

/// Held-out velocity separation plus nearest-centroid accuracy of guided
/// samples with and without references.
///
/// Each noise draw is reused for every identity, so an unconditioned
/// model scores exactly chance on accuracy.
pub fn evaluate_separation(
    toy: &TrainedToy,
    eval: &EvalSection,
    sample: &SampleSection,
    seed_value: u64,
) -> Result<SeparationReport, CommandError> {
    let mut rng = seed::stream(seed_value, "eval-heldout");
    let (mut sep_v, mut sep_a) = (0.0, 0.0);
    for _ in 0..eval.heldout_batches {
        let s = toy.world.draw(&mut rng).to_sample(&toy.provider)?;
        let (cv, ca) = toy.model.predict(&s.inputs, false)?;
        let neg = objectives::build_negative_pass(&s.inputs);
        let (uv, ua) = toy.model.predict(&neg.inputs, neg.mask_refs)?;
        sep_v += cv.sub(&uv)?.norm_sq() / cv.numel() as f64;
        sep_a += ca.sub(&ua)?.norm_sq() / ca.numel() as f64;
    }
    let nb = eval.heldout_batches.max(1) as f64;
    let (sep_v, sep_a) = (sep_v / nb, sep_a / nb);

    let schedule = SamplerSchedule::uniform(eval.sample_steps)?;
    let guidance = sample.guidance()?;
    let d = &toy.world.data;
    let mut hits = [0usize; 4];
    let (mut cos_id, mut cos_tb) = (0.0, 0.0);
    let mut count = 0usize;
    for k in 0..eval.pairs {
        let noise_rng = seed::stream(seed_value, &format!("eval-pair-{k}"));
        for identity in 0..d.n_identities {
            let key = ReferenceKey {
                identity,
                timbre: (identity + k) % d.n_timbres,
            };
            let mut r = noise_rng.clone();
            let cond = toy.request(key, 0, true, &mut r);
            let uncond = SampleRequest {
                ref_image: None,
                ref_audio: None,
                embeddings: None,
                ..cond.clone()
            };
            let (v, a) = sampling::sample(&toy.model, &cond, &schedule, &guidance)?;
            let (v0, a0) = sampling::sample(&toy.model, &uncond, &schedule, &guidance)?;
            hits[0] += (nearest_centroid(&v, &toy.world.identity_means)? == key.identity) as usize;
            hits[1] += (nearest_centroid(&a, &toy.world.timbre_means)? == key.timbre) as usize;
            hits[2] += (nearest_centroid(&v0, &toy.world.identity_means)? == key.identity) as usize;
            hits[3] += (nearest_centroid(&a0, &toy.world.timbre_means)? == key.timbre) as usize;
            cos_id += cosine(&v.row_mean()?, &toy.world.identity_means[key.identity]);
            cos_tb += cosine(&a.row_mean()?, &toy.world.timbre_means[key.timbre]);
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok(SeparationReport {
        velocity_separation: 0.5 * (sep_v + sep_a),
        velocity_separation_video: sep_v,
        velocity_separation_audio: sep_a,
        identity_accuracy: hits[0] as f64 / n,
        timbre_accuracy: hits[1] as f64 / n,
        identity_accuracy_without_references: hits[2] as f64 / n,
        timbre_accuracy_without_references: hits[3] as f64 / n,
        identity_cosine: cos_id / n,
        timbre_cosine: cos_tb / n,
        samples: count,
        heldout_batches: eval.heldout_batches,
        sample_steps: eval.sample_steps,
    })
}
