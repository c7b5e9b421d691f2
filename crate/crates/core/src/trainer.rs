//! AdamW over the trainable partition, the two-pass training step,
//! synthetic paired latent data and checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::flowmatch::{self, FlowError};
use crate::fusion::{Binding, ModelConfig, ModelError, ModelInputs, ParamStore, TwinBackbone};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::objectives::{self, FlowTargets, LossBreakdown, LossWeights, NegativeSource, ObjectiveError};
use crate::reflora::{ReferenceKey, SyntheticEmbeddingProvider};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("gradient for {name:?} has shape {got:?}, parameter has {expected:?}")]
    GradShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("gradient supplied for frozen or unknown parameter {0:?}")]
    NotTrainable(String),
    #[error("invalid data config: {0}")]
    DataConfig(String),
    #[error("checkpoint does not match this model: {0}")]
    Layout(String),
}

/// AdamW hyperparameters, defaults from the reference training setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// First/second moments of every trainable parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

/// One in-place AdamW update with bias correction at step `step` (1-based).
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, c: &AdamWConfig) {
    let bc1 = 1.0 - c.beta1.powi(step as i32);
    let bc2 = 1.0 - c.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= c.lr * c.weight_decay * param[i];
        param[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<(), TrainError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .filter(|p| p.trainable)
                .ok_or_else(|| TrainError::NotTrainable(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(TrainError::GradShape {
                    name: name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        for (name, g) in grads {
            let value = params.value_mut(name).expect("checked above");
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            adamw_update(
                value.data_mut(),
                g.data(),
                mo.m.data_mut(),
                mo.v.data_mut(),
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}

/// Cluster structure of the synthetic paired dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_identities: usize,
    pub n_timbres: usize,
    pub video_seq: usize,
    pub audio_seq: usize,
    pub ref_seq: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_identities: 2,
            n_timbres: 2,
            video_seq: 16,
            audio_seq: 16,
            ref_seq: 4,
            sigma_between: 1.0,
            sigma_within: 0.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::DataConfig(m));
        if self.n_identities == 0 || self.n_timbres == 0 {
            return bad("need at least one identity and one timbre".into());
        }
        if self.video_seq == 0 || self.audio_seq == 0 || self.ref_seq == 0 {
            return bad("sequence lengths must be positive".into());
        }
        let longest = self.video_seq.max(self.audio_seq) + self.ref_seq;
        if longest > model.max_positions {
            return bad(format!(
                "sequence plus references ({longest}) exceeds max_positions ({})",
                model.max_positions
            ));
        }
        for (name, s) in [("sigma_between", self.sigma_between), ("sigma_within", self.sigma_within)] {
            if !s.is_finite() || s < 0.0 {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Planted cluster means: one per identity (video) and one per timbre (audio).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub data: DataConfig,
    pub identity_means: Vec<Vec<f64>>,
    pub timbre_means: Vec<Vec<f64>>,
    pub text_vocab: usize,
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    Tensor::randn(&[n], std, rng).into_data()
}

fn cluster_tokens<R: Rng + ?Sized>(mean: &[f64], rows: usize, std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(&[rows, mean.len()], std, rng);
    for row in t.data_mut().chunks_mut(mean.len()) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v += m;
        }
    }
    t
}

impl SyntheticWorld {
    pub fn new(data: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        data.validate(model)?;
        let mut rng = seed::stream(seed, "synthetic-world");
        let identity_means = (0..data.n_identities)
            .map(|_| gaussian_vec(model.video_dim, data.sigma_between, &mut rng))
            .collect();
        let timbre_means = (0..data.n_timbres)
            .map(|_| gaussian_vec(model.audio_dim, data.sigma_between, &mut rng))
            .collect();
        Ok(Self {
            data: data.clone(),
            identity_means,
            timbre_means,
            text_vocab: model.text_vocab,
        })
    }

    /// Reference image and audio tokens for `key`, fresh samples of its clusters.
    pub fn references<R: Rng + ?Sized>(&self, key: ReferenceKey, rng: &mut R) -> (Tensor, Tensor) {
        let d = &self.data;
        (
            cluster_tokens(&self.identity_means[key.identity], d.ref_seq, d.sigma_within, rng),
            cluster_tokens(&self.timbre_means[key.timbre], d.ref_seq, d.sigma_within, rng),
        )
    }

    pub fn draw_for<R: Rng + ?Sized>(&self, key: ReferenceKey, rng: &mut R) -> SyntheticBatch {
        let d = &self.data;
        let z0_video = cluster_tokens(&self.identity_means[key.identity], d.video_seq, d.sigma_within, rng);
        let z0_audio = cluster_tokens(&self.timbre_means[key.timbre], d.audio_seq, d.sigma_within, rng);
        let (ref_image, ref_audio) = self.references(key, rng);
        let text_id = rng.random_range(0..self.text_vocab);
        let z1_video = Tensor::randn(z0_video.shape(), 1.0, rng);
        let z1_audio = Tensor::randn(z0_audio.shape(), 1.0, rng);
        let t = flowmatch::sample_t(rng);
        SyntheticBatch {
            z0_video,
            z0_audio,
            ref_image,
            ref_audio,
            key,
            text_id,
            z1_video,
            z1_audio,
            t,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SyntheticBatch {
        let key = ReferenceKey {
            identity: rng.random_range(0..self.data.n_identities),
            timbre: rng.random_range(0..self.data.n_timbres),
        };
        self.draw_for(key, rng)
    }
}

/// One paired training clip with its reference clip and flow draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub z0_video: Tensor,
    pub z0_audio: Tensor,
    pub ref_image: Tensor,
    pub ref_audio: Tensor,
    pub key: ReferenceKey,
    pub text_id: usize,
    pub z1_video: Tensor,
    pub z1_audio: Tensor,
    pub t: f64,
}

/// Model inputs at `(z_t, t)` plus the flow targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub inputs: ModelInputs,
    pub targets: FlowTargets,
}

impl SyntheticBatch {
    pub fn to_sample(&self, provider: &SyntheticEmbeddingProvider) -> Result<TrainingSample, TrainError> {
        Ok(TrainingSample {
            inputs: ModelInputs {
                video: flowmatch::corrupt(&self.z0_video, &self.z1_video, self.t)?,
                audio: flowmatch::corrupt(&self.z0_audio, &self.z1_audio, self.t)?,
                text_id: self.text_id,
                ref_image: Some(self.ref_image.clone()),
                ref_audio: Some(self.ref_audio.clone()),
                embeddings: Some(provider.embed_key(self.key)),
                t: self.t,
            },
            targets: FlowTargets {
                video_z0: self.z0_video.clone(),
                video_z1: self.z1_video.clone(),
                audio_z0: self.z0_audio.clone(),
                audio_z1: self.z1_audio.clone(),
            },
        })
    }
}

/// Seed-deterministic stream of synthetic batches.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    world: SyntheticWorld,
    rng: ChaCha8Rng,
}

impl SyntheticStream {
    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }
}

impl Iterator for SyntheticStream {
    type Item = SyntheticBatch;

    fn next(&mut self) -> Option<SyntheticBatch> {
        Some(self.world.draw(&mut self.rng))
    }
}

/// Batches from `world`, ordered by the `stream_tag` stream of `seed`.
pub fn gen_synthetic(world: SyntheticWorld, seed: u64, stream_tag: &str) -> SyntheticStream {
    SyntheticStream {
        world,
        rng: seed::stream(seed, stream_tag),
    }
}

/// Full objective value and gradients of every trainable parameter.
pub fn loss_and_grads(
    model: &TwinBackbone,
    sample: &TrainingSample,
    weights: &LossWeights,
    clamp: Option<f64>,
    negative: NegativeSource<'_>,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>), TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Binding::Train);
    let (total, breakdown) = objectives::compute_objective(
        &mut tape,
        model,
        &bound,
        &sample.inputs,
        &sample.targets,
        weights,
        clamp,
        negative,
    )?;
    let grads = tape.backward(total)?;
    let map = bound
        .trainable()
        .map(|(name, var)| {
            let g = grads.get(var).cloned().expect("trainable params are leaves");
            (name.to_string(), g)
        })
        .collect();
    Ok((breakdown, map))
}

/// Positive pass, negative pass, weighted objective, backward, AdamW.
pub fn train_step(
    model: &mut TwinBackbone,
    sample: &TrainingSample,
    weights: &LossWeights,
    clamp: Option<f64>,
    opt: &mut AdamWState,
) -> Result<LossBreakdown, TrainError> {
    let (breakdown, grads) = loss_and_grads(model, sample, weights, clamp, NegativeSource::Live)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(breakdown)
}

/// Writes model parameters, optimizer moments and `metadata`.
pub fn save_checkpoint(
    path: &Path,
    model: &TwinBackbone,
    opt: &AdamWState,
    metadata: BTreeMap<String, Value>,
) -> Result<(), TrainError> {
    checkpoint_container(model, opt, metadata).save(path)?;
    Ok(())
}

pub fn checkpoint_container(model: &TwinBackbone, opt: &AdamWState, metadata: BTreeMap<String, Value>) -> Container {
    let mut c = Container::new(
        CHECKPOINT_KIND,
        serde_json::to_value(model.config()).expect("config serializes"),
    );
    c.metadata = metadata;
    c.metadata.insert("optimizer".into(), json!(opt.config));
    c.metadata.insert("optimizer_step".into(), json!(opt.step));
    for p in model.params().iter() {
        c.push(format!("param/{}", p.name), p.value.clone());
    }
    for (name, mo) in &opt.moments {
        c.push(format!("adam_m/{name}"), mo.m.clone());
        c.push(format!("adam_v/{name}"), mo.v.clone());
    }
    c
}

/// Loaded checkpoint contents.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: TwinBackbone,
    pub opt: AdamWState,
    pub metadata: BTreeMap<String, Value>,
}

/// Reads a checkpoint; with `expected_hash` the model config hash must match.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<LoadedCheckpoint, TrainError> {
    restore_checkpoint(&Container::load(path)?, expected_hash)
}

pub fn restore_checkpoint(c: &Container, expected_hash: Option<&str>) -> Result<LoadedCheckpoint, TrainError> {
    c.expect_kind(CHECKPOINT_KIND)?;
    if let Some(h) = expected_hash {
        c.expect_config_hash(h)?;
    }
    let config: ModelConfig =
        serde_json::from_value(c.config.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let template = TwinBackbone::init(config.clone(), 0)?;
    let mut params = ParamStore::default();
    for p in template.params().iter() {
        let t = c.tensor(&format!("param/{}", p.name))?;
        if t.shape() != p.value.shape() {
            return Err(TrainError::Layout(format!(
                "{} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        params.insert(p.name.clone(), t.clone());
    }
    let expected_count = template.params().len();
    let found = c.tensors.iter().filter(|(n, _)| n.starts_with("param/")).count();
    if found != expected_count {
        return Err(TrainError::Layout(format!("{found} parameters, expected {expected_count}")));
    }
    let model = TwinBackbone::from_params(config, params)?;

    let meta_err = |what: &str| CheckpointError::Header(format!("missing or invalid metadata {what:?}"));
    let opt_config: AdamWConfig = c
        .metadata
        .get("optimizer")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| meta_err("optimizer"))?;
    let step = c
        .metadata
        .get("optimizer_step")
        .and_then(Value::as_u64)
        .ok_or_else(|| meta_err("optimizer_step"))?;
    let mut moments = BTreeMap::new();
    for (name, m) in &c.tensors {
        if let Some(pname) = name.strip_prefix("adam_m/") {
            let v = c.tensor(&format!("adam_v/{pname}"))?;
            let p = model
                .params()
                .get(pname)
                .filter(|p| p.trainable)
                .ok_or_else(|| TrainError::NotTrainable(pname.to_string()))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(TrainError::Layout(format!("moment shape for {pname}")));
            }
            moments.insert(
                pname.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
    }
    let mut metadata = c.metadata.clone();
    metadata.remove("optimizer");
    metadata.remove("optimizer_step");
    Ok(LoadedCheckpoint {
        model,
        opt: AdamWState {
            config: opt_config,
            step,
            moments,
        },
        metadata,
    })
}
