//! Flow-matching and contrastive losses and their weighted total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{Binding, BoundParams, ModelError, ModelInputs, TwinBackbone};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::reflora::GlobalEmbeddings;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss: {0:?}")]
    NonFinite(LossBreakdown),
}

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_video: f64,
    pub lambda_audio: f64,
    pub lambda_identity: f64,
    pub lambda_timbre: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_video: 1.0,
            lambda_audio: 1.0,
            lambda_identity: 0.1,
            lambda_timbre: 0.1,
        }
    }
}

impl LossWeights {
    /// Flow matching only.
    pub fn baseline() -> Self {
        Self {
            lambda_identity: 0.0,
            lambda_timbre: 0.0,
            ..Self::default()
        }
    }

    pub fn contrastive_enabled(&self) -> bool {
        self.lambda_identity != 0.0 || self.lambda_timbre != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm_video: f64,
    pub fm_audio: f64,
    pub cl_identity: f64,
    pub cl_timbre: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.fm_video, self.fm_audio, self.cl_identity, self.cl_timbre, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Tab-separated log line: step, fm_video, fm_audio, cl_identity, cl_timbre, total.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            self.fm_video, self.fm_audio, self.cl_identity, self.cl_timbre, self.total
        )
    }
}

pub const LOG_HEADER: &str = "step\tfm_video\tfm_audio\tcl_identity\tcl_timbre\ttotal";

/// Mean squared error between `v_pred` and `z1 - z0`.
pub fn fm_loss(tape: &mut Tape, v_pred: Var, z0: &Tensor, z1: &Tensor) -> Result<Var, ObjectiveError> {
    let target = tape.constant(z1.sub(z0)?);
    let diff = tape.sub(v_pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `-mean((v_cond - stop_grad(v_uncond))^2)`.
///
/// `v_uncond` is detached here regardless of how the caller produced it.
/// With `clamp = Some(c)` the squared separation is capped at `c`, which
/// stops the gradient once the cap is reached.
pub fn contrastive_loss(
    tape: &mut Tape,
    v_cond: Var,
    v_uncond: Var,
    clamp: Option<f64>,
) -> Result<Var, ObjectiveError> {
    let detached = tape.stop_grad(v_uncond);
    let diff = tape.sub(v_cond, detached)?;
    let sq = tape.mul(diff, diff)?;
    let mut sep = tape.mean(sq);
    if let Some(c) = clamp {
        if tape.value(sep).item()? > c {
            sep = tape.constant(Tensor::scalar(c));
        }
    }
    Ok(tape.scale(sep, -1.0))
}

/// Inputs for one forward together with the reference-masking flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PassInputs {
    pub inputs: ModelInputs,
    pub mask_refs: bool,
}

/// Negative ("without reference") pass: references masked out of
/// attention and face/timbre embeddings zeroed. Latents, text and `t`
/// are untouched.
pub fn build_negative_pass(inputs: &ModelInputs) -> PassInputs {
    let embeddings = inputs
        .embeddings
        .as_ref()
        .map(|e| GlobalEmbeddings::zeros(e.face.len(), e.timbre.len()));
    PassInputs {
        inputs: ModelInputs {
            embeddings,
            ..inputs.clone()
        },
        mask_refs: true,
    }
}

/// Scalar loss terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub fm_video: Var,
    pub fm_audio: Var,
    pub cl_identity: Var,
    pub cl_timbre: Var,
}

/// Weighted sum of the four terms and the matching breakdown.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let parts = [
        (terms.fm_video, weights.lambda_video),
        (terms.fm_audio, weights.lambda_audio),
        (terms.cl_identity, weights.lambda_identity),
        (terms.cl_timbre, weights.lambda_timbre),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let scaled = tape.scale(v, w);
        total = tape.add(total, scaled)?;
    }
    let item = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        fm_video: item(terms.fm_video)?,
        fm_audio: item(terms.fm_audio)?,
        cl_identity: item(terms.cl_identity)?,
        cl_timbre: item(terms.cl_timbre)?,
        total: item(total)?,
    };
    Ok((total, breakdown))
}

/// Clean and noise latents behind one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTargets {
    pub video_z0: Tensor,
    pub video_z1: Tensor,
    pub audio_z0: Tensor,
    pub audio_z1: Tensor,
}

/// Which model produces the negative-pass velocities.
#[derive(Debug, Clone, Copy)]
pub enum NegativeSource<'a> {
    /// The model being trained, on the same tape, detached by stop-grad.
    Live,
    /// A separate frozen copy evaluated off-tape.
    Snapshot(&'a TwinBackbone),
}

/// Positive and negative forwards on shared `(z_t, t)` and the full
/// weighted objective.
#[allow(clippy::too_many_arguments)]
pub fn compute_objective(
    tape: &mut Tape,
    model: &TwinBackbone,
    bound: &BoundParams<'_>,
    positive: &ModelInputs,
    targets: &FlowTargets,
    weights: &LossWeights,
    clamp: Option<f64>,
    negative: NegativeSource<'_>,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let (v_video, v_audio) = model.model_forward(tape, bound, positive, false)?;
    let neg = build_negative_pass(positive);
    let (u_video, u_audio) = match negative {
        NegativeSource::Live => model.model_forward(tape, bound, &neg.inputs, neg.mask_refs)?,
        NegativeSource::Snapshot(frozen) => {
            let mut side = Tape::new();
            let fb = frozen.bind(&mut side, Binding::Frozen);
            let (uv, ua) = frozen.model_forward(&mut side, &fb, &neg.inputs, neg.mask_refs)?;
            (
                tape.constant(side.value(uv).clone()),
                tape.constant(side.value(ua).clone()),
            )
        }
    };
    let terms = LossTerms {
        fm_video: fm_loss(tape, v_video, &targets.video_z0, &targets.video_z1)?,
        fm_audio: fm_loss(tape, v_audio, &targets.audio_z0, &targets.audio_z1)?,
        cl_identity: contrastive_loss(tape, v_video, u_video, clamp)?,
        cl_timbre: contrastive_loss(tape, v_audio, u_audio, clamp)?,
    };
    let (total, breakdown) = total_loss(tape, &terms, weights)?;
    if !breakdown.is_finite() {
        return Err(ObjectiveError::NonFinite(breakdown));
    }
    Ok((total, breakdown))
}
