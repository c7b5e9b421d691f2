//! Guided Euler sampling of paired video/audio latents.

use thiserror::Error;

use crate::flowmatch::{self, FlowError, GuidanceConfig, SamplerSchedule};
use crate::fusion::{ModelError, ModelInputs, TwinBackbone};
use crate::numerics::Tensor;
use crate::objectives::build_negative_pass;
use crate::reflora::GlobalEmbeddings;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("non-finite latents at t = {0}")]
    NonFinite(f64),
}

/// Starting noise and the conditions held fixed along the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub video_noise: Tensor,
    pub audio_noise: Tensor,
    pub text_id: usize,
    pub ref_image: Option<Tensor>,
    pub ref_audio: Option<Tensor>,
    pub embeddings: Option<GlobalEmbeddings>,
}

impl SampleRequest {
    fn inputs(&self, video: Tensor, audio: Tensor, t: f64) -> ModelInputs {
        ModelInputs {
            video,
            audio,
            text_id: self.text_id,
            ref_image: self.ref_image.clone(),
            ref_audio: self.ref_audio.clone(),
            embeddings: self.embeddings.clone(),
            t,
        }
    }
}

/// Integrates from the request's noise at `t = 1` to `t = 0`.
///
/// Each step evaluates the conditional velocity and, unless both scales
/// are 1, the negative-pass velocity, then combines them per branch.
pub fn sample(
    model: &TwinBackbone,
    req: &SampleRequest,
    schedule: &SamplerSchedule,
    guidance: &GuidanceConfig,
) -> Result<(Tensor, Tensor), SampleError> {
    let unguided = guidance.scale_video == 1.0 && guidance.scale_audio == 1.0;
    let mut video = req.video_noise.clone();
    let mut audio = req.audio_noise.clone();
    for (t_i, t_prev) in schedule.intervals() {
        let inputs = req.inputs(video.clone(), audio.clone(), t_i);
        let (cv, ca) = model.predict(&inputs, false)?;
        let (vv, va) = if unguided {
            (cv, ca)
        } else {
            let neg = build_negative_pass(&inputs);
            let (uv, ua) = model.predict(&neg.inputs, neg.mask_refs)?;
            (
                flowmatch::guided_velocity(&cv, &uv, guidance.scale_video)?,
                flowmatch::guided_velocity(&ca, &ua, guidance.scale_audio)?,
            )
        };
        video = flowmatch::euler_step(&video, &vv, t_i, t_prev)?;
        audio = flowmatch::euler_step(&audio, &va, t_i, t_prev)?;
        if !(video.all_finite() && audio.all_finite()) {
            return Err(SampleError::NonFinite(t_prev));
        }
    }
    Ok((video, audio))
}
