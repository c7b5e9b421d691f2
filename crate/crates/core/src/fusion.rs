//! Symmetric twin-backbone transformer with parallel video and audio
//! branches.
//!
//! Each fusion block runs, per branch and with pre-norm residuals:
//! joint self-attention with reference tokens plus the global condition
//! token, text cross-attention, paired audio/video cross-attention and a
//! time-modulated MLP. Reference tokens share the self-attention and MLP
//! sublayers (modulated at time 0) and bypass both cross-attentions.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{self, AttentionError, ProjectionVars, RotaryTable, DEFAULT_ROPE_BASE};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::reflora::{
    self, GlobalEmbeddings, JointPositions, LoraVars, RefLoraError, RefLoraVars, ReferenceTokens,
    FACE_DIM, LORA_INIT_STD, TIMBRE_DIM,
};
use crate::{checkpoint, seed};

const TIME_FREQUENCY_SCALE: f64 = 1000.0;
const MODULATION_STD: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    RefLora(#[from] RefLoraError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    InputShape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("text id {id} outside vocabulary of {vocab}")]
    TextId { id: usize, vocab: usize },
    #[error("time {0} outside [0, 1]")]
    Time(f64),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub text_seq: usize,
    pub text_vocab: usize,
    pub face_dim: usize,
    pub timbre_dim: usize,
    pub lora_rank: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            video_dim: 8,
            audio_dim: 8,
            text_seq: 4,
            text_vocab: 4,
            face_dim: FACE_DIM,
            timbre_dim: TIMBRE_DIM,
            lora_rank: 4,
            mlp_ratio: 4,
            rope_base: DEFAULT_ROPE_BASE,
            max_positions: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return bad("width must be positive and even");
        }
        if self.video_dim == 0 || self.audio_dim == 0 {
            return bad("latent dims must be positive");
        }
        if self.text_seq == 0 || self.text_vocab == 0 {
            return bad("text_seq and text_vocab must be positive");
        }
        if self.face_dim == 0 || self.timbre_dim == 0 {
            return bad("condition dims must be positive");
        }
        if self.lora_rank == 0 || self.lora_rank > self.width {
            return bad("lora_rank must be in 1..=width");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad("rope_base must exceed 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON encoding.
    pub fn hash(&self) -> String {
        checkpoint::config_hash(&serde_json::to_value(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Video,
    Audio,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Video, Branch::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Video => "video",
            Branch::Audio => "audio",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Video => Branch::Audio,
            Branch::Audio => Branch::Video,
        }
    }

    fn slot(self) -> usize {
        match self {
            Branch::Video => 0,
            Branch::Audio => 1,
        }
    }
}

/// Whether a parameter belongs to the trainable partition: the reference
/// LoRA adapters of unimodal self-attention and the global projections.
pub fn is_trainable_name(name: &str) -> bool {
    name.contains(".self_attn.lora_") || name.ends_with(".global_proj")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, value: Tensor) {
        let trainable = is_trainable_name(&name);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names and bit patterns of every frozen parameter.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundParams<'m> {
    store: &'m ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// `(name, var)` of every grad-requiring parameter.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.store
            .params
            .iter()
            .zip(&self.vars)
            .filter(|(p, _)| p.trainable)
            .map(|(p, v)| (p.name.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Trainable parameters become gradient leaves.
    Train,
    /// Every parameter is a constant.
    Frozen,
}

/// One forward's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub video: Tensor,
    pub audio: Tensor,
    pub text_id: usize,
    pub ref_image: Option<Tensor>,
    pub ref_audio: Option<Tensor>,
    /// `None` skips the global condition token entirely.
    pub embeddings: Option<GlobalEmbeddings>,
    pub t: f64,
}

impl ModelInputs {
    /// The same latents with every reference condition removed.
    pub fn without_references(&self) -> Self {
        Self {
            ref_image: None,
            ref_audio: None,
            embeddings: None,
            ..self.clone()
        }
    }

    pub fn latents(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Video => &self.video,
            Branch::Audio => &self.audio,
        }
    }

    pub fn reference(&self, branch: Branch) -> Option<&Tensor> {
        match branch {
            Branch::Video => self.ref_image.as_ref(),
            Branch::Audio => self.ref_audio.as_ref(),
        }
    }

    pub fn condition(&self, branch: Branch) -> Option<&[f64]> {
        self.embeddings.as_ref().map(|e| match branch {
            Branch::Video => e.face.as_slice(),
            Branch::Audio => e.timbre.as_slice(),
        })
    }
}

/// Hidden states of both branches entering or leaving a block.
#[derive(Debug, Clone, Copy)]
pub struct Streams {
    pub x: [Var; 2],
    pub refs: [Option<Var>; 2],
}

impl Streams {
    pub fn latent(&self, b: Branch) -> Var {
        self.x[b.slot()]
    }

    pub fn reference(&self, b: Branch) -> Option<Var> {
        self.refs[b.slot()]
    }
}

/// Per-forward conditioning shared by every block.
#[derive(Debug, Clone)]
pub struct BlockContext {
    pub text: Var,
    pub time_t: Var,
    pub time_ref: Var,
    pub conditions: [Option<Var>; 2],
    pub positions: [Vec<usize>; 2],
    pub ref_positions: [Vec<usize>; 2],
}

/// The twin backbone: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinBackbone {
    config: ModelConfig,
    params: ParamStore,
    rope: RotaryTable,
}

fn block_name(i: usize, b: Branch, rest: &str) -> String {
    format!("blocks.{i}.{}.{rest}", b.name())
}

impl TwinBackbone {
    /// Random frozen base with zero-delta LoRA and zero global projections.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::stream(seed, "model-init");
        let d = config.width;
        let hd = d * config.mlp_ratio;
        let sd = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::default();

        p.insert("time.mlp_in".into(), Tensor::randn(&[d, d], sd, &mut rng));
        p.insert("time.mlp_out".into(), Tensor::randn(&[d, d], sd, &mut rng));
        p.insert(
            "text.table".into(),
            Tensor::randn(&[config.text_vocab * config.text_seq, d], 1.0, &mut rng),
        );
        for b in Branch::BOTH {
            let dim = config.latent_dim(b);
            p.insert(
                format!("{}.token_in", b.name()),
                Tensor::randn(&[dim, d], 1.0 / (dim as f64).sqrt(), &mut rng),
            );
            p.insert(
                format!("{}.token_out", b.name()),
                Tensor::randn(&[d, dim], sd, &mut rng),
            );
        }
        for i in 0..config.depth {
            for b in Branch::BOTH {
                p.insert(
                    block_name(i, b, "modulation"),
                    Tensor::randn(&[d, 4 * d], MODULATION_STD * sd, &mut rng),
                );
                for sub in ["self_attn", "text_attn", "paired_attn"] {
                    for m in ["q", "k", "v", "o"] {
                        p.insert(
                            block_name(i, b, &format!("{sub}.{m}")),
                            Tensor::randn(&[d, d], sd, &mut rng),
                        );
                    }
                }
                for m in ["q", "k", "v", "o"] {
                    p.insert(
                        block_name(i, b, &format!("self_attn.lora_{m}.down")),
                        Tensor::randn(&[d, config.lora_rank], LORA_INIT_STD, &mut rng),
                    );
                    p.insert(
                        block_name(i, b, &format!("self_attn.lora_{m}.up")),
                        Tensor::zeros(&[config.lora_rank, d]),
                    );
                }
                p.insert(
                    block_name(i, b, "global_proj"),
                    Tensor::zeros(&[config.condition_dim(b), d]),
                );
                p.insert(
                    block_name(i, b, "mlp.fc1"),
                    Tensor::randn(&[d, hd], sd, &mut rng),
                );
                p.insert(
                    block_name(i, b, "mlp.fc2"),
                    Tensor::randn(&[hd, d], 1.0 / (hd as f64).sqrt(), &mut rng),
                );
            }
        }
        Self::from_params(config, p)
    }

    /// Rebuilds a model from explicit parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let rope = RotaryTable::new(config.width, config.rope_base, config.max_positions)?;
        Ok(Self {
            config,
            params,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn rope(&self) -> &RotaryTable {
        &self.rope
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape, binding: Binding) -> BoundParams<'m> {
        let vars = self
            .params
            .iter()
            .map(|p| match (binding, p.trainable) {
                (Binding::Train, true) => tape.leaf(p.value.clone()),
                _ => tape.constant(p.value.clone()),
            })
            .collect();
        BoundParams {
            store: &self.params,
            vars,
        }
    }

    /// Sinusoidal features of `t` followed by a two-layer GELU MLP, `(1, d)`.
    pub fn time_embed(&self, tape: &mut Tape, bound: &BoundParams<'_>, t: f64) -> Result<Var, ModelError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ModelError::Time(t));
        }
        let feats = tape.constant(sinusoidal_features(t, self.config.width));
        let h = tape.matmul(feats, bound.var("time.mlp_in")?)?;
        let h = tape.gelu(h);
        Ok(tape.matmul(h, bound.var("time.mlp_out")?)?)
    }

    /// Plain-value time embedding, shape `(d,)`.
    pub fn time_embedding(&self, t: f64) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Binding::Frozen);
        let e = self.time_embed(&mut tape, &bound, t)?;
        Ok(tape.value(e).clone().reshape(vec![self.config.width])?)
    }

    fn text_tokens(&self, tape: &mut Tape, bound: &BoundParams<'_>, text_id: usize) -> Result<Var, ModelError> {
        if text_id >= self.config.text_vocab {
            return Err(ModelError::TextId {
                id: text_id,
                vocab: self.config.text_vocab,
            });
        }
        let table = bound.var("text.table")?;
        let n = self.config.text_seq;
        Ok(tape.slice(table, 0, text_id * n, n)?)
    }

    fn check_latent(&self, what: &str, t: &Tensor, dim: usize) -> Result<(), ModelError> {
        match t.shape() {
            [_, c] if *c == dim => Ok(()),
            got => Err(ModelError::InputShape {
                what: what.to_string(),
                expected: vec![t.rows(), dim],
                got: got.to_vec(),
            }),
        }
    }

    /// Embeds the inputs into streams and builds the per-forward context.
    pub fn prepare(
        &self,
        tape: &mut Tape,
        bound: &BoundParams<'_>,
        inputs: &ModelInputs,
    ) -> Result<(Streams, BlockContext), ModelError> {
        let mut x = Vec::with_capacity(2);
        let mut refs = [None, None];
        let mut conditions = [None, None];
        let mut positions: [Vec<usize>; 2] = Default::default();
        let mut ref_positions: [Vec<usize>; 2] = Default::default();
        for b in Branch::BOTH {
            let dim = self.config.latent_dim(b);
            let lat = inputs.latents(b);
            self.check_latent(b.name(), lat, dim)?;
            let token_in = bound.var(&format!("{}.token_in", b.name()))?;
            let lv = tape.constant(lat.clone());
            x.push(tape.matmul(lv, token_in)?);
            let n = lat.rows();
            positions[b.slot()] = (0..n).collect();
            if let Some(r) = inputs.reference(b).filter(|r| r.rows() > 0) {
                self.check_latent(&format!("{} reference", b.name()), r, dim)?;
                let rv = tape.constant(r.clone());
                refs[b.slot()] = Some(tape.matmul(rv, token_in)?);
                ref_positions[b.slot()] = (n..n + r.rows()).collect();
            }
            if let Some(c) = inputs.condition(b) {
                let expected = self.config.condition_dim(b);
                if c.len() != expected {
                    return Err(ModelError::InputShape {
                        what: format!("{} condition", b.name()),
                        expected: vec![expected],
                        got: vec![c.len()],
                    });
                }
                conditions[b.slot()] = Some(tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?));
            }
        }
        let text = self.text_tokens(tape, bound, inputs.text_id)?;
        let time_t = self.time_embed(tape, bound, inputs.t)?;
        let time_ref = self.time_embed(tape, bound, ReferenceTokens::TIME_STEP)?;
        Ok((
            Streams {
                x: [x[0], x[1]],
                refs,
            },
            BlockContext {
                text,
                time_t,
                time_ref,
                conditions,
                positions,
                ref_positions,
            },
        ))
    }

    fn projection(&self, bound: &BoundParams<'_>, i: usize, b: Branch, sub: &str) -> Result<ProjectionVars, ModelError> {
        let v = |m: &str| bound.var(&block_name(i, b, &format!("{sub}.{m}")));
        Ok(ProjectionVars {
            q: v("q")?,
            k: v("k")?,
            v: v("v")?,
            o: v("o")?,
        })
    }

    fn ref_lora(&self, bound: &BoundParams<'_>, i: usize, b: Branch) -> Result<RefLoraVars, ModelError> {
        let l = |m: &str| -> Result<LoraVars, ModelError> {
            Ok(LoraVars {
                down: bound.var(&block_name(i, b, &format!("self_attn.lora_{m}.down")))?,
                up: bound.var(&block_name(i, b, &format!("self_attn.lora_{m}.up")))?,
                scaling: 1.0,
            })
        };
        Ok(RefLoraVars {
            q: l("q")?,
            k: l("k")?,
            v: l("v")?,
            o: l("o")?,
        })
    }

    /// `[shift_attn, scale_attn, shift_mlp, scale_mlp]`, each `(1, d)`.
    fn modulation(
        &self,
        tape: &mut Tape,
        bound: &BoundParams<'_>,
        i: usize,
        b: Branch,
        temb: Var,
    ) -> Result<[Var; 4], ModelError> {
        let d = self.config.width;
        let act = tape.gelu(temb);
        let m = tape.matmul(act, bound.var(&block_name(i, b, "modulation"))?)?;
        let mut out = [m; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = tape.slice(m, 1, k * d, d)?;
        }
        Ok(out)
    }

    fn modulated_norm(&self, tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var, ModelError> {
        let n = tape.layer_norm(x)?;
        let scaled = tape.mul_row(n, scale)?;
        let kept = tape.add(scaled, n)?;
        Ok(tape.add_row(kept, shift)?)
    }

    fn mlp(&self, tape: &mut Tape, bound: &BoundParams<'_>, i: usize, b: Branch, x: Var) -> Result<Var, ModelError> {
        let h = tape.matmul(x, bound.var(&block_name(i, b, "mlp.fc1"))?)?;
        let h = tape.gelu(h);
        Ok(tape.matmul(h, bound.var(&block_name(i, b, "mlp.fc2"))?)?)
    }

    /// Runs fusion block `i` on both branches.
    pub fn fusion_block_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams<'_>,
        i: usize,
        streams: Streams,
        ctx: &BlockContext,
        mask_refs: bool,
    ) -> Result<Streams, ModelError> {
        let mut x = streams.x;
        let mut refs = streams.refs;
        let mut mods_t = Vec::with_capacity(2);
        let mut mods_ref = Vec::with_capacity(2);
        for b in Branch::BOTH {
            mods_t.push(self.modulation(tape, bound, i, b, ctx.time_t)?);
            mods_ref.push(self.modulation(tape, bound, i, b, ctx.time_ref)?);
        }

        for b in Branch::BOTH {
            let s = b.slot();
            let [shift, scale, _, _] = mods_t[s];
            let h = self.modulated_norm(tape, x[s], shift, scale)?;
            let r = match refs[s] {
                Some(r) => {
                    let [rshift, rscale, _, _] = mods_ref[s];
                    Some(self.modulated_norm(tape, r, rshift, rscale)?)
                }
                None => None,
            };
            let proj = self.projection(bound, i, b, "self_attn")?;
            let lora = self.ref_lora(bound, i, b)?;
            let joint = reflora::joint_self_attention(
                tape,
                h,
                r,
                &proj,
                &lora,
                &self.rope,
                JointPositions {
                    original: &ctx.positions[s],
                    reference: &ctx.ref_positions[s],
                },
                mask_refs,
            )?;
            let mut attn = joint.out;
            if let Some(cond) = ctx.conditions[s] {
                let token = reflora::embed_global_condition(tape, cond, bound.var(&block_name(i, b, "global_proj"))?)?;
                attn = tape.add_row(attn, token)?;
            }
            x[s] = tape.add(x[s], attn)?;
            if let (Some(r), Some(out_ref)) = (refs[s], joint.out_ref) {
                refs[s] = Some(tape.add(r, out_ref)?);
            }
        }

        for b in Branch::BOTH {
            let s = b.slot();
            let n = tape.layer_norm(x[s])?;
            let w = self.projection(bound, i, b, "text_attn")?;
            let c = attention::cross_attend(tape, n, ctx.text, &w)?;
            x[s] = tape.add(x[s], c)?;
        }

        let normed = [tape.layer_norm(x[0])?, tape.layer_norm(x[1])?];
        let mut paired = [x[0]; 2];
        for b in Branch::BOTH {
            let s = b.slot();
            let w = self.projection(bound, i, b, "paired_attn")?;
            paired[s] = attention::cross_attend(tape, normed[s], normed[b.other().slot()], &w)?;
        }
        for s in 0..2 {
            x[s] = tape.add(x[s], paired[s])?;
        }

        for b in Branch::BOTH {
            let s = b.slot();
            let [_, _, shift, scale] = mods_t[s];
            let h = self.modulated_norm(tape, x[s], shift, scale)?;
            let m = self.mlp(tape, bound, i, b, h)?;
            x[s] = tape.add(x[s], m)?;
            if let Some(r) = refs[s] {
                let [_, _, rshift, rscale] = mods_ref[s];
                let h = self.modulated_norm(tape, r, rshift, rscale)?;
                let m = self.mlp(tape, bound, i, b, h)?;
                refs[s] = Some(tape.add(r, m)?);
            }
        }
        Ok(Streams { x, refs })
    }

    /// Velocity predictions `(v_video, v_audio)` shaped like the input latents.
    pub fn model_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams<'_>,
        inputs: &ModelInputs,
        mask_refs: bool,
    ) -> Result<(Var, Var), ModelError> {
        let (mut streams, ctx) = self.prepare(tape, bound, inputs)?;
        for i in 0..self.config.depth {
            streams = self.fusion_block_forward(tape, bound, i, streams, &ctx, mask_refs)?;
        }
        let mut out = [streams.x[0]; 2];
        for b in Branch::BOTH {
            let n = tape.layer_norm(streams.latent(b))?;
            out[b.slot()] = tape.matmul(n, bound.var(&format!("{}.token_out", b.name()))?)?;
        }
        Ok((out[0], out[1]))
    }

    /// Forward with every parameter constant; returns plain values.
    pub fn predict(&self, inputs: &ModelInputs, mask_refs: bool) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Binding::Frozen);
        let (v, a) = self.model_forward(&mut tape, &bound, inputs, mask_refs)?;
        Ok((tape.value(v).clone(), tape.value(a).clone()))
    }
}

impl ModelConfig {
    pub fn latent_dim(&self, b: Branch) -> usize {
        match b {
            Branch::Video => self.video_dim,
            Branch::Audio => self.audio_dim,
        }
    }

    pub fn condition_dim(&self, b: Branch) -> usize {
        match b {
            Branch::Video => self.face_dim,
            Branch::Audio => self.timbre_dim,
        }
    }
}

/// `[cos(1000 t f_j)..., sin(1000 t f_j)...]` with `f_j = 10000^(-j / (d/2))`.
pub fn sinusoidal_features(t: f64, width: usize) -> Tensor {
    let half = width / 2;
    let mut data = vec![0.0; width];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let angle = TIME_FREQUENCY_SCALE * t * freq;
        data[j] = angle.cos();
        data[half + j] = angle.sin();
    }
    Tensor::new(vec![1, width], data).expect("width matches")
}

/// Random inputs of the given sizes; handy for tests and gradient checks.
pub fn random_inputs<R: Rng + ?Sized>(
    config: &ModelConfig,
    seq_video: usize,
    seq_audio: usize,
    seq_ref: usize,
    rng: &mut R,
) -> ModelInputs {
    let face = Tensor::randn(&[config.face_dim], 1.0 / (config.face_dim as f64).sqrt(), rng);
    let timbre = Tensor::randn(&[config.timbre_dim], 1.0 / (config.timbre_dim as f64).sqrt(), rng);
    ModelInputs {
        video: Tensor::randn(&[seq_video, config.video_dim], 1.0, rng),
        audio: Tensor::randn(&[seq_audio, config.audio_dim], 1.0, rng),
        text_id: rng.random_range(0..config.text_vocab),
        ref_image: Some(Tensor::randn(&[seq_ref, config.video_dim], 1.0, rng)),
        ref_audio: Some(Tensor::randn(&[seq_ref, config.audio_dim], 1.0, rng)),
        embeddings: Some(GlobalEmbeddings {
            face: face.into_data(),
            timbre: timbre.into_data(),
        }),
        t: rng.random_range(0.0..=1.0),
    }
}
