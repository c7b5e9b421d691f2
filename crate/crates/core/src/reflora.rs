//! Reference-token LoRA projections, one-directional joint attention and
//! global face/timbre condition tokens.
//!
//! LoRA factors are stored in the row convention used by the rest of the
//! crate: for an adapter with column-convention factors `A` (`n x d`) and
//! `B` (`d x n`), `down = A^T` (`d x n`) and `up = B^T` (`n x d`), so that
//! `X (W + (B A)^T) = X W + (X down) up`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{self, AttentionError, AttentionMask, ProjectionVars, RotaryTable};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::seed;

pub const FACE_DIM: usize = 512;
pub const TIMBRE_DIM: usize = 256;
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefLoraError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("adapter {what} is {got:?}, expected {expected:?}")]
    AdapterShape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("adapter ranks differ: {0:?}")]
    RankMismatch([usize; 3]),
    #[error("condition vector has {got} entries, projection expects {expected}")]
    ConditionDim { expected: usize, got: usize },
    #[error("malformed reference record id {0:?} (expected i<identity>-t<timbre>)")]
    RecordId(String),
}

/// Low-rank delta for one frozen `d x d` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    /// Gaussian `down` (std 0.02) and zero `up`: the delta starts at zero.
    pub fn init<R: Rng + ?Sized>(d: usize, rank: usize, rng: &mut R) -> Self {
        Self {
            down: Tensor::randn(&[d, rank], LORA_INIT_STD, rng),
            up: Tensor::zeros(&[rank, d]),
            scaling: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.up.rows()
    }

    pub fn param_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    /// Dense `d x d` delta `down * up * scaling`.
    pub fn delta(&self) -> Result<Tensor, NumericsError> {
        Ok(self.down.matmul(&self.up)?.scale(self.scaling))
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            down: tape.constant(self.down.clone()),
            up: tape.constant(self.up.clone()),
            scaling: self.scaling,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub down: Var,
    pub up: Var,
    pub scaling: f64,
}

/// Adapters on the Q, K, V and output projections of one self-attention.
#[derive(Debug, Clone, Copy)]
pub struct RefLoraVars {
    pub q: LoraVars,
    pub k: LoraVars,
    pub v: LoraVars,
    pub o: LoraVars,
}

fn check_adapter(tape: &Tape, lora: &LoraVars, d: usize) -> Result<usize, RefLoraError> {
    let down = tape.value(lora.down).shape().to_vec();
    let rank = down.get(1).copied().unwrap_or(0);
    if down != [d, rank] {
        return Err(RefLoraError::AdapterShape {
            what: "down",
            expected: vec![d, rank],
            got: down,
        });
    }
    let up = tape.value(lora.up).shape().to_vec();
    if up != [rank, d] {
        return Err(RefLoraError::AdapterShape {
            what: "up",
            expected: vec![rank, d],
            got: up,
        });
    }
    Ok(rank)
}

/// `X W + scaling (X down) up`.
pub fn lora_linear(tape: &mut Tape, x: Var, w: Var, lora: &LoraVars) -> Result<Var, RefLoraError> {
    let base = tape.matmul(x, w)?;
    let low = tape.matmul(x, lora.down)?;
    let mut delta = tape.matmul(low, lora.up)?;
    if lora.scaling != 1.0 {
        delta = tape.scale(delta, lora.scaling);
    }
    Ok(tape.add(base, delta)?)
}

/// LoRA-augmented `(Q^r, K^r, V^r)` for reference tokens.
pub fn lora_project(
    tape: &mut Tape,
    x_r: Var,
    w: &ProjectionVars,
    lora: &RefLoraVars,
) -> Result<(Var, Var, Var), RefLoraError> {
    let d = tape.value(w.q).rows();
    let got = tape.value(x_r).last_dim();
    if got != d {
        return Err(AttentionError::Width {
            what: "reference tokens",
            expected: d,
            got,
        }
        .into());
    }
    let ranks = [
        check_adapter(tape, &lora.q, d)?,
        check_adapter(tape, &lora.k, d)?,
        check_adapter(tape, &lora.v, d)?,
    ];
    if ranks[0] != ranks[1] || ranks[1] != ranks[2] {
        return Err(RefLoraError::RankMismatch(ranks));
    }
    let q = lora_linear(tape, x_r, w.q, &lora.q)?;
    let k = lora_linear(tape, x_r, w.k, &lora.k)?;
    let v = lora_linear(tape, x_r, w.v, &lora.v)?;
    Ok((q, k, v))
}

/// Outputs of [`joint_self_attention`], both after their output projection.
#[derive(Debug, Clone, Copy)]
pub struct JointAttentionOutput {
    pub out: Var,
    pub out_ref: Option<Var>,
}

/// Positions for the original tokens and the reference tokens.
#[derive(Debug, Clone, Copy)]
pub struct JointPositions<'a> {
    pub original: &'a [usize],
    pub reference: &'a [usize],
}

/// Joint self-attention over original tokens `x` and reference tokens `x_r`.
///
/// Reference tokens attend only among themselves through the LoRA
/// projections; original tokens attend over the concatenation of both
/// key/value sets. With `mask_refs` the reference columns are blocked for
/// the original queries. The original output uses the frozen `W_O`, the
/// reference output uses `W_O` plus the output adapter.
#[allow(clippy::too_many_arguments)]
pub fn joint_self_attention(
    tape: &mut Tape,
    x: Var,
    x_r: Option<Var>,
    w: &ProjectionVars,
    lora: &RefLoraVars,
    rope: &RotaryTable,
    positions: JointPositions<'_>,
    mask_refs: bool,
) -> Result<JointAttentionOutput, RefLoraError> {
    let (q, k, v) = attention::qkv_project(tape, x, w)?;
    let q = attention::rope_apply(tape, q, positions.original, rope)?;
    let k = attention::rope_apply(tape, k, positions.original, rope)?;

    let x_r = x_r.filter(|r| tape.value(*r).rows() > 0);
    let Some(x_r) = x_r else {
        let z = attention::attend(tape, q, k, v, None)?;
        let out = tape.matmul(z, w.o)?;
        return Ok(JointAttentionOutput { out, out_ref: None });
    };

    let (qr, kr, vr) = lora_project(tape, x_r, w, lora)?;
    let qr = attention::rope_apply(tape, qr, positions.reference, rope)?;
    let kr = attention::rope_apply(tape, kr, positions.reference, rope)?;
    let zr = attention::attend(tape, qr, kr, vr, None)?;
    check_adapter(tape, &lora.o, tape.value(w.o).rows())?;
    let out_ref = lora_linear(tape, zr, w.o, &lora.o)?;

    let n = tape.value(x).rows();
    let nr = tape.value(x_r).rows();
    let keys = tape.concat(&[k, kr], 0)?;
    let values = tape.concat(&[v, vr], 0)?;
    let mask = if mask_refs {
        Some(AttentionMask::leading(n, n + nr, n)?)
    } else {
        None
    };
    let z = attention::attend(tape, q, keys, values, mask.as_ref())?;
    let out = tape.matmul(z, w.o)?;
    Ok(JointAttentionOutput {
        out,
        out_ref: Some(out_ref),
    })
}

/// Projects a condition vector `(1, in_dim)` to a single `(1, d)` token.
pub fn embed_global_condition(tape: &mut Tape, vec: Var, proj: Var) -> Result<Var, RefLoraError> {
    let expected = tape.value(proj).rows();
    let got = tape.value(vec).numel();
    if got != expected {
        return Err(RefLoraError::ConditionDim { expected, got });
    }
    let row = if tape.value(vec).shape() == [1, got] {
        vec
    } else {
        let t = tape.value(vec).clone().reshape(vec![1, got])?;
        // conditions are data, never leaves
        tape.constant(t)
    };
    Ok(tape.matmul(row, proj)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceModality {
    Image,
    Audio,
}

/// Encoded reference latents; always conditioned at time step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTokens {
    pub tokens: Tensor,
    pub modality: ReferenceModality,
}

impl ReferenceTokens {
    pub const TIME_STEP: f64 = 0.0;

    pub fn time_step(&self) -> f64 {
        Self::TIME_STEP
    }
}

/// Identity and timbre of one reference record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReferenceKey {
    pub identity: usize,
    pub timbre: usize,
}

impl fmt::Display for ReferenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}-t{}", self.identity, self.timbre)
    }
}

impl FromStr for ReferenceKey {
    type Err = RefLoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RefLoraError::RecordId(s.to_string());
        let (i, t) = s.split_once('-').ok_or_else(bad)?;
        let identity = i.strip_prefix('i').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let timbre = t.strip_prefix('t').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(Self { identity, timbre })
    }
}

/// Face and timbre embeddings of one reference.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbeddings {
    pub face: Vec<f64>,
    pub timbre: Vec<f64>,
}

impl GlobalEmbeddings {
    pub fn zeros(face_dim: usize, timbre_dim: usize) -> Self {
        Self {
            face: vec![0.0; face_dim],
            timbre: vec![0.0; timbre_dim],
        }
    }
}

/// Source of face/timbre embeddings for a reference record.
pub trait EmbeddingProvider {
    fn embed(&self, record_id: &str) -> Result<GlobalEmbeddings, RefLoraError>;
}

/// Maps each planted identity/timbre id to a fixed unit-norm random vector.
#[derive(Debug, Clone)]
pub struct SyntheticEmbeddingProvider {
    pub seed: u64,
    pub face_dim: usize,
    pub timbre_dim: usize,
}

impl SyntheticEmbeddingProvider {
    pub fn new(seed: u64, face_dim: usize, timbre_dim: usize) -> Self {
        Self {
            seed,
            face_dim,
            timbre_dim,
        }
    }

    fn vector(&self, kind: &str, id: usize, dim: usize) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update((id as u64).to_le_bytes());
        let tag = hex::encode(h.finalize());
        let mut rng = seed::stream(self.seed, &tag);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn embed_key(&self, key: ReferenceKey) -> GlobalEmbeddings {
        GlobalEmbeddings {
            face: self.vector("face", key.identity, self.face_dim),
            timbre: self.vector("timbre", key.timbre, self.timbre_dim),
        }
    }
}

impl EmbeddingProvider for SyntheticEmbeddingProvider {
    fn embed(&self, record_id: &str) -> Result<GlobalEmbeddings, RefLoraError> {
        Ok(self.embed_key(record_id.parse()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{ProjectionWeights, DEFAULT_ROPE_BASE};
    use crate::seed::stream;

    fn lora_set(tape: &mut Tape, d: usize, rank: usize, rng: &mut impl Rng, random_up: bool) -> RefLoraVars {
        let mut mk = |tape: &mut Tape| {
            let mut a = LoraAdapter::init(d, rank, rng);
            if random_up {
                a.up = Tensor::randn(&[rank, d], 0.5, rng);
            }
            a.bind_constant(tape)
        };
        RefLoraVars {
            q: mk(tape),
            k: mk(tape),
            v: mk(tape),
            o: mk(tape),
        }
    }

    #[test]
    fn zero_up_is_plain_projection() {
        let mut rng = stream(0, "lora0");
        let mut tape = Tape::new();
        let w = ProjectionWeights::random(8, &mut rng).bind_constant(&mut tape);
        let lora = lora_set(&mut tape, 8, 2, &mut rng, false);
        let xr = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let (q, k, v) = lora_project(&mut tape, xr, &w, &lora).unwrap();
        let (q0, k0, v0) = attention::qkv_project(&mut tape, xr, &w).unwrap();
        assert!(tape.value(q).bit_eq(tape.value(q0)));
        assert!(tape.value(k).bit_eq(tape.value(k0)));
        assert!(tape.value(v).bit_eq(tape.value(v0)));
    }

    #[test]
    fn zero_base_matches_dense_delta() {
        let mut rng = stream(1, "lora1");
        let d = 6;
        let adapter = LoraAdapter {
            down: Tensor::randn(&[d, 2], 1.0, &mut rng),
            up: Tensor::randn(&[2, d], 1.0, &mut rng),
            scaling: 1.0,
        };
        let x = Tensor::randn(&[4, d], 1.0, &mut rng);
        let dense = adapter.delta().unwrap();
        let mut expected = Tensor::zeros(&[4, d]);
        for i in 0..4 {
            for j in 0..d {
                let mut s = 0.0;
                for p in 0..d {
                    s += x.at(i, p) * dense.at(p, j);
                }
                expected.data_mut()[i * d + j] = s;
            }
        }
        let mut tape = Tape::new();
        let zero = ProjectionWeights {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
        }
        .bind_constant(&mut tape);
        let a = adapter.bind_constant(&mut tape);
        let lora = RefLoraVars { q: a, k: a, v: a, o: a };
        let xv = tape.constant(x);
        let (q, _, _) = lora_project(&mut tape, xv, &zero, &lora).unwrap();
        assert!(tape.value(q).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn adapter_parameter_count() {
        let mut rng = stream(2, "count");
        for (d, n) in [(64, 4), (1024, 128)] {
            let a = LoraAdapter::init(d, n, &mut rng);
            assert_eq!(a.param_count(), 2 * n * d);
            assert_eq!(a.rank(), n);
            assert!(a.up.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rank_mismatch_rejected() {
        let mut rng = stream(3, "rank");
        let mut tape = Tape::new();
        let w = ProjectionWeights::random(4, &mut rng).bind_constant(&mut tape);
        let mut lora = lora_set(&mut tape, 4, 2, &mut rng, false);
        lora.k = LoraAdapter::init(4, 3, &mut rng).bind_constant(&mut tape);
        let xr = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            lora_project(&mut tape, xr, &w, &lora),
            Err(RefLoraError::RankMismatch(_))
        ));
    }

    #[test]
    fn masked_and_empty_refs_match_plain_attention() {
        let mut rng = stream(4, "joint");
        let d = 8;
        let rope = RotaryTable::new(d, DEFAULT_ROPE_BASE, 32).unwrap();
        let mut tape = Tape::new();
        let w = ProjectionWeights::random(d, &mut rng).bind_constant(&mut tape);
        let lora = lora_set(&mut tape, d, 2, &mut rng, true);
        let x = tape.constant(Tensor::randn(&[5, d], 1.0, &mut rng));
        let xr = tape.constant(Tensor::randn(&[3, d], 1.0, &mut rng));
        let pos: Vec<usize> = (0..5).collect();
        let rpos: Vec<usize> = (5..8).collect();
        let positions = JointPositions {
            original: &pos,
            reference: &rpos,
        };
        let plain = attention::self_attention(&mut tape, x, &w, Some((&rope, &pos))).unwrap();
        let masked = joint_self_attention(&mut tape, x, Some(xr), &w, &lora, &rope, positions, true).unwrap();
        assert!(tape.value(masked.out).max_abs_diff(tape.value(plain)) < 1e-12);
        let empty = tape.constant(Tensor::zeros(&[0, d]));
        let none = joint_self_attention(&mut tape, x, Some(empty), &w, &lora, &rope, positions, false).unwrap();
        assert!(tape.value(none.out).bit_eq(tape.value(plain)));
        assert!(none.out_ref.is_none());
        let open = joint_self_attention(&mut tape, x, Some(xr), &w, &lora, &rope, positions, false).unwrap();
        assert!(tape.value(open.out).max_abs_diff(tape.value(plain)) > 1e-6);
    }

    #[test]
    fn reference_output_ignores_original_tokens() {
        let mut rng = stream(5, "oneway");
        let d = 8;
        let rope = RotaryTable::new(d, DEFAULT_ROPE_BASE, 32).unwrap();
        let mut tape = Tape::new();
        let w = ProjectionWeights::random(d, &mut rng).bind_constant(&mut tape);
        let lora = lora_set(&mut tape, d, 2, &mut rng, true);
        let xr = tape.constant(Tensor::randn(&[2, d], 1.0, &mut rng));
        let pos: Vec<usize> = (0..4).collect();
        let rpos: Vec<usize> = (4..6).collect();
        let positions = JointPositions {
            original: &pos,
            reference: &rpos,
        };
        let x1 = tape.constant(Tensor::randn(&[4, d], 1.0, &mut rng));
        let x2 = tape.constant(Tensor::randn(&[4, d], 3.0, &mut rng));
        let a = joint_self_attention(&mut tape, x1, Some(xr), &w, &lora, &rope, positions, false).unwrap();
        let b = joint_self_attention(&mut tape, x2, Some(xr), &w, &lora, &rope, positions, false).unwrap();
        assert!(tape.value(a.out_ref.unwrap()).bit_eq(tape.value(b.out_ref.unwrap())));
    }

    #[test]
    fn global_condition_embedding() {
        let mut rng = stream(6, "global");
        let mut tape = Tape::new();
        let proj_t = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let proj = tape.constant(proj_t.clone());
        let zero = tape.constant(Tensor::zeros(&[1, 5]));
        let tok = embed_global_condition(&mut tape, zero, proj).unwrap();
        assert!(tape.value(tok).data().iter().all(|&v| v == 0.0));
        let mut basis = vec![0.0; 5];
        basis[2] = 1.0;
        let e = tape.constant(Tensor::vector(basis));
        let tok = embed_global_condition(&mut tape, e, proj).unwrap();
        assert_eq!(tape.value(tok).shape(), &[1, 3]);
        assert_eq!(tape.value(tok).data(), proj_t.row(2));
        let wrong = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            embed_global_condition(&mut tape, wrong, proj),
            Err(RefLoraError::ConditionDim { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn synthetic_provider_is_stable_per_cluster() {
        let p = SyntheticEmbeddingProvider::new(11, FACE_DIM, TIMBRE_DIM);
        let a = p.embed("i0-t1").unwrap();
        let b = p.embed("i0-t0").unwrap();
        assert_eq!(a.face, b.face);
        assert_ne!(a.timbre, b.timbre);
        assert_eq!(a.face.len(), 512);
        assert_eq!(a.timbre.len(), 256);
        let norm: f64 = a.face.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(p.embed("x0-t1").is_err());
        assert_eq!("i3-t7".parse::<ReferenceKey>().unwrap().to_string(), "i3-t7");
    }
}
