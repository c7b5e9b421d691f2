//! Single-head scaled dot-product attention with rotary positions.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{what}: width {got} does not match model width {expected}")]
    Width {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("rotary embedding needs an even width, got {0}")]
    OddWidth(usize),
    #[error("{positions} positions for {rows} rows")]
    PositionCount { positions: usize, rows: usize },
    #[error("position {pos} beyond rotary table size {max}")]
    PositionRange { pos: usize, max: usize },
    #[error("mask is {rows}x{cols}, scores are {q}x{k}")]
    MaskDims {
        rows: usize,
        cols: usize,
        q: usize,
        k: usize,
    },
    #[error("mask row {0} has no attendable key")]
    EmptyMaskRow(usize),
    #[error("keys have {keys} rows but values have {values}")]
    KeyValueLength { keys: usize, values: usize },
}

/// Square query/key/value/output projections of one attention layer.
///
/// Row convention: `Q = X W_Q` for `X` of shape `(seq, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl ProjectionWeights {
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            w_o: Tensor::randn(&[d, d], std, rng),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
            w_o: Tensor::eye(d),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            q: tape.constant(self.w_q.clone()),
            k: tape.constant(self.w_k.clone()),
            v: tape.constant(self.w_v.clone()),
            o: tape.constant(self.w_o.clone()),
        }
    }
}

/// Projection matrices bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Per-position cosine/sine table for `width / 2` frequency channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryTable {
    width: usize,
    base: f64,
    max_pos: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    /// Row `m`, channel `j` holds the angle `m * base^(-2j / width)`.
    pub fn new(width: usize, base: f64, max_pos: usize) -> Result<Self, AttentionError> {
        if !width.is_multiple_of(2) {
            return Err(AttentionError::OddWidth(width));
        }
        let half = width / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for m in 0..max_pos {
            for j in 0..half {
                let theta = base.powf(-2.0 * j as f64 / width as f64);
                let angle = m as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            width,
            base,
            max_pos,
            cos,
            sin,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    fn gather(&self, positions: &[usize]) -> Result<(Vec<f64>, Vec<f64>), AttentionError> {
        let half = self.width / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            if p >= self.max_pos {
                return Err(AttentionError::PositionRange {
                    pos: p,
                    max: self.max_pos,
                });
            }
            cos.extend_from_slice(&self.cos[p * half..(p + 1) * half]);
            sin.extend_from_slice(&self.sin[p * half..(p + 1) * half]);
        }
        Ok((cos, sin))
    }
}

/// Attendability flags, `true` = the query may attend the key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self, AttentionError> {
        if keep.len() != rows * cols {
            return Err(AttentionError::MaskDims {
                rows,
                cols: keep.len() / rows.max(1),
                q: rows,
                k: cols,
            });
        }
        if let Some(r) = (0..rows).find(|&r| !keep[r * cols..(r + 1) * cols].iter().any(|&k| k)) {
            return Err(AttentionError::EmptyMaskRow(r));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    /// Every query may attend the first `kept` keys and none of the rest.
    pub fn leading(rows: usize, cols: usize, kept: usize) -> Result<Self, AttentionError> {
        let keep = (0..rows * cols).map(|i| i % cols < kept).collect();
        Self::new(rows, cols, keep)
    }

    pub fn keep(&self, q: usize, k: usize) -> bool {
        self.keep[q * self.cols + k]
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }
}

fn check_width(tape: &Tape, what: &'static str, x: Var, d: usize) -> Result<(), AttentionError> {
    let got = tape.value(x).last_dim();
    if got != d {
        return Err(AttentionError::Width {
            what,
            expected: d,
            got,
        });
    }
    Ok(())
}

/// `(X W_Q, X W_K, X W_V)`.
pub fn qkv_project(tape: &mut Tape, x: Var, w: &ProjectionVars) -> Result<(Var, Var, Var), AttentionError> {
    let d = tape.value(w.q).rows();
    check_width(tape, "qkv_project input", x, d)?;
    let q = tape.matmul(x, w.q)?;
    let k = tape.matmul(x, w.k)?;
    let v = tape.matmul(x, w.v)?;
    Ok((q, k, v))
}

/// Rotates each channel pair of row `i` by `positions[i] * theta_j`.
pub fn rope_apply(
    tape: &mut Tape,
    x: Var,
    positions: &[usize],
    table: &RotaryTable,
) -> Result<Var, AttentionError> {
    let (rows, width) = tape.value(x).dims2()?;
    if !width.is_multiple_of(2) {
        return Err(AttentionError::OddWidth(width));
    }
    if width != table.width() {
        return Err(AttentionError::Width {
            what: "rope input",
            expected: table.width(),
            got: width,
        });
    }
    if positions.len() != rows {
        return Err(AttentionError::PositionCount {
            positions: positions.len(),
            rows,
        });
    }
    let (cos, sin) = table.gather(positions)?;
    Ok(tape.rope(x, cos, sin)?)
}

/// `softmax(Q K^T / sqrt(d)) V` with masked keys excluded.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var, AttentionError> {
    let (nq, d) = tape.value(q).dims2()?;
    let (nk, dk) = tape.value(k).dims2()?;
    let nv = tape.value(v).rows();
    if dk != d {
        return Err(AttentionError::Width {
            what: "keys",
            expected: d,
            got: dk,
        });
    }
    if nk != nv {
        return Err(AttentionError::KeyValueLength { keys: nk, values: nv });
    }
    if let Some(m) = mask {
        if m.rows != nq || m.cols != nk {
            return Err(AttentionError::MaskDims {
                rows: m.rows,
                cols: m.cols,
                q: nq,
                k: nk,
            });
        }
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_lastdim(scores, mask.map(AttentionMask::flags))?;
    Ok(tape.matmul(weights, v)?)
}

/// Self-attention with output projection, optionally with rotary positions.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    w: &ProjectionVars,
    rope: Option<(&RotaryTable, &[usize])>,
) -> Result<Var, AttentionError> {
    let (mut q, mut k, v) = qkv_project(tape, x, w)?;
    if let Some((table, pos)) = rope {
        q = rope_apply(tape, q, pos, table)?;
        k = rope_apply(tape, k, pos, table)?;
    }
    let z = attend(tape, q, k, v, None)?;
    Ok(tape.matmul(z, w.o)?)
}

/// Queries from `x_q`, keys and values from `x_kv`, then the output
/// projection. No rotary positions across streams.
pub fn cross_attend(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    w: &ProjectionVars,
) -> Result<Var, AttentionError> {
    let d = tape.value(w.q).rows();
    check_width(tape, "cross-attention query", x_q, d)?;
    check_width(tape, "cross-attention context", x_kv, d)?;
    let q = tape.matmul(x_q, w.q)?;
    let k = tape.matmul(x_kv, w.k)?;
    let v = tape.matmul(x_kv, w.v)?;
    let z = attend(tape, q, k, v, None)?;
    Ok(tape.matmul(z, w.o)?)
}
