//! Model parameters and forward computation for the session architectures.
//!
//! All variants share one recurrent core. Per step t (0-based, predicting
//! `items[t+1]`):
//!
//! ```text
//! x_t   = column items[t] of V_embed
//! a_t   = mean of V_embed columns of recs[t]        (if the slate is non-empty)
//! gate_t = W_a · a_t
//!
//! navigation:  h_in = h;            out = h_next
//! early:       h_in = h ⊙ gate_t;   out = h_next
//! late/clicks: h_in = h;            out = h_next ⊙ gate_t
//!
//! GRU:  z = σ(W_z x + U_z h_in + b_z)
//!       r = σ(W_r x + U_r h_in + b_r)
//!       c = tanh(W_h x + U_h (r ⊙ h_in) + b_h)
//!       h_next = (1 − z) ⊙ h_in + z ⊙ c
//!
//! logits_t = W_out · out + b_out
//! ```
//!
//! When a step carries no slate the fusion is the identity, so on slate-free
//! data every variant computes exactly the same function. The late variant
//! carries the *unfused* h_next forward: the slate touches only the output,
//! never the recurrent state.

use std::io::{Read, Write};
use std::path::Path;

use crate::datapipe::EncodedSequence;
use crate::error::{Error, Result};
use crate::numkernel::{glorot_init, matvec, sigmoid, Matrix, Rng};

pub const DEFAULT_EMBED_DIM: usize = 40;
pub const DEFAULT_HIDDEN_DIM: usize = 40;

/// Model architecture. `Clicks` shares the late-fusion forward pass and
/// differs only in its training mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Navigation,
    Early,
    Late,
    Clicks,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Navigation, Variant::Early, Variant::Late, Variant::Clicks];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Navigation => "navigation",
            Variant::Early => "early",
            Variant::Late => "late",
            Variant::Clicks => "clicks",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "navigation" => Ok(Variant::Navigation),
            "early" => Ok(Variant::Early),
            "late" => Ok(Variant::Late),
            "clicks" => Ok(Variant::Clicks),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected navigation|early|late|clicks"
            ))),
        }
    }

    fn code(&self) -> u32 {
        match self {
            Variant::Navigation => 0,
            Variant::Early => 1,
            Variant::Late => 2,
            Variant::Clicks => 3,
        }
    }

    fn from_code(c: u32) -> Result<Variant> {
        match c {
            0 => Ok(Variant::Navigation),
            1 => Ok(Variant::Early),
            2 => Ok(Variant::Late),
            3 => Ok(Variant::Clicks),
            other => Err(Error::Data(format!("unknown variant code {other}"))),
        }
    }
}

/// All learnable tensors. The item embedding `v_embed` is shared between
/// visited items and recommended items.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub v_x: usize,
    pub d: usize,
    pub k: usize,
    /// d × V_x; column j is the embedding of item j.
    pub v_embed: Matrix,
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
    /// k × d action projection.
    pub w_a: Matrix,
    /// V_x × k output weights.
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Fixed tensor order used by `flat`/`flat_mut`, the optimizer and the
/// checkpoint format.
pub const TENSOR_NAMES: [&str; 13] = [
    "v_embed", "w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h", "w_a", "w_out",
    "b_out",
];

impl ModelParams {
    /// Glorot-uniform weight matrices, zero biases.
    pub fn init(v_x: usize, d: usize, k: usize, rng: &mut Rng) -> ModelParams {
        assert!(v_x >= 2 && d >= 1 && k >= 1);
        ModelParams {
            v_x,
            d,
            k,
            v_embed: glorot_init(rng, d, v_x),
            w_z: glorot_init(rng, k, d),
            w_r: glorot_init(rng, k, d),
            w_h: glorot_init(rng, k, d),
            u_z: glorot_init(rng, k, k),
            u_r: glorot_init(rng, k, k),
            u_h: glorot_init(rng, k, k),
            b_z: vec![0.0; k],
            b_r: vec![0.0; k],
            b_h: vec![0.0; k],
            w_a: glorot_init(rng, k, d),
            w_out: glorot_init(rng, v_x, k),
            b_out: vec![0.0; v_x],
        }
    }

    pub fn tensor_shapes(&self) -> Vec<usize> {
        self.flat().iter().map(|t| t.len()).collect()
    }

    pub fn flat(&self) -> [&[f64]; 13] {
        [
            &self.v_embed.data,
            &self.w_z.data,
            &self.w_r.data,
            &self.w_h.data,
            &self.u_z.data,
            &self.u_r.data,
            &self.u_h.data,
            &self.b_z,
            &self.b_r,
            &self.b_h,
            &self.w_a.data,
            &self.w_out.data,
            &self.b_out,
        ]
    }

    pub fn flat_mut(&mut self) -> [&mut [f64]; 13] {
        [
            &mut self.v_embed.data,
            &mut self.w_z.data,
            &mut self.w_r.data,
            &mut self.w_h.data,
            &mut self.u_z.data,
            &mut self.u_r.data,
            &mut self.u_h.data,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
            &mut self.w_a.data,
            &mut self.w_out.data,
            &mut self.b_out,
        ]
    }
}

/// Embedding lookup: column `index` of V_embed (one-hot × matrix).
pub fn embed_item(params: &ModelParams, index: usize) -> Vec<f64> {
    assert!(index < params.v_x, "item index {} out of range (V_x={})", index, params.v_x);
    let mut out = vec![0.0; params.d];
    params.v_embed.col_into(index, &mut out);
    out
}

/// Mean of the embedded slate items. Summation runs in ascending-index order
/// so the result is bit-identical under any permutation of the slate.
pub fn action_repr(params: &ModelParams, rec_indices: &[usize]) -> Vec<f64> {
    assert!(!rec_indices.is_empty(), "action_repr on empty slate");
    let mut sorted = rec_indices.to_vec();
    sorted.sort_unstable();
    let mut out = vec![0.0; params.d];
    for &j in &sorted {
        assert!(j < params.v_x, "rec index {} out of range (V_x={})", j, params.v_x);
        for (slot, r) in out.iter_mut().enumerate() {
            *r += params.v_embed.get(slot, j);
        }
    }
    let inv = 1.0 / sorted.len() as f64;
    for r in &mut out {
        *r *= inv;
    }
    out
}

/// Multiplicative state-action fusion: h ⊙ (W_a · a_emb).
pub fn fuse(h: &[f64], a_emb: &[f64], w_a: &Matrix) -> Vec<f64> {
    let gate = matvec(w_a, a_emb);
    assert_eq!(gate.len(), h.len());
    h.iter().zip(&gate).map(|(&a, &b)| a * b).collect()
}

/// One GRU step. Returns (h_next, z, r, candidate).
pub fn gru_cell(
    params: &ModelParams,
    x_emb: &[f64],
    h: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = params.k;
    assert_eq!(x_emb.len(), params.d);
    assert_eq!(h.len(), k);
    let wz_x = matvec(&params.w_z, x_emb);
    let uz_h = matvec(&params.u_z, h);
    let z: Vec<f64> =
        (0..k).map(|i| sigmoid(wz_x[i] + uz_h[i] + params.b_z[i])).collect();
    let wr_x = matvec(&params.w_r, x_emb);
    let ur_h = matvec(&params.u_r, h);
    let r: Vec<f64> =
        (0..k).map(|i| sigmoid(wr_x[i] + ur_h[i] + params.b_r[i])).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(&ri, &hi)| ri * hi).collect();
    let wh_x = matvec(&params.w_h, x_emb);
    let uh_rh = matvec(&params.u_h, &rh);
    let c: Vec<f64> =
        (0..k).map(|i| (wh_x[i] + uh_rh[i] + params.b_h[i]).tanh()).collect();
    let h_next: Vec<f64> =
        (0..k).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
    (h_next, z, r, c)
}

/// Affine output layer; callers apply softmax.
pub fn output_logits(params: &ModelParams, h_tilde: &[f64]) -> Vec<f64> {
    let mut logits = matvec(&params.w_out, h_tilde);
    for (l, &b) in logits.iter_mut().zip(&params.b_out) {
        *l += b;
    }
    logits
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepTape {
    pub x_emb: Vec<f64>,
    /// Mean slate embedding; `None` when the step has no slate or the
    /// variant ignores slates.
    pub a_emb: Option<Vec<f64>>,
    /// W_a · a_emb, populated together with `a_emb`.
    pub gate: Option<Vec<f64>>,
    /// Carried state entering the step, before any fusion.
    pub h_prev: Vec<f64>,
    /// State consumed by the GRU (differs from h_prev only for early fusion).
    pub h_in: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    /// State carried to the next step.
    pub h_next: Vec<f64>,
    /// State feeding the output layer (differs from h_next only for late fusion).
    pub out_state: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Per-step activations retained for backpropagation through time.
#[derive(Debug, Clone)]
pub struct TapeState {
    pub steps: Vec<StepTape>,
}

fn forward_step(
    params: &ModelParams,
    variant: Variant,
    h: &[f64],
    item: usize,
    recs: &[usize],
) -> StepTape {
    let x_emb = embed_item(params, item);
    let use_action = variant != Variant::Navigation && !recs.is_empty();
    let (a_emb, gate) = if use_action {
        let a = action_repr(params, recs);
        let g = matvec(&params.w_a, &a);
        (Some(a), Some(g))
    } else {
        (None, None)
    };

    let h_prev = h.to_vec();
    let h_in = match (variant, &gate) {
        (Variant::Early, Some(g)) => h.iter().zip(g).map(|(&a, &b)| a * b).collect(),
        _ => h_prev.clone(),
    };
    let (h_next, z, r, c) = gru_cell(params, &x_emb, &h_in);
    let out_state = match (variant, &gate) {
        (Variant::Late | Variant::Clicks, Some(g)) => {
            h_next.iter().zip(g).map(|(&a, &b)| a * b).collect()
        }
        _ => h_next.clone(),
    };
    let logits = output_logits(params, &out_state);
    StepTape { x_emb, a_emb, gate, h_prev, h_in, z, r, c, h_next, out_state, logits }
}

/// Unrolled forward pass: produces one tape entry per prediction step
/// (step t predicts `items[t+1]`), starting from h = 0.
pub fn forward(params: &ModelParams, seq: &EncodedSequence, variant: Variant) -> TapeState {
    assert!(seq.len() >= 2, "forward needs at least 2 events, got {}", seq.len());
    let mut h = vec![0.0; params.k];
    let mut steps = Vec::with_capacity(seq.steps());
    for t in 0..seq.steps() {
        let tape = forward_step(params, variant, &h, seq.items[t], &seq.recs[t]);
        h = tape.h_next.clone();
        steps.push(tape);
    }
    TapeState { steps }
}

/// Logits for the *unobserved* item after the last event: the recurrence is
/// advanced through all T events (including the final slate, if any). Accepts
/// single-event sessions.
pub fn predict_next(params: &ModelParams, seq: &EncodedSequence, variant: Variant) -> Vec<f64> {
    assert!(!seq.is_empty(), "predict_next on empty sequence");
    let mut h = vec![0.0; params.k];
    let mut last = None;
    for t in 0..seq.len() {
        let tape = forward_step(params, variant, &h, seq.items[t], &seq.recs[t]);
        h = tape.h_next.clone();
        last = Some(tape);
    }
    last.unwrap().logits
}

// --- checkpoint format ---------------------------------------------------
//
// Binary, little-endian:
//   bytes 0..8   magic "ACRECKPT"
//   u32          format version (1)
//   u32          variant code (0 navigation, 1 early, 2 late, 3 clicks)
//   u64 ×3       v_x, d, k
//   f64 × N      tensors row-major, in TENSOR_NAMES order:
//                v_embed (d×v_x), w_z, w_r, w_h (k×d), u_z, u_r, u_h (k×k),
//                b_z, b_r, b_h (k), w_a (k×d), w_out (v_x×k), b_out (v_x)

const CKPT_MAGIC: &[u8; 8] = b"ACRECKPT";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams, variant: Variant) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&variant.code().to_le_bytes());
    buf.extend_from_slice(&(params.v_x as u64).to_le_bytes());
    buf.extend_from_slice(&(params.d as u64).to_le_bytes());
    buf.extend_from_slice(&(params.k as u64).to_le_bytes());
    for tensor in params.flat() {
        for v in tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Variant)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Data(format!("checkpoint {}: {msg}", path.display()));
    if bytes.len() < 8 + 4 + 4 + 24 || &bytes[0..8] != CKPT_MAGIC {
        return Err(fail("missing magic header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    if u32_at(8) != CKPT_VERSION {
        return Err(fail("unsupported format version"));
    }
    let variant = Variant::from_code(u32_at(12))?;
    let v_x = u64_at(16) as usize;
    let d = u64_at(24) as usize;
    let k = u64_at(32) as usize;
    if v_x < 2 || d < 1 || k < 1 {
        return Err(fail("degenerate dimensions"));
    }

    let mut params = ModelParams {
        v_x,
        d,
        k,
        v_embed: Matrix::zeros(d, v_x),
        w_z: Matrix::zeros(k, d),
        w_r: Matrix::zeros(k, d),
        w_h: Matrix::zeros(k, d),
        u_z: Matrix::zeros(k, k),
        u_r: Matrix::zeros(k, k),
        u_h: Matrix::zeros(k, k),
        b_z: vec![0.0; k],
        b_r: vec![0.0; k],
        b_h: vec![0.0; k],
        w_a: Matrix::zeros(k, d),
        w_out: Matrix::zeros(v_x, k),
        b_out: vec![0.0; v_x],
    };
    let total: usize = params.tensor_shapes().iter().sum();
    let expected = 8 + 4 + 4 + 24 + 8 * total;
    if bytes.len() != expected {
        return Err(fail(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut off = 8 + 4 + 4 + 24;
    for tensor in params.flat_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(fail("non-finite parameter value"));
            }
            off += 8;
        }
    }
    Ok((params, variant))
}
