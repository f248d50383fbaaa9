//! Attention LSTM decoder. Each step embeds the previous symbol together
//! with the previous context vector, advances an LSTM, attends over the
//! flattened feature grid from the new state, and scores the vocabulary from
//! state plus the fresh context.
//!
//! Attention comes in two flavors: `Standard` scores a cell purely from its
//! content, so it cannot tell two identical feature vectors apart;
//! `Location` adds a learned per-cell bias (a column of a row-coordinate
//! table plus a column of a grid-column table), giving each position its own
//! identity.

use crate::autodiff::{Scalar, Tape, ValueId};
use crate::error::{Error, Result};
use crate::params::{init_normal, init_zero, Bindings, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Standard,
    Location,
}

impl AttentionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionKind::Standard),
            "location" => Ok(AttentionKind::Location),
            other => Err(Error::invalid(format!(
                "unknown attention kind `{other}` (expected standard|location)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Standard => "standard",
            AttentionKind::Location => "location",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub lstm_width: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub feat_channels: usize,
    /// Feature grid (rows, total columns across concatenated views).
    pub grid: (usize, usize),
    pub kind: AttentionKind,
    /// Symmetric bound applied to cell and hidden state after each step.
    pub state_clip: f64,
}

impl DecoderConfig {
    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn init_params<S: Scalar>(&self, store: &mut ParamStore<S>, std: f64, rng: &mut Rng) {
        let (v, h, a, x, c) = (
            self.vocab,
            self.lstm_width,
            self.attn_dim,
            self.embed_dim,
            self.feat_channels,
        );
        init_normal(store, "w/dec/embed", &[x, v], std, rng);
        init_normal(store, "w/dec/ctx_in", &[x, c], std, rng);
        init_normal(store, "w/dec/lstm/w_ih", &[4 * h, x], std, rng);
        init_normal(store, "w/dec/lstm/w_hh", &[4 * h, h], std, rng);
        init_zero(store, "w/dec/lstm/b", &[4 * h]);
        init_normal(store, "w/dec/attn/feat", &[c, a], std, rng);
        init_normal(store, "w/dec/attn/state", &[a, h], std, rng);
        init_normal(store, "w/dec/attn/v", &[a], std, rng);
        if self.kind == AttentionKind::Location {
            init_normal(store, "w/dec/attn/wi", &[a, self.grid.0], std, rng);
            init_normal(store, "w/dec/attn/wj", &[a, self.grid.1], std, rng);
        }
        init_normal(store, "w/dec/out_state", &[v, h], std, rng);
        init_normal(store, "w/dec/out_ctx", &[v, c], std, rng);
    }
}

/// Cell/hidden clamp bound applied after every LSTM step.
pub const STATE_CLIP: f64 = 10.0;

/// One decode step's tape handles.
pub struct StepOut {
    pub logits: ValueId,
    pub alpha: ValueId,
    pub context: ValueId,
}

/// Everything the decoder reuses across the steps of one sequence.
pub struct SeqCtx {
    /// Features flattened to [cells, channels].
    pub feats: ValueId,
    /// Projected features [cells, attn_dim].
    fproj: ValueId,
    /// Per-cell location bias [cells, attn_dim], location kind only.
    coord: Option<ValueId>,
}

/// Flatten the feature map and precompute the step-invariant attention terms.
pub fn prepare_sequence<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    cfg: &DecoderConfig,
    feature_map: ValueId,
) -> Result<SeqCtx> {
    let dims = tape.dims(feature_map).to_vec();
    if dims.len() != 3 || (dims[0], dims[1]) != cfg.grid || dims[2] != cfg.feat_channels {
        return Err(Error::ShapeMismatch {
            op: "prepare_sequence",
            lhs: dims,
            rhs: vec![cfg.grid.0, cfg.grid.1, cfg.feat_channels],
        });
    }
    let feats = tape.reshape(feature_map, &[cfg.cells(), cfg.feat_channels])?;
    let wf = bind.get(tape, "w/dec/attn/feat")?;
    let fproj = tape.matmul(feats, wf)?;
    let coord = match cfg.kind {
        AttentionKind::Standard => None,
        AttentionKind::Location => {
            let wi = bind.get(tape, "w/dec/attn/wi")?;
            let wj = bind.get(tape, "w/dec/attn/wj")?;
            Some(tape.coord_bias(wi, wj, cfg.grid.0, cfg.grid.1)?)
        }
    };
    Ok(SeqCtx {
        feats,
        fproj,
        coord,
    })
}

/// Score every cell from the current state, normalize jointly over the grid,
/// and pool the features under the resulting weights.
pub fn attend<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    seq: &SeqCtx,
    state: ValueId,
) -> Result<(ValueId, ValueId)> {
    let ws = bind.get(tape, "w/dec/attn/state")?;
    let sterm = tape.matmul(ws, state)?;
    let mut z = tape.add_row_broadcast(seq.fproj, sterm)?;
    if let Some(coord) = seq.coord {
        z = tape.add(z, coord)?;
    }
    let zt = tape.tanh_act(z);
    let v = bind.get(tape, "w/dec/attn/v")?;
    let scores = tape.matmul(zt, v)?;
    let alpha = tape.softmax(scores, &[0])?;
    let context = tape.matmul(alpha, seq.feats)?;
    Ok((alpha, context))
}

/// One LSTM advance with gate order input, forget, cell, output, followed by
/// the state clamp.
fn lstm_step<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    width: usize,
    clip: f64,
    x: ValueId,
    h: ValueId,
    c: ValueId,
) -> Result<(ValueId, ValueId)> {
    let w_ih = bind.get(tape, "w/dec/lstm/w_ih")?;
    let w_hh = bind.get(tape, "w/dec/lstm/w_hh")?;
    let b = bind.get(tape, "w/dec/lstm/b")?;
    let gx = tape.matmul(w_ih, x)?;
    let gh = tape.matmul(w_hh, h)?;
    let gsum = tape.add(gx, gh)?;
    let gates = tape.add(gsum, b)?;
    let i_g = tape.slice(gates, 0, width)?;
    let f_g = tape.slice(gates, width, width)?;
    let g_g = tape.slice(gates, 2 * width, width)?;
    let o_g = tape.slice(gates, 3 * width, width)?;
    let i = tape.sigmoid(i_g);
    let f = tape.sigmoid(f_g);
    let g = tape.tanh_act(g_g);
    let o = tape.sigmoid(o_g);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_raw = tape.add(fc, ig)?;
    let c_new = tape.clip(c_raw, -clip, clip);
    let ct = tape.tanh_act(c_new);
    let h_raw = tape.mul(o, ct)?;
    let h_new = tape.clip(h_raw, -clip, clip);
    Ok((h_new, c_new))
}

/// Advance one decode step from the previous symbol and context.
#[allow(clippy::too_many_arguments)]
pub fn decoder_step<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    cfg: &DecoderConfig,
    seq: &SeqCtx,
    prev_symbol: usize,
    prev_context: ValueId,
    h: ValueId,
    c: ValueId,
) -> Result<(StepOut, ValueId, ValueId)> {
    if prev_symbol >= cfg.vocab {
        return Err(Error::IndexOutOfRange {
            what: "decoder previous symbol",
            index: prev_symbol,
            len: cfg.vocab,
        });
    }
    let embed = bind.get(tape, "w/dec/embed")?;
    let sym = tape.select_column(embed, prev_symbol)?;
    let wc = bind.get(tape, "w/dec/ctx_in")?;
    let ctx_in = tape.matmul(wc, prev_context)?;
    let x = tape.add(sym, ctx_in)?;
    let (h_new, c_new) = lstm_step(tape, bind, cfg.lstm_width, cfg.state_clip, x, h, c)?;
    let (alpha, context) = attend(tape, bind, seq, h_new)?;
    let wo = bind.get(tape, "w/dec/out_state")?;
    let from_state = tape.matmul(wo, h_new)?;
    let wu = bind.get(tape, "w/dec/out_ctx")?;
    let from_ctx = tape.matmul(wu, context)?;
    let logits = tape.add(from_state, from_ctx)?;
    Ok((
        StepOut {
            logits,
            alpha,
            context,
        },
        h_new,
        c_new,
    ))
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'a> {
    /// Feed each step's argmax back as the next input.
    Greedy,
    /// Feed the given symbols back regardless of what was predicted
    /// (teacher forcing, or replaying a previous prediction).
    Guided(&'a [usize]),
}

pub struct DecodeResult {
    /// Argmax symbol per step.
    pub symbols: Vec<usize>,
    pub steps: Vec<StepOut>,
}

/// First index of the largest value; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(vals: &[S]) -> usize {
    let mut best = 0usize;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

/// Run `t_steps` decode steps over a prepared feature map. The initial
/// context comes from one attention pass at the all-zero state, and the
/// first step consumes the null symbol.
pub fn decode_sequence<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    cfg: &DecoderConfig,
    seq: &SeqCtx,
    t_steps: usize,
    mode: DecodeMode,
) -> Result<DecodeResult> {
    if let DecodeMode::Guided(hist) = mode {
        if hist.len() != t_steps {
            return Err(Error::invalid(format!(
                "guided decode needs {} symbols, got {}",
                t_steps,
                hist.len()
            )));
        }
    }
    let h0 = tape.literal(&[cfg.lstm_width], vec![S::zero(); cfg.lstm_width])?;
    let c0 = tape.literal(&[cfg.lstm_width], vec![S::zero(); cfg.lstm_width])?;
    let (_, mut context) = attend(tape, bind, seq, h0)?;
    let (mut h, mut c) = (h0, c0);
    let mut out = DecodeResult {
        symbols: Vec::with_capacity(t_steps),
        steps: Vec::with_capacity(t_steps),
    };
    for t in 0..t_steps {
        let prev = match mode {
            DecodeMode::Greedy => {
                if t == 0 {
                    0
                } else {
                    out.symbols[t - 1]
                }
            }
            DecodeMode::Guided(hist) => {
                if t == 0 {
                    0
                } else {
                    hist[t - 1]
                }
            }
        };
        let (step, h_new, c_new) = decoder_step(tape, bind, cfg, seq, prev, context, h, c)?;
        out.symbols.push(argmax(tape.values(step.logits)));
        context = step.context;
        h = h_new;
        c = c_new;
        out.steps.push(step);
    }
    Ok(out)
}

/// Mean over steps of the label-smoothed cross entropy against the target.
pub fn sequence_loss<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    steps: &[StepOut],
    target: &[usize],
    smoothing: f64,
) -> Result<ValueId> {
    if steps.len() != target.len() {
        return Err(Error::invalid(format!(
            "sequence_loss: {} steps vs {} targets",
            steps.len(),
            target.len()
        )));
    }
    let mut per_step = Vec::with_capacity(steps.len());
    for (s, &t) in steps.iter().zip(target) {
        per_step.push(tape.smoothed_cross_entropy(s.logits, t, smoothing)?);
    }
    let total = tape.add_n(&per_step)?;
    Ok(tape.scale(total, 1.0 / steps.len() as f64))
}
