//! Runnable verification suites: finite-difference checks for every tape
//! primitive plus the end-to-end decoder loss, and the structural
//! invariants the architecture promises. Shared by the command line and
//! the acceptance tests so both report from the same source.

use crate::autodiff::{grad_check, Padding, Tape, Tensor, ValueId};
use crate::cnn;
use crate::dataset::image::sample_crop;
use crate::decoder::{self, AttentionKind, DecodeMode, DecoderConfig};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::{Bindings, ParamStore};
use crate::rng::Rng;
use crate::trainer::TrainState;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} {}",
            if self.passed { "ok  " } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

const EPS: f64 = 1e-4;

/// Deterministic test tensor with entries away from activation kinks.
fn probe(dims: &[usize], tag: u64) -> Tensor<f64> {
    let mut rng = Rng::new(0x70726f6265).derive(tag);
    Tensor::from_fn(dims, |_| {
        let v = rng.uniform(0.05, 0.95);
        if rng.chance(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduce to a scalar through fixed non-uniform weights so transposed or
/// permuted gradients cannot cancel out.
fn weighted_sum(tape: &mut Tape<'_, f64>, x: ValueId) -> Result<ValueId> {
    let dims = tape.dims(x).to_vec();
    let n: usize = dims.iter().product();
    let mut rng = Rng::new(0x77656967).derive(n as u64);
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.uniform(0.3, 1.6);
            if rng.chance(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let wid = tape.literal(&dims, w)?;
    let prod = tape.mul(x, wid)?;
    Ok(tape.sum(prod))
}

fn fd_case<'e, F>(
    name: &'static str,
    tolerance: f64,
    leaves: Vec<(String, Tensor<f64>)>,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<'e, f64>, &[ValueId]) -> Result<ValueId>,
{
    let r = grad_check(&leaves, EPS, build)?;
    Ok(CheckOutcome {
        name,
        passed: r.worst_rel_err < tolerance,
        detail: format!("{} (tolerance {tolerance:.0e})", r.summary()),
    })
}

fn micro_cfg(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        alphabet: crate::alphabet::Alphabet::new(['A', 'B', 'C']).unwrap(),
        t_steps: 3,
        views: 2,
        view_h: 12,
        view_w: 12,
        channels: 2,
        preset: "c2,p".to_string(),
        attention: kind,
        lstm_width: 5,
        attn_dim: 3,
        embed_dim: 3,
        state_clip: 10.0,
    }
}

fn model_loss_case(name: &'static str, kind: AttentionKind) -> Result<CheckOutcome> {
    let cfg = micro_cfg(kind);
    let store = cfg.init_params::<f64>(11)?;
    let dcfg = cfg.decoder()?;
    let names: Vec<String> = store.keys().cloned().collect();
    let mut leaves: Vec<(String, Tensor<f64>)> =
        store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for i in 0..cfg.views {
        leaves.push((
            format!("view{i}"),
            probe(&[cfg.view_h, cfg.view_w, cfg.channels], 90 + i as u64),
        ));
    }
    let target = [1usize, 2, 0];
    fd_case(name, 1e-4, leaves, |tape, ids| {
        let mut bind = Bindings::new(&store);
        for (n, &id) in names.iter().zip(ids.iter()) {
            bind.preset(n, id);
        }
        let ex = cfg.extractor()?;
        let fmap = cnn::multi_view_features(tape, &mut bind, &ex, &ids[names.len()..])?;
        let seq = decoder::prepare_sequence(tape, &mut bind, &dcfg, fmap)?;
        let res = decoder::decode_sequence(
            tape,
            &mut bind,
            &dcfg,
            &seq,
            target.len(),
            DecodeMode::Guided(&target),
        )?;
        decoder::sequence_loss(tape, &res.steps, &target, 0.9)
    })
}

/// Finite-difference comparison for every primitive and the whole decoder
/// loss under both attention kinds. Returns one outcome per case; a case
/// fails when its worst relative error exceeds the pinned tolerance.
pub fn gradient_suite() -> Result<Vec<CheckOutcome>> {
    let tight = 1e-6;
    let one = |dims: &[usize], tag: u64| vec![("x".to_string(), probe(dims, tag))];
    let two = |da: &[usize], db: &[usize], tag: u64| {
        vec![
            ("a".to_string(), probe(da, tag)),
            ("b".to_string(), probe(db, tag + 1)),
        ]
    };
    let mut out = Vec::new();

    out.push(fd_case("matmul_mat_mat", tight, two(&[3, 4], &[4, 2], 1), |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("matmul_mat_vec", tight, two(&[3, 4], &[4], 2), |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case(
        "conv2d_same",
        tight,
        two(&[5, 4, 2], &[3, 3, 2, 3], 3),
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, Padding::Same)?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case(
        "conv2d_valid_stride2",
        tight,
        two(&[5, 5, 2], &[3, 3, 2, 2], 4),
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 2, Padding::Valid)?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case("maxpool2d", tight, one(&[4, 4, 2], 5), |t, ids| {
        let y = t.maxpool2d(ids[0], 2, 2)?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("relu", tight, one(&[7], 6), |t, ids| {
        let y = t.relu(ids[0]);
        weighted_sum(t, y)
    })?);
    out.push(fd_case("tanh", tight, one(&[6], 7), |t, ids| {
        let y = t.tanh_act(ids[0]);
        weighted_sum(t, y)
    })?);
    out.push(fd_case("sigmoid", tight, one(&[6], 8), |t, ids| {
        let y = t.sigmoid(ids[0]);
        weighted_sum(t, y)
    })?);
    out.push(fd_case("add", tight, two(&[5], &[5], 9), |t, ids| {
        let y = t.add(ids[0], ids[1])?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("mul", tight, two(&[5], &[5], 10), |t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("scale", tight, one(&[5], 11), |t, ids| {
        let y = t.scale(ids[0], -1.7);
        weighted_sum(t, y)
    })?);
    out.push(fd_case("clip", tight, one(&[7], 12), |t, ids| {
        let y = t.clip(ids[0], -0.5, 0.5);
        weighted_sum(t, y)
    })?);
    out.push(fd_case(
        "add_channel_bias",
        tight,
        two(&[3, 2, 4], &[4], 13),
        |t, ids| {
            let y = t.add_channel_bias(ids[0], ids[1])?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case(
        "add_row_broadcast",
        tight,
        two(&[4, 3], &[3], 14),
        |t, ids| {
            let y = t.add_row_broadcast(ids[0], ids[1])?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case("softmax_rows", tight, one(&[2, 5], 15), |t, ids| {
        let y = t.softmax(ids[0], &[1])?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("softmax_flat", tight, one(&[6], 16), |t, ids| {
        let y = t.softmax(ids[0], &[0])?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("smoothed_cross_entropy", tight, one(&[7], 17), |t, ids| {
        t.smoothed_cross_entropy(ids[0], 2, 0.9)
    })?);
    out.push(fd_case("sum", tight, one(&[6], 18), |t, ids| Ok(t.sum(ids[0])))?);
    out.push(fd_case(
        "add_n",
        tight,
        vec![
            ("a".to_string(), probe(&[4], 19)),
            ("b".to_string(), probe(&[4], 20)),
            ("c".to_string(), probe(&[4], 21)),
        ],
        |t, ids| {
            let y = t.add_n(ids)?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case("select_column", tight, one(&[4, 5], 22), |t, ids| {
        let y = t.select_column(ids[0], 2)?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case("select_element", tight, one(&[6], 23), |t, ids| {
        t.select_element(ids[0], 3)
    })?);
    out.push(fd_case("slice", tight, one(&[8], 24), |t, ids| {
        let y = t.slice(ids[0], 2, 4)?;
        weighted_sum(t, y)
    })?);
    out.push(fd_case(
        "concat_width",
        tight,
        two(&[3, 2, 2], &[3, 3, 2], 25),
        |t, ids| {
            let y = t.concat_width(ids)?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case(
        "coord_bias",
        tight,
        two(&[3, 4], &[3, 5], 26),
        |t, ids| {
            let y = t.coord_bias(ids[0], ids[1], 4, 5)?;
            weighted_sum(t, y)
        },
    )?);
    out.push(fd_case("reshape", tight, one(&[2, 6], 27), |t, ids| {
        let y = t.reshape(ids[0], &[3, 4])?;
        weighted_sum(t, y)
    })?);
    out.push(model_loss_case("model_loss_standard", AttentionKind::Standard)?);
    out.push(model_loss_case("model_loss_location", AttentionKind::Location)?);
    Ok(out)
}

fn micro_dcfg(kind: AttentionKind) -> DecoderConfig {
    DecoderConfig {
        vocab: 4,
        lstm_width: 5,
        attn_dim: 3,
        embed_dim: 3,
        feat_channels: 2,
        grid: (2, 3),
        kind,
        state_clip: 10.0,
    }
}

/// Greedy-decode a hand-built feature map and return each step's attention
/// weights plus the flattened features and step contexts.
fn decode_features(
    dcfg: &DecoderConfig,
    store: &ParamStore<f64>,
    fmap: &Tensor<f64>,
    t_steps: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut bind = Bindings::new(store);
    let fid = tape.leaf(fmap);
    let seq = decoder::prepare_sequence(&mut tape, &mut bind, dcfg, fid)?;
    let res = decoder::decode_sequence(
        &mut tape,
        &mut bind,
        dcfg,
        &seq,
        t_steps,
        DecodeMode::Greedy,
    )?;
    let alphas = res
        .steps
        .iter()
        .map(|s| tape.values(s.alpha).to_vec())
        .collect();
    let contexts = res
        .steps
        .iter()
        .map(|s| tape.values(s.context).to_vec())
        .collect();
    let feats = tape.values(seq.feats).to_vec();
    Ok((alphas, contexts, feats))
}

fn decoder_store(dcfg: &DecoderConfig, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    dcfg.init_params::<f64>(&mut store, 0.3, &mut rng);
    store
}

fn attention_mass_check() -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for kind in [AttentionKind::Standard, AttentionKind::Location] {
        let dcfg = micro_dcfg(kind);
        let store = decoder_store(&dcfg, 31);
        let fmap = probe(&[2, 3, 2], 32);
        let (alphas, _, _) = decode_features(&dcfg, &store, &fmap, 4)?;
        for a in alphas {
            if a.iter().any(|v| *v < 0.0) {
                worst = f64::INFINITY;
            }
            worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(CheckOutcome {
        name: "attention_mass",
        passed: worst < 1e-6,
        detail: format!("max |sum(alpha) - 1| = {worst:.3e} over both kinds"),
    })
}

/// Cells of the feature map swapped along a fixed permutation. Content
/// scoring must follow the cells; position scoring must not.
fn attention_permutation_check() -> Result<CheckOutcome> {
    let (gh, gw, c) = (2usize, 3, 2);
    let cells = gh * gw;
    let fmap = probe(&[gh, gw, c], 33);
    let perm: Vec<usize> = (0..cells).map(|k| (k + 1) % cells).collect();
    let mut pvals = vec![0.0; cells * c];
    for k in 0..cells {
        for ch in 0..c {
            pvals[perm[k] * c + ch] = fmap.values[k * c + ch];
        }
    }
    let pmap = Tensor::from_vec(&[gh, gw, c], pvals)?;

    let run = |kind: AttentionKind| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let dcfg = micro_dcfg(kind);
        let store = decoder_store(&dcfg, 34);
        let (a, _, _) = decode_features(&dcfg, &store, &fmap, 3)?;
        let (b, _, _) = decode_features(&dcfg, &store, &pmap, 3)?;
        Ok((a, b))
    };

    let (std_a, std_b) = run(AttentionKind::Standard)?;
    let mut std_diff = 0.0f64;
    for (a, b) in std_a.iter().zip(&std_b) {
        for k in 0..cells {
            std_diff = std_diff.max((a[k] - b[perm[k]]).abs());
        }
    }
    let (loc_a, loc_b) = run(AttentionKind::Location)?;
    let mut loc_diff = 0.0f64;
    for (a, b) in loc_a.iter().zip(&loc_b) {
        for k in 0..cells {
            loc_diff = loc_diff.max((a[k] - b[perm[k]]).abs());
        }
    }
    Ok(CheckOutcome {
        name: "attention_permutation",
        passed: std_diff < 1e-9 && loc_diff > 1e-6,
        detail: format!(
            "standard follows cells (diff {std_diff:.3e}); location keeps position (diff {loc_diff:.3e})"
        ),
    })
}

/// The one-hot coordinate projections collapse to a per-cell additive bias
/// matrix: bias(i,j) = wi[:,i] + wj[:,j], exactly.
fn location_bias_matrix_check() -> Result<CheckOutcome> {
    let (ad, gh, gw) = (3usize, 4, 5);
    let wi = probe(&[ad, gh], 35);
    let wj = probe(&[ad, gw], 36);
    let mut tape = Tape::<f64>::new();
    let wi_id = tape.leaf(&wi);
    let wj_id = tape.leaf(&wj);
    let bias = tape.coord_bias(wi_id, wj_id, gh, gw)?;
    let got = tape.values(bias);
    let mut worst = 0.0f64;
    for i in 0..gh {
        for j in 0..gw {
            for a in 0..ad {
                let want = wi.values[a * gh + i] + wj.values[a * gw + j];
                worst = worst.max((got[(i * gw + j) * ad + a] - want).abs());
            }
        }
    }
    Ok(CheckOutcome {
        name: "location_bias_matrix",
        passed: worst == 0.0,
        detail: format!("max |bias - (wi col + wj col)| = {worst:.3e}"),
    })
}

/// Contexts are convex combinations of feature cells, so every channel
/// stays inside the per-channel min/max over cells.
fn context_bounds_check() -> Result<CheckOutcome> {
    let dcfg = micro_dcfg(AttentionKind::Standard);
    let store = decoder_store(&dcfg, 37);
    let fmap = probe(&[2, 3, 2], 38);
    let (_, contexts, feats) = decode_features(&dcfg, &store, &fmap, 4)?;
    let cells = 6;
    let c = dcfg.feat_channels;
    let mut worst = 0.0f64;
    for ctx in contexts {
        for ch in 0..c {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for k in 0..cells {
                lo = lo.min(feats[k * c + ch]);
                hi = hi.max(feats[k * c + ch]);
            }
            worst = worst.max((lo - ctx[ch]).max(ctx[ch] - hi).max(0.0));
        }
    }
    Ok(CheckOutcome {
        name: "context_convex_bounds",
        passed: worst < 1e-9,
        detail: format!("max bound violation {worst:.3e}"),
    })
}

fn checkpoint_round_trip_check() -> Result<CheckOutcome> {
    let cfg = micro_cfg(AttentionKind::Location);
    let mut state = TrainState::new(&cfg, 39)?;
    state.step = 5;
    let dir = tempfile::tempdir().map_err(|e| crate::error::Error::io("tmp", e))?;
    let path = dir.path().join("rt.ckpt");
    state.save(&path)?;
    let back = TrainState::load(&path)?;
    let mut same = back.model == state.model && back.step == state.step;
    for (a, b) in [
        (&state.params, &back.params),
        (&state.velocity, &back.velocity),
        (&state.polyak, &back.polyak),
    ] {
        same &= a.len() == b.len();
        for (name, t) in a.iter() {
            let bt = &b[name];
            same &= t.dims == bt.dims
                && t.values
                    .iter()
                    .zip(&bt.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    Ok(CheckOutcome {
        name: "checkpoint_round_trip",
        passed: same,
        detail: "save/load preserves the model line and every tensor bit".to_string(),
    })
}

/// 10,000 crop draws on the canonical square frame: area at least 4/5 of
/// the frame, aspect within [4/5, 6/5] of it.
fn crop_constraint_check() -> Result<CheckOutcome> {
    let (h, w) = (64usize, 64);
    let mut rng = Rng::new(40);
    let mut violations = 0usize;
    const DRAWS: usize = 10_000;
    for _ in 0..DRAWS {
        let (y0, x0, ch, cw) = sample_crop(h, w, &mut rng);
        let fits = y0 + ch <= h && x0 + cw <= w;
        let area_ok = 5 * ch * cw >= 4 * h * w;
        let aspect_ok = 5 * cw * h >= 4 * ch * w && 5 * cw * h <= 6 * ch * w;
        if !(fits && area_ok && aspect_ok) {
            violations += 1;
        }
    }
    Ok(CheckOutcome {
        name: "crop_constraints",
        passed: violations == 0,
        detail: format!("{violations} violations in {DRAWS} draws"),
    })
}

/// Structural invariants of attention, checkpoints and augmentation,
/// runnable outside the test harness.
pub fn invariant_suite() -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        attention_mass_check()?,
        attention_permutation_check()?,
        location_bias_matrix_check()?,
        context_bounds_check()?,
        checkpoint_round_trip_check()?,
        crop_constraint_check()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_every_case() {
        for c in gradient_suite().unwrap() {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn invariant_suite_passes_every_case() {
        let outcomes = invariant_suite().unwrap();
        assert_eq!(outcomes.len(), 6);
        for c in outcomes {
            assert!(c.passed, "{}", c.line());
        }
    }
}
