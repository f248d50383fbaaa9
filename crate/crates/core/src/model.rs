//! Whole-model configuration and forward passes: multi-view images in,
//! per-step logits and attention maps out. The feature grids of all views
//! are concatenated along width, so one decoder attends across every view
//! at once and unreadable views simply lose the attention vote.

use crate::alphabet::Alphabet;
use crate::autodiff::{Scalar, Tape, Tensor, ValueId};
use crate::cnn::{self, ExtractorConfig};
use crate::decoder::{
    self, AttentionKind, DecodeMode, DecodeResult, DecoderConfig, SeqCtx,
};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::rng::{fnv1a64, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub alphabet: Alphabet,
    /// Fixed number of decode steps; transcriptions pad to this with nulls.
    pub t_steps: usize,
    pub views: usize,
    pub view_h: usize,
    pub view_w: usize,
    /// Input channels per view.
    pub channels: usize,
    pub preset: String,
    pub attention: AttentionKind,
    pub lstm_width: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    /// LSTM cell/hidden clamp bound.
    pub state_clip: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on one core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            alphabet: Alphabet::desk(),
            t_steps: 12,
            views: 4,
            view_h: 64,
            view_w: 64,
            channels: 3,
            preset: "tiny-2".to_string(),
            attention: AttentionKind::Location,
            lstm_width: 256,
            attn_dim: 64,
            embed_dim: 64,
            state_clip: decoder::STATE_CLIP,
        }
    }

    pub fn extractor(&self) -> Result<ExtractorConfig> {
        ExtractorConfig::parse(&self.preset)
    }

    /// (rows, columns) of the decoder's attention grid, all views included.
    pub fn feature_grid(&self) -> Result<(usize, usize)> {
        let ex = self.extractor()?;
        let (fh, fw) = ex.out_hw(self.view_h, self.view_w);
        Ok((fh, fw * self.views))
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        let ex = self.extractor()?;
        Ok(DecoderConfig {
            vocab: self.alphabet.len(),
            lstm_width: self.lstm_width,
            attn_dim: self.attn_dim,
            embed_dim: self.embed_dim,
            feat_channels: ex.out_channels(self.channels),
            grid: self.feature_grid()?,
            kind: self.attention,
            state_clip: self.state_clip,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ex = self.extractor()?;
        let min = ex.min_input_side();
        if self.view_h < min || self.view_w < min {
            return Err(Error::invalid(format!(
                "view {}x{} too small for preset {} (needs at least {min}x{min})",
                self.view_h, self.view_w, self.preset
            )));
        }
        if self.t_steps == 0 || self.views == 0 || self.channels == 0 {
            return Err(Error::invalid(
                "t_steps, views and channels must be positive",
            ));
        }
        if self.lstm_width == 0 || self.attn_dim == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("model widths must be positive"));
        }
        Ok(())
    }

    /// Fresh truncated-normal weights (std 0.1, zero biases).
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Result<ParamStore<S>> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).derive(0x6d6f64656c);
        let ex = self.extractor()?;
        ex.init_params(&mut store, self.channels, 0.1, &mut rng);
        self.decoder()?.init_params(&mut store, 0.1, &mut rng);
        Ok(store)
    }

    /// Canonical one-line rendering of every field that affects weights
    /// or decoding. Checkpoints store its hash.
    pub fn config_line(&self) -> String {
        let alpha: String = self
            .alphabet
            .chars()
            .iter()
            .skip(1)
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("");
        format!(
            "alphabet={alpha} t_steps={} views={} view_h={} view_w={} channels={} \
             preset={} attention={} lstm_width={} attn_dim={} embed_dim={} state_clip={}",
            self.t_steps,
            self.views,
            self.view_h,
            self.view_w,
            self.channels,
            self.preset,
            self.attention.name(),
            self.lstm_width,
            self.attn_dim,
            self.embed_dim,
            self.state_clip
        )
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.config_line().as_bytes())
    }
}

/// One sample's views as owned tensors, [view_h, view_w, channels] each.
pub fn check_views<S: Scalar>(cfg: &ModelConfig, views: &[Tensor<S>]) -> Result<()> {
    if views.len() != cfg.views {
        return Err(Error::invalid(format!(
            "expected {} views, got {}",
            cfg.views,
            views.len()
        )));
    }
    let want = vec![cfg.view_h, cfg.view_w, cfg.channels];
    for v in views {
        if v.dims != want {
            return Err(Error::ShapeMismatch {
                op: "check_views",
                lhs: v.dims.clone(),
                rhs: want,
            });
        }
    }
    Ok(())
}

/// Encode views and prepare the attention context, shared by all steps.
/// Also returns the view leaf ids so callers can read input gradients.
pub fn encode_with_inputs<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    cfg: &ModelConfig,
    dcfg: &DecoderConfig,
    views: &[Tensor<S>],
) -> Result<(SeqCtx, Vec<ValueId>)> {
    check_views(cfg, views)?;
    let ex = cfg.extractor()?;
    let ids: Vec<ValueId> = views.iter().map(|v| tape.leaf(v)).collect();
    let fmap = cnn::multi_view_features(tape, bind, &ex, &ids)?;
    Ok((decoder::prepare_sequence(tape, bind, dcfg, fmap)?, ids))
}

/// Encode views and prepare the attention context, shared by all steps.
pub fn encode<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    cfg: &ModelConfig,
    dcfg: &DecoderConfig,
    views: &[Tensor<S>],
) -> Result<SeqCtx> {
    Ok(encode_with_inputs(tape, bind, cfg, dcfg, views)?.0)
}

/// Teacher-forced pass: decode guided by the target and return the mean
/// smoothed cross entropy with the decode artifacts.
pub fn train_loss<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    bind: &mut Bindings<'p, S>,
    cfg: &ModelConfig,
    dcfg: &DecoderConfig,
    views: &[Tensor<S>],
    target: &[usize],
    smoothing: f64,
) -> Result<(ValueId, DecodeResult)> {
    if target.len() != cfg.t_steps {
        return Err(Error::invalid(format!(
            "target has {} symbols, model decodes {}",
            target.len(),
            cfg.t_steps
        )));
    }
    let seq = encode(tape, bind, cfg, dcfg, views)?;
    let result = decoder::decode_sequence(
        tape,
        bind,
        dcfg,
        &seq,
        cfg.t_steps,
        DecodeMode::Guided(target),
    )?;
    let loss = decoder::sequence_loss(tape, &result.steps, target, smoothing)?;
    Ok((loss, result))
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub symbols: Vec<usize>,
    pub text: String,
    /// Attention weights per step over the flattened grid.
    pub alphas: Vec<Vec<f64>>,
}

/// Greedy inference on a forward-only tape.
pub fn infer<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    views: &[Tensor<S>],
) -> Result<Prediction> {
    let dcfg = cfg.decoder()?;
    let mut tape = Tape::inference();
    let mut bind = Bindings::new(params);
    let seq = encode(&mut tape, &mut bind, cfg, &dcfg, views)?;
    let r = decoder::decode_sequence(
        &mut tape,
        &mut bind,
        &dcfg,
        &seq,
        cfg.t_steps,
        DecodeMode::Greedy,
    )?;
    let alphas = r
        .steps
        .iter()
        .map(|s| tape.values(s.alpha).iter().map(|v| v.as_f64()).collect())
        .collect();
    Ok(Prediction {
        text: cfg.alphabet.decode(&r.symbols)?,
        symbols: r.symbols,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn micro_cfg(kind: AttentionKind) -> ModelConfig {
        ModelConfig {
            alphabet: Alphabet::new(['A', 'B', 'C']).unwrap(),
            t_steps: 3,
            views: 2,
            view_h: 8,
            view_w: 8,
            channels: 1,
            preset: "c2,p,c3,p".to_string(),
            attention: kind,
            lstm_width: 4,
            attn_dim: 3,
            embed_dim: 3,
            state_clip: decoder::STATE_CLIP,
        }
    }

    fn random_views(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = Rng::new(seed);
        (0..cfg.views)
            .map(|_| {
                Tensor::from_fn(&[cfg.view_h, cfg.view_w, cfg.channels], |_| {
                    rng.uniform(0.0, 1.0)
                })
            })
            .collect()
    }

    #[test]
    fn desk_grid_is_sixteen_by_sixtyfour() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.feature_grid().unwrap(), (16, 64));
        assert_eq!(cfg.decoder().unwrap().vocab, 29);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = micro_cfg(AttentionKind::Location);
        let a = cfg.init_params::<f64>(7).unwrap();
        let b = cfg.init_params::<f64>(7).unwrap();
        let c = cfg.init_params::<f64>(8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inference_is_bit_identical_across_runs() {
        let cfg = micro_cfg(AttentionKind::Location);
        let params = cfg.init_params::<f64>(1).unwrap();
        let views = random_views(&cfg, 2);
        let p1 = infer(&params, &cfg, &views).unwrap();
        let p2 = infer(&params, &cfg, &views).unwrap();
        assert_eq!(p1.symbols, p2.symbols);
        for (a, b) in p1.alphas.iter().zip(&p2.alphas) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn prediction_has_one_step_per_decode_slot() {
        let cfg = micro_cfg(AttentionKind::Standard);
        let params = cfg.init_params::<f64>(3).unwrap();
        let views = random_views(&cfg, 4);
        let p = infer(&params, &cfg, &views).unwrap();
        assert_eq!(p.symbols.len(), cfg.t_steps);
        assert_eq!(p.alphas.len(), cfg.t_steps);
        let cells = {
            let (i, j) = cfg.feature_grid().unwrap();
            i * j
        };
        for a in &p.alphas {
            assert_eq!(a.len(), cells);
            let s: f64 = a.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(p.symbols.iter().all(|&s| s < cfg.alphabet.len()));
    }

    #[test]
    fn wrong_view_count_or_shape_is_rejected() {
        let cfg = micro_cfg(AttentionKind::Standard);
        let params = cfg.init_params::<f64>(5).unwrap();
        let views = random_views(&cfg, 6);
        assert!(infer(&params, &cfg, &views[..1]).is_err());
        let mut bad = views.clone();
        bad[0] = Tensor::zeros(&[4, 8, 1]);
        assert!(infer(&params, &cfg, &bad).is_err());
    }

    #[test]
    fn too_small_views_for_preset_are_rejected() {
        let mut cfg = micro_cfg(AttentionKind::Standard);
        cfg.view_h = 2;
        cfg.view_w = 2;
        assert!(cfg.init_params::<f64>(0).is_err());
    }

    #[test]
    fn config_hash_tracks_semantic_fields() {
        let a = micro_cfg(AttentionKind::Standard);
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.lstm_width = 5;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.attention = AttentionKind::Location;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    /// End-to-end finite differences through conv, pool, attention and LSTM.
    /// Checks a thinned random subset of coordinates by zeroing none; the
    /// model is small enough to check everything.
    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let cfg = micro_cfg(AttentionKind::Location);
        let store = cfg.init_params::<f64>(11).unwrap();
        let views = random_views(&cfg, 12);
        let dcfg = cfg.decoder().unwrap();
        let names: Vec<String> = store.keys().cloned().collect();
        let mut params: Vec<(String, Tensor<f64>)> =
            store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (i, v) in views.iter().enumerate() {
            params.push((format!("view{i}"), v.clone()));
        }
        let target = [1usize, 2, 0];
        let r = grad_check(&params, 1e-4, |tape, ids| {
            let mut bind = Bindings::new(&store);
            for (name, &id) in names.iter().zip(ids.iter()) {
                bind.preset(name, id);
            }
            let ex = cfg.extractor()?;
            let view_ids = &ids[names.len()..];
            let fmap = cnn::multi_view_features(tape, &mut bind, &ex, view_ids)?;
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
        .unwrap();
        assert!(r.worst_rel_err < 1e-4, "{}", r.summary());
        // relu/pool kinks may exclude a few coordinates but not many
        assert!(
            r.excluded.len() < params.iter().map(|(_, t)| t.numel()).sum::<usize>() / 20,
            "{} exclusions",
            r.excluded.len()
        );
    }
}
