//! Where the model looks: noise-averaged input-gradient saliency for each
//! decoded symbol, nearest-neighbor upsampled attention masks, and red/green
//! overlay renderings of both on top of the input views.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::dataset::Image;
use crate::decoder::{self, DecodeMode};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Prediction};
use crate::params::{Bindings, ParamStore};
use crate::rng::Rng;

/// Default noise scale, as a fraction of the [0,1] pixel range.
pub const NOISE_SIGMA: f64 = 0.05;
pub const NOISE_COPIES: usize = 16;

/// Nonnegative per-pixel intensity map at input resolution, scaled so the
/// largest entry is 1. `peak` keeps the pre-normalization maximum; a peak
/// of zero flags a map that carried no signal at all.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub peak: f64,
}

impl Heatmap {
    pub fn from_raw(h: usize, w: usize, raw: Vec<f64>) -> Result<Heatmap> {
        if raw.len() != h * w {
            return Err(Error::invalid(format!(
                "heatmap {h}x{w} needs {} values, got {}",
                h * w,
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("heatmap entries must be finite and nonnegative"));
        }
        let peak = raw.iter().cloned().fold(0.0f64, f64::max);
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        let values = raw.iter().map(|v| (v * scale) as f32).collect();
        Ok(Heatmap { h, w, values, peak })
    }

    /// True when no gradient or attention mass reached this map.
    pub fn is_flat(&self) -> bool {
        self.peak == 0.0
    }

    /// Sum of the map in original (pre-normalization) units.
    pub fn raw_mass(&self) -> f64 {
        self.values.iter().map(|v| *v as f64).sum::<f64>() * self.peak
    }
}

/// Mean over the map restricted to pixels where `inside` is true, in
/// normalized units. Used to compare mass on and off glyph boxes.
pub fn region_mean(map: &Heatmap, inside: impl Fn(usize, usize) -> bool) -> (f64, f64) {
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..map.h {
        for x in 0..map.w {
            let v = map.values[y * map.w + x] as f64;
            if inside(y, x) {
                in_sum += v;
                in_n += 1;
            } else {
                out_sum += v;
                out_n += 1;
            }
        }
    }
    (
        if in_n > 0 { in_sum / in_n as f64 } else { 0.0 },
        if out_n > 0 { out_sum / out_n as f64 } else { 0.0 },
    )
}

fn perturbed(views: &[Tensor<f32>], sigma: f64, rng: &mut Rng) -> Vec<Tensor<f32>> {
    if sigma == 0.0 {
        return views.to_vec();
    }
    views
        .iter()
        .map(|v| {
            let values = v
                .values
                .iter()
                .map(|x| x + (sigma * rng.gaussian()) as f32)
                .collect();
            Tensor {
                dims: v.dims.clone(),
                values,
                grad: None,
            }
        })
        .collect()
}

/// One noisy copy's contribution: replay the decode with the given symbol
/// history, backprop the step-t logit of the symbol predicted there, and
/// return the per-pixel channel L2 norm of the input gradient per view.
fn gradient_norms(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    views: &[Tensor<f32>],
    symbols: &[usize],
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    let dcfg = cfg.decoder()?;
    let mut tape = Tape::new();
    let mut bind = Bindings::new(params);
    let (seq, input_ids) = model::encode_with_inputs(&mut tape, &mut bind, cfg, &dcfg, views)?;
    let r = decoder::decode_sequence(
        &mut tape,
        &mut bind,
        &dcfg,
        &seq,
        cfg.t_steps,
        DecodeMode::Guided(symbols),
    )?;
    let logit = tape.select_element(r.steps[t - 1].logits, symbols[t - 1])?;
    tape.backward(logit)?;
    let (h, w, c) = (cfg.view_h, cfg.view_w, cfg.channels);
    let mut out = Vec::with_capacity(views.len());
    for id in input_ids {
        let mut norms = vec![0.0f64; h * w];
        if let Some(g) = tape.grad(id) {
            for p in 0..h * w {
                let mut sq = 0.0f64;
                for ch in 0..c {
                    let v = g[p * c + ch] as f64;
                    sq += v * v;
                }
                norms[p] = sq.sqrt();
            }
        }
        out.push(norms);
    }
    Ok(out)
}

/// Saliency of the symbol emitted at step `t` (1-based): the gradient of
/// its pre-softmax logit with respect to each input pixel, channel L2,
/// averaged over Gaussian-perturbed copies of the views, max-normalized
/// per view. A model whose logit ignores the input yields flat maps.
pub fn saliency(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    views: &[Image],
    t: usize,
    sigma: f64,
    copies: usize,
    seed: u64,
) -> Result<Vec<Heatmap>> {
    let tensors: Vec<Tensor<f32>> = views.iter().map(|v| v.to_tensor()).collect();
    let pred = model::infer(params, cfg, &tensors)?;
    saliency_of_history(params, cfg, &tensors, &pred.symbols, t, sigma, copies, seed)
}

/// Saliency with the decode history already fixed, so one greedy pass can
/// serve every step of a sample.
#[allow(clippy::too_many_arguments)]
pub fn saliency_of_history(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    tensors: &[Tensor<f32>],
    symbols: &[usize],
    t: usize,
    sigma: f64,
    copies: usize,
    seed: u64,
) -> Result<Vec<Heatmap>> {
    if t == 0 || t > cfg.t_steps {
        return Err(Error::invalid(format!(
            "step {t} outside decode range [1, {}]",
            cfg.t_steps
        )));
    }
    if copies == 0 {
        return Err(Error::invalid("saliency needs at least one noise copy"));
    }
    if sigma < 0.0 {
        return Err(Error::invalid("negative noise sigma"));
    }
    let root = Rng::new(seed);
    let per_copy: Vec<Result<Vec<Vec<f64>>>> = (0..copies)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let noisy = perturbed(tensors, sigma, &mut rng);
            gradient_norms(params, cfg, &noisy, symbols, t)
        })
        .collect();

    let (h, w) = (cfg.view_h, cfg.view_w);
    let mut sums = vec![vec![0.0f64; h * w]; cfg.views];
    for r in per_copy {
        for (acc, norms) in sums.iter_mut().zip(r?) {
            for (a, n) in acc.iter_mut().zip(norms) {
                *a += n;
            }
        }
    }
    sums.into_iter()
        .map(|mut raw| {
            for v in raw.iter_mut() {
                *v /= copies as f64;
            }
            Heatmap::from_raw(h, w, raw)
        })
        .collect()
}

/// Columns of the concatenated attention grid that belong to view `v`.
pub fn view_alpha(
    alpha: &[f64],
    grid: (usize, usize),
    views: usize,
    v: usize,
) -> Result<Vec<f64>> {
    let (gh, gw) = grid;
    if alpha.len() != gh * gw {
        return Err(Error::invalid(format!(
            "alpha length {} does not match grid {gh}x{gw}",
            alpha.len()
        )));
    }
    if views == 0 || gw % views != 0 || v >= views {
        return Err(Error::invalid(format!(
            "cannot take view {v} of {views} from a {gw}-column grid"
        )));
    }
    let fw = gw / views;
    let mut out = Vec::with_capacity(gh * fw);
    for row in 0..gh {
        let base = row * gw + v * fw;
        out.extend_from_slice(&alpha[base..base + fw]);
    }
    Ok(out)
}

/// Nearest-neighbor block fill of a [gh, gw] grid onto an h x w map: each
/// grid cell paints every pixel that rounds down into it, so cell mass
/// scales by exactly the block area when the ratio is integral.
pub fn upsample_attention(
    alpha: &[f64],
    gh: usize,
    gw: usize,
    h: usize,
    w: usize,
) -> Result<Heatmap> {
    if alpha.len() != gh * gw || gh == 0 || gw == 0 {
        return Err(Error::invalid(format!(
            "alpha length {} does not match grid {gh}x{gw}",
            alpha.len()
        )));
    }
    if h < gh || w < gw {
        return Err(Error::invalid(format!(
            "cannot upsample a {gh}x{gw} grid onto a smaller {h}x{w} map"
        )));
    }
    let mut raw = vec![0.0f64; h * w];
    for y in 0..h {
        let gy = y * gh / h;
        for x in 0..w {
            let gx = x * gw / w;
            raw[y * w + x] = alpha[gy * gw + gx];
        }
    }
    Heatmap::from_raw(h, w, raw)
}

/// Gray base with saliency added to red and attention to green, views laid
/// out side by side, everything clamped to [0,1].
pub fn composite_step(
    views: &[Image],
    sal: &[Heatmap],
    att: &[Heatmap],
) -> Result<Image> {
    if views.is_empty() || views.len() != sal.len() || views.len() != att.len() {
        return Err(Error::invalid(format!(
            "{} views with {} saliency and {} attention maps",
            views.len(),
            sal.len(),
            att.len()
        )));
    }
    let h = views[0].h;
    for (v, (s, a)) in views.iter().zip(sal.iter().zip(att)) {
        if v.h != h || s.h != v.h || s.w != v.w || a.h != v.h || a.w != v.w {
            return Err(Error::invalid("view and map resolutions disagree"));
        }
    }
    let total_w: usize = views.iter().map(|v| v.w).sum();
    let mut out = Image::zeros(h, total_w, 3);
    let mut x_off = 0usize;
    for (v, (s, a)) in views.iter().zip(sal.iter().zip(att)) {
        for y in 0..v.h {
            for x in 0..v.w {
                let mut gray = 0.0f32;
                for ch in 0..v.c {
                    gray += v.get(y, x, ch);
                }
                gray /= v.c as f32;
                let r = (gray + s.values[y * s.w + x]).clamp(0.0, 1.0);
                let g = (gray + a.values[y * a.w + x]).clamp(0.0, 1.0);
                out.set(y, x_off + x, 0, r);
                out.set(y, x_off + x, 1, g);
                out.set(y, x_off + x, 2, gray);
            }
        }
        x_off += v.w;
    }
    Ok(out)
}

fn stack_vertical(rows: &[Image]) -> Result<Image> {
    let (w, c) = (rows[0].w, rows[0].c);
    if rows.iter().any(|r| r.w != w || r.c != c) {
        return Err(Error::invalid("sheet rows must share width and channels"));
    }
    let h: usize = rows.iter().map(|r| r.h).sum();
    let mut out = Image::zeros(h, w, c);
    let mut pos = 0usize;
    for r in rows {
        out.data[pos..pos + r.data.len()].copy_from_slice(&r.data);
        pos += r.data.len();
    }
    Ok(out)
}

/// Write one overlay PPM per step plus a vertical contact sheet. Steps are
/// numbered from 1 in the file names.
pub fn render_overlays(
    out_dir: &Path,
    sample_id: &str,
    views: &[Image],
    per_step_sal: &[Vec<Heatmap>],
    per_step_att: &[Vec<Heatmap>],
) -> Result<Vec<PathBuf>> {
    if per_step_sal.is_empty() || per_step_sal.len() != per_step_att.len() {
        return Err(Error::invalid(format!(
            "{} saliency steps vs {} attention steps",
            per_step_sal.len(),
            per_step_att.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut composites = Vec::new();
    for (i, (sal, att)) in per_step_sal.iter().zip(per_step_att).enumerate() {
        let img = composite_step(views, sal, att)?;
        let path = out_dir.join(format!("{sample_id}_t{}.ppm", i + 1));
        img.write_ppm(&path)?;
        files.push(path);
        composites.push(img);
    }
    let sheet = stack_vertical(&composites)?;
    let sheet_path = out_dir.join(format!("{sample_id}_sheet.ppm"));
    sheet.write_ppm(&sheet_path)?;
    files.push(sheet_path);
    Ok(files)
}

pub struct VizReport {
    pub prediction: Prediction,
    pub files: Vec<PathBuf>,
}

/// Decode one sample and render saliency plus attention overlays for every
/// step. The same noise seed serves each step, so perturbations are
/// comparable across the sequence.
#[allow(clippy::too_many_arguments)]
pub fn visualize_sample(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    views: &[Image],
    sample_id: &str,
    out_dir: &Path,
    sigma: f64,
    copies: usize,
    seed: u64,
) -> Result<VizReport> {
    let tensors: Vec<Tensor<f32>> = views.iter().map(|v| v.to_tensor()).collect();
    let pred = model::infer(params, cfg, &tensors)?;
    let (gh, gw) = cfg.feature_grid()?;
    let mut per_step_sal = Vec::with_capacity(cfg.t_steps);
    let mut per_step_att = Vec::with_capacity(cfg.t_steps);
    for t in 1..=cfg.t_steps {
        per_step_sal.push(saliency_of_history(
            params,
            cfg,
            &tensors,
            &pred.symbols,
            t,
            sigma,
            copies,
            seed,
        )?);
        let alpha = &pred.alphas[t - 1];
        let mut att = Vec::with_capacity(cfg.views);
        for v in 0..cfg.views {
            let slice = view_alpha(alpha, (gh, gw), cfg.views, v)?;
            att.push(upsample_attention(
                &slice,
                gh,
                gw / cfg.views,
                cfg.view_h,
                cfg.view_w,
            )?);
        }
        per_step_att.push(att);
    }
    let files = render_overlays(out_dir, sample_id, views, &per_step_sal, &per_step_att)?;
    Ok(VizReport {
        prediction: pred,
        files,
    })
}
