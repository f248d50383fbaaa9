//! Depth sweep: train the same model under extractors of increasing depth,
//! then report accuracy and single-image latency per preset so the
//! speed/accuracy trade-off is visible in one table.

use std::time::Instant;

use crate::autodiff::Tensor;
use crate::dataset::Loader;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::trainer::{self, TrainConfig};

pub const WARMUP_RUNS: usize = 10;
pub const TIMED_RUNS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub preset: String,
    /// Per-view feature grid and channel count.
    pub fh: usize,
    pub fw: usize,
    pub fc: usize,
    /// Conv-block count.
    pub depth: usize,
    /// Receptive field side in input pixels.
    pub rf: usize,
    pub acc: f64,
    pub ms_per_image: f64,
}

/// Median wall time of one full decode of a single sample, in
/// milliseconds, after discarding warmup runs.
pub fn time_inference(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    views: &[Tensor<f32>],
    warmup: usize,
    timed: usize,
) -> Result<f64> {
    if timed == 0 {
        return Err(Error::invalid("timing needs at least one measured run"));
    }
    for _ in 0..warmup {
        model::infer(params, cfg, views)?;
    }
    let mut samples = Vec::with_capacity(timed);
    for _ in 0..timed {
        let t0 = Instant::now();
        model::infer(params, cfg, views)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let mid = samples.len() / 2;
    Ok(if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2.0
    })
}

/// Reject presets whose per-view grid collapses below 2x2 before any
/// training time is spent on them.
pub fn check_presets(base: &ModelConfig, presets: &[String]) -> Result<()> {
    if presets.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two presets"));
    }
    for p in presets {
        let mut cfg = base.clone();
        cfg.preset = p.clone();
        let ex = cfg.extractor()?;
        let (fh, fw) = ex.out_hw(cfg.view_h, cfg.view_w);
        if fh < 2 || fw < 2 {
            return Err(Error::invalid(format!(
                "preset {p} leaves a {fh}x{fw} grid on {}x{} views (need at least 2x2)",
                cfg.view_h, cfg.view_w
            )));
        }
    }
    Ok(())
}

/// Train one model per preset under identical seeds and schedules, then
/// evaluate accuracy and median single-image latency. Presets run
/// sequentially so timings do not contend with each other. Rows come back
/// sorted by depth.
pub fn run_sweep(
    base: &ModelConfig,
    tcfg: &TrainConfig,
    presets: &[String],
    train_data: &Loader,
    eval_data: &Loader,
    warmup: usize,
    timed: usize,
) -> Result<Vec<SweepRow>> {
    check_presets(base, presets)?;
    if eval_data.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let mut rows = Vec::with_capacity(presets.len());
    for p in presets {
        let mut cfg = base.clone();
        cfg.preset = p.clone();
        let out = trainer::train(&cfg, tcfg, train_data, eval_data)?;
        let report =
            trainer::evaluate(&cfg, out.state.infer_params(false), eval_data, tcfg.label_smoothing)?;
        let probe: Vec<Tensor<f32>> =
            eval_data.views(0).iter().map(|v| v.to_tensor()).collect();
        let ms = time_inference(out.state.infer_params(false), &cfg, &probe, warmup, timed)?;
        let ex = cfg.extractor()?;
        let (fh, fw) = ex.out_hw(cfg.view_h, cfg.view_w);
        rows.push(SweepRow {
            preset: p.clone(),
            fh,
            fw,
            fc: ex.out_channels(cfg.channels),
            depth: ex.conv_count(),
            rf: ex.receptive_field(),
            acc: report.accuracy,
            ms_per_image: ms,
        });
    }
    rows.sort_by(|a, b| a.depth.cmp(&b.depth));
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("preset,fh,fw,fc,depth,rf,acc,ms_per_image\n");
    for r in rows {
        // Custom layer lists contain commas, so the name field gets
        // standard CSV quoting when needed.
        let name = if r.preset.contains(',') || r.preset.contains('"') {
            format!("\"{}\"", r.preset.replace('"', "\"\""))
        } else {
            r.preset.clone()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            name, r.fh, r.fw, r.fc, r.depth, r.rf, r.acc, r.ms_per_image
        ));
    }
    out
}

/// Accuracy and latency against extractor depth as a self-contained SVG:
/// accuracy on the left axis, ms/image on the right, one point per preset.
pub fn sweep_curve_svg(rows: &[SweepRow]) -> Result<String> {
    if rows.len() < 2 {
        return Err(Error::invalid("a curve needs at least two presets"));
    }
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 60.0, 40.0, 60.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let depths: Vec<f64> = rows.iter().map(|r| r.depth as f64).collect();
    let (d_lo, d_hi) = (
        depths.iter().cloned().fold(f64::INFINITY, f64::min),
        depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let d_span = (d_hi - d_lo).max(1.0);
    let ms_hi = rows.iter().map(|r| r.ms_per_image).fold(0.0, f64::max).max(1e-9);
    let x = |d: f64| ml + (d - d_lo) / d_span * pw;
    let y_acc = |a: f64| mt + (1.0 - a.clamp(0.0, 1.0)) * ph;
    let y_ms = |m: f64| mt + (1.0 - m / ms_hi) * ph;

    let polyline = |pts: &[(f64, f64)], color: &str| {
        let coords: Vec<String> = pts.iter().map(|(px, py)| format!("{px:.1},{py:.1}")).collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        )
    };
    let acc_pts: Vec<(f64, f64)> = rows.iter().map(|r| (x(r.depth as f64), y_acc(r.acc))).collect();
    let ms_pts: Vec<(f64, f64)> =
        rows.iter().map(|r| (x(r.depth as f64), y_ms(r.ms_per_image))).collect();

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{0}\" x2=\"{}\" y2=\"{0}\" stroke=\"black\"/>\n",
        mt + ph,
        w - mr
    ));
    svg.push_str(&polyline(&acc_pts, "#1a6fb4"));
    svg.push_str(&polyline(&ms_pts, "#c04a4a"));
    for (r, (px, py)) in rows.iter().zip(&acc_pts) {
        svg.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"#1a6fb4\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            mt + ph + 16.0,
            r.preset.replace('"', ""),
        ));
    }
    for (px, py) in &ms_pts {
        svg.push_str(&format!("<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"#c04a4a\"/>\n"));
    }
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{:.1}\" fill=\"#1a6fb4\">accuracy (0..1)</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" fill=\"#c04a4a\" text-anchor=\"end\">ms/image (0..{ms_hi:.2})</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">extractor depth (conv blocks)</text>\n",
        mt - 12.0,
        w - mr,
        mt - 12.0,
        ml + pw / 2.0,
        h - 12.0,
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}
