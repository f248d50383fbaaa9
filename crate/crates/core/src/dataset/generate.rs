//! Synthetic multi-view text-scene generator.
//!
//! Each sample is one transcription rendered into V views that share ink and
//! background colors but differ in placement, clutter and (possibly) blur,
//! standing in for photographs of one sign from several angles. Ink stays
//! strictly brighter than background and clutter, so every unblurred view
//! keeps the text legible.

use std::fs;
use std::path::Path;

use super::font;
use super::image::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GenSpec {
    /// Renderable symbols transcriptions are drawn from (no spaces needed;
    /// the 2-line join inserts one).
    pub charset: Vec<char>,
    /// Inclusive per-line glyph count range.
    pub len_range: (usize, usize),
    /// Lines per sample, 1 or 2. Two lines join into one transcription with
    /// a single space.
    pub lines: usize,
    pub views: usize,
    pub view_h: usize,
    pub view_w: usize,
    /// Integer glyph scale: glyphs render at 5k x 7k pixels.
    pub scale: usize,
    /// Background distractor level in [0,1]: rectangle count and pixel noise.
    pub clutter: f64,
    /// Placement spread in [0,1]: fraction of the free area the text block
    /// wanders over, per view.
    pub jitter: f64,
    /// Probability of blurring exactly one view; applies only when views >= 2
    /// so at least one legible copy always survives.
    pub blur_one_view: f64,
    pub blur_sigma: f64,
}

impl GenSpec {
    pub fn desk() -> GenSpec {
        GenSpec {
            charset: ('A'..='Z').chain(['-']).collect(),
            len_range: (2, 5),
            lines: 1,
            views: 4,
            view_h: 64,
            view_w: 64,
            scale: 2,
            clutter: 0.5,
            jitter: 1.0,
            blur_one_view: 0.2,
            blur_sigma: 2.0,
        }
    }

    /// Pixel size of the largest possible text block.
    pub fn block_size(&self) -> (usize, usize) {
        (
            font::block_height(self.lines, self.scale),
            font::line_width(self.len_range.1, self.scale),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.lines == 0 || self.lines > 2 {
            return Err(Error::invalid(format!("line count {} not in {{1,2}}", self.lines)));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::invalid(format!(
                "length range {:?} must satisfy 1 <= lo <= hi",
                self.len_range
            )));
        }
        if self.charset.is_empty() {
            return Err(Error::invalid("empty charset"));
        }
        for c in &self.charset {
            if !font::renderable(*c) {
                return Err(Error::invalid(format!("no glyph for {c:?}")));
            }
        }
        if self.views == 0 || self.scale == 0 {
            return Err(Error::invalid("views and scale must be positive"));
        }
        let (bh, bw) = self.block_size();
        if bw + 2 > self.view_w || bh + 2 > self.view_h {
            return Err(Error::invalid(format!(
                "text block {bh}x{bw} cannot fit a {}x{} view with margin",
                self.view_h, self.view_w
            )));
        }
        for (name, v) in [
            ("clutter", self.clutter),
            ("jitter", self.jitter),
            ("blur_one_view", self.blur_one_view),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::invalid("negative blur sigma"));
        }
        Ok(())
    }
}

/// Glyph rectangle in one view, exclusive upper bounds, indexed by the
/// character's position in the full transcription.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub view: usize,
    pub char_index: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub transcription: String,
    pub views: Vec<Image>,
    pub boxes: Vec<GlyphBox>,
}

fn draw_glyph(img: &mut Image, c: char, y: usize, x: usize, k: usize, ink: &[f32]) {
    if let Some(rows) = font::glyph(c) {
        for (r, row) in rows.iter().enumerate() {
            for col in 0..font::GLYPH_W {
                if row & (1 << (font::GLYPH_W - 1 - col)) != 0 {
                    img.fill_rect(y + r * k, x + col * k, k, k, ink);
                }
            }
        }
    }
}

/// Render one sample. Draw order per view is fixed (background, clutter,
/// text, noise), and blur decisions come last, so the random stream is
/// identical across runs.
pub fn generate_sample(spec: &GenSpec, rng: &mut Rng) -> Sample {
    let k = spec.scale;
    let line_texts: Vec<String> = (0..spec.lines)
        .map(|_| {
            let len = rng.range(spec.len_range.0, spec.len_range.1);
            (0..len).map(|_| spec.charset[rng.below(spec.charset.len())]).collect()
        })
        .collect();
    let transcription = line_texts.join(" ");

    let bg: Vec<f32> = (0..3).map(|_| rng.uniform(0.05, 0.35) as f32).collect();
    let ink: Vec<f32> = (0..3).map(|_| rng.uniform(0.65, 1.0) as f32).collect();

    let block_w = line_texts
        .iter()
        .map(|t| font::line_width(t.chars().count(), k))
        .max()
        .unwrap_or(0);
    let block_h = font::block_height(spec.lines, k);

    let mut views = Vec::with_capacity(spec.views);
    let mut boxes = Vec::new();
    for v in 0..spec.views {
        let mut img = Image::zeros(spec.view_h, spec.view_w, 3);
        img.fill_rect(0, 0, spec.view_h, spec.view_w, &bg);

        let n_rects = (spec.clutter * 6.0).round() as usize;
        for _ in 0..n_rects {
            let rw = rng.range(2, (spec.view_w / 3).max(3));
            let rh = rng.range(2, (spec.view_h / 3).max(3));
            let rx = rng.range(0, spec.view_w - rw);
            let ry = rng.range(0, spec.view_h - rh);
            let color: Vec<f32> = (0..3).map(|_| rng.uniform(0.0, 0.45) as f32).collect();
            img.fill_rect(ry, rx, rh, rw, &color);
        }

        let free_w = spec.view_w - block_w;
        let free_h = spec.view_h - block_h;
        let ox = jittered_origin(free_w, spec.jitter, rng);
        let oy = jittered_origin(free_h, spec.jitter, rng);

        let mut char_index = 0usize;
        for (li, text) in line_texts.iter().enumerate() {
            let lw = font::line_width(text.chars().count(), k);
            let lx = ox + (block_w - lw) / 2;
            let ly = oy + li * (font::GLYPH_H + font::LINE_GAP) * k;
            for (ci, c) in text.chars().enumerate() {
                let gx = lx + ci * font::ADVANCE * k;
                draw_glyph(&mut img, c, ly, gx, k, &ink);
                boxes.push(GlyphBox {
                    view: v,
                    char_index,
                    x0: gx,
                    y0: ly,
                    x1: gx + font::GLYPH_W * k,
                    y1: ly + font::GLYPH_H * k,
                });
                char_index += 1;
            }
            char_index += 1; // the joining space, which leaves no box
        }

        let noise = 0.03 * spec.clutter;
        if noise > 0.0 {
            for px in &mut img.data {
                *px += (rng.gaussian() * noise) as f32;
            }
            img.clamp01();
        }
        views.push(img);
    }

    if spec.views >= 2 && rng.chance(spec.blur_one_view) {
        let target = rng.below(spec.views);
        views[target] = views[target].gaussian_blur(spec.blur_sigma);
    }

    Sample { transcription, views, boxes }
}

fn jittered_origin(free: usize, jitter: f64, rng: &mut Rng) -> usize {
    let center = free as f64 / 2.0;
    let off = rng.uniform(-0.5, 0.5) * jitter * free as f64;
    (center + off).round().clamp(0.0, free as f64) as usize
}

/// Write `n` samples under `dir` in the on-disk layout: `manifest.tsv` rows
/// of id, transcription and view count; `imgs/<id>_v<k>.ppm`;
/// `boxes/<id>.tsv` rows of view, char index and rectangle corners.
pub fn generate(dir: &Path, spec: &GenSpec, n: usize, seed: u64) -> Result<()> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let imgs = dir.join("imgs");
    let boxes_dir = dir.join("boxes");
    fs::create_dir_all(&imgs).map_err(|e| Error::io(&imgs, e))?;
    fs::create_dir_all(&boxes_dir).map_err(|e| Error::io(&boxes_dir, e))?;

    let base = Rng::new(seed);
    let mut manifest = String::new();
    for i in 0..n {
        let id = format!("{i:06}");
        let mut rng = base.derive(i as u64);
        let sample = generate_sample(spec, &mut rng);
        for (v, img) in sample.views.iter().enumerate() {
            img.write_ppm(&imgs.join(format!("{id}_v{v}.ppm")))?;
        }
        let mut btsv = String::new();
        for b in &sample.boxes {
            btsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                b.view, b.char_index, b.x0, b.y0, b.x1, b.y1
            ));
        }
        let bpath = boxes_dir.join(format!("{id}.tsv"));
        fs::write(&bpath, btsv).map_err(|e| Error::io(&bpath, e))?;
        manifest.push_str(&format!("{id}\t{}\t{}\n", sample.transcription, spec.views));
    }
    let mpath = dir.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Alphabet;

    fn read_dir_sorted(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut v: Vec<_> =
            fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    }

    fn tiny_spec() -> GenSpec {
        GenSpec {
            views: 2,
            view_h: 48,
            view_w: 48,
            scale: 1,
            len_range: (2, 4),
            ..GenSpec::desk()
        }
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(d1.path(), &tiny_spec(), 3, 99).unwrap();
        generate(d2.path(), &tiny_spec(), 3, 99).unwrap();
        assert_eq!(
            fs::read(d1.path().join("manifest.tsv")).unwrap(),
            fs::read(d2.path().join("manifest.tsv")).unwrap()
        );
        for (a, b) in read_dir_sorted(&d1.path().join("imgs"))
            .iter()
            .zip(read_dir_sorted(&d2.path().join("imgs")))
        {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        for (a, b) in read_dir_sorted(&d1.path().join("boxes"))
            .iter()
            .zip(read_dir_sorted(&d2.path().join("boxes")))
        {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn second_line_boxes_sit_strictly_below_the_first() {
        let spec = GenSpec { lines: 2, ..tiny_spec() };
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let s = generate_sample(&spec, &mut rng);
            let first_len = s.transcription.split(' ').next().unwrap().chars().count();
            for v in 0..spec.views {
                let l1_max = s
                    .boxes
                    .iter()
                    .filter(|b| b.view == v && b.char_index < first_len)
                    .map(|b| b.y1)
                    .max()
                    .unwrap();
                let l2_min = s
                    .boxes
                    .iter()
                    .filter(|b| b.view == v && b.char_index > first_len)
                    .map(|b| b.y0)
                    .min()
                    .unwrap();
                assert!(l2_min > l1_max);
            }
        }
    }

    #[test]
    fn all_transcriptions_encode_under_the_alphabet() {
        let spec = GenSpec {
            charset: ('A'..='T').collect(), // 20 symbols
            len_range: (1, 8),
            lines: 1,
            view_w: 64,
            view_h: 64,
            scale: 1,
            ..tiny_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &spec, 40, 3).unwrap();
        let alphabet = Alphabet::desk();
        let manifest = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        for line in manifest.lines() {
            let t = line.split('\t').nth(1).unwrap();
            alphabet.encode_padded(t, 12).unwrap();
        }
    }

    #[test]
    fn glyph_boxes_stay_inside_their_view() {
        let spec = GenSpec { lines: 2, jitter: 1.0, ..tiny_spec() };
        let mut rng = Rng::new(11);
        for _ in 0..30 {
            let s = generate_sample(&spec, &mut rng);
            for b in &s.boxes {
                assert!(b.x1 <= spec.view_w && b.y1 <= spec.view_h);
                assert!(b.x0 < b.x1 && b.y0 < b.y1);
            }
        }
    }

    #[test]
    fn blur_hits_exactly_one_view_when_enabled() {
        let clear = GenSpec { views: 3, blur_one_view: 0.0, ..tiny_spec() };
        let blurred = GenSpec { blur_one_view: 1.0, ..clear.clone() };
        let base = Rng::new(17);
        for i in 0..10u64 {
            let a = generate_sample(&clear, &mut base.derive(i));
            let b = generate_sample(&blurred, &mut base.derive(i));
            assert_eq!(a.transcription, b.transcription);
            let differing =
                a.views.iter().zip(&b.views).filter(|(x, y)| x.data != y.data).count();
            assert_eq!(differing, 1);
        }
    }

    #[test]
    fn single_view_samples_are_never_blurred() {
        let clear = GenSpec { views: 1, blur_one_view: 0.0, ..tiny_spec() };
        let blurred = GenSpec { blur_one_view: 1.0, ..clear.clone() };
        let base = Rng::new(23);
        for i in 0..10u64 {
            let a = generate_sample(&clear, &mut base.derive(i));
            let b = generate_sample(&blurred, &mut base.derive(i));
            assert_eq!(a.views[0].data, b.views[0].data);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GenSpec { lines: 3, ..GenSpec::desk() }.validate().is_err());
        assert!(GenSpec { len_range: (0, 4), ..GenSpec::desk() }.validate().is_err());
        assert!(GenSpec { charset: vec!['~'], ..GenSpec::desk() }.validate().is_err());
        assert!(GenSpec { scale: 9, ..GenSpec::desk() }.validate().is_err());
        assert!(GenSpec { blur_one_view: 1.5, ..GenSpec::desk() }.validate().is_err());
        assert!(generate(Path::new("/tmp/x"), &GenSpec::desk(), 0, 1).is_err());
    }
}
