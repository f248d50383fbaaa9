//! On-disk dataset access: manifest parsing, split hashing, cached samples
//! and shuffled augmented batches.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::generate::GlyphBox;
use super::image::{augment_view, Image};
use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Hash-based split assignment: FNV-1a of the id, mod 100, with 80/10/10
/// bands. Stable across runs and machines by construction.
pub fn split_of(id: &str) -> Split {
    match fnv1a64(id.as_bytes()) % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub transcription: String,
    pub views: usize,
    /// 1-based line in manifest.tsv, kept for error reporting.
    pub line: usize,
}

#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    /// Read the manifest and keep entries of the requested split (all when
    /// None).
    pub fn open(root: &Path, split: Option<Split>) -> Result<Dataset> {
        let mpath = root.join("manifest.tsv");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let bad = |msg: String| Error::Parse { path: mpath.clone(), line: i + 1, msg };
            let id = parts.next().filter(|s| !s.is_empty());
            let transcription = parts.next();
            let views = parts.next().and_then(|v| v.parse::<usize>().ok());
            let (id, transcription, views) = match (id, transcription, views) {
                (Some(a), Some(b), Some(c)) if c >= 1 => (a, b, c),
                _ => return Err(bad(format!("malformed manifest row {line:?}"))),
            };
            if parts.next().is_some() {
                return Err(bad("trailing fields in manifest row".to_string()));
            }
            if split.is_none() || split == Some(split_of(id)) {
                entries.push(ManifestEntry {
                    id: id.to_string(),
                    transcription: transcription.to_string(),
                    views,
                    line: i + 1,
                });
            }
        }
        Ok(Dataset { root: root.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load every view image of one entry; a missing or unreadable file is
    /// reported against the entry's manifest line.
    pub fn load_views(&self, entry: &ManifestEntry) -> Result<Vec<Image>> {
        let mut views = Vec::with_capacity(entry.views);
        for v in 0..entry.views {
            let path = self.root.join("imgs").join(format!("{}_v{v}.ppm", entry.id));
            let img = Image::read_ppm(&path).map_err(|e| Error::Parse {
                path: self.root.join("manifest.tsv"),
                line: entry.line,
                msg: format!("view image {}: {e}", path.display()),
            })?;
            views.push(img);
        }
        Ok(views)
    }

    /// Load the generator's glyph rectangles for one entry. Only generated
    /// datasets carry them; an absent file is an error, not an empty list,
    /// so callers cannot silently evaluate against nothing.
    pub fn load_boxes(&self, entry: &ManifestEntry) -> Result<Vec<GlyphBox>> {
        let path = self.root.join("boxes").join(format!("{}.tsv", entry.id));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut boxes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    msg: format!("bad box field {s:?}"),
                })
            };
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    msg: format!("expected 6 box fields, got {}", fields.len()),
                });
            }
            boxes.push(GlyphBox {
                view: parse(fields[0])?,
                char_index: parse(fields[1])?,
                x0: parse(fields[2])?,
                y0: parse(fields[3])?,
                x1: parse(fields[4])?,
                y1: parse(fields[5])?,
            });
        }
        Ok(boxes)
    }
}

struct CachedSample {
    /// Views kept quantized to bytes; decoded per use. (h, w, pixels).
    views: Vec<(usize, usize, Vec<u8>)>,
    target: Vec<usize>,
}

/// In-memory dataset ready for training: all views cached as bytes, all
/// transcriptions encoded to padded symbol sequences.
pub struct Loader {
    pub dataset: Dataset,
    cache: Vec<CachedSample>,
}

/// One training batch: per-sample view stacks plus padded targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub views: Vec<Vec<Image>>,
    pub targets: Vec<Vec<usize>>,
}

impl Loader {
    pub fn new(dataset: Dataset, alphabet: &Alphabet, t_steps: usize) -> Result<Loader> {
        let mut cache = Vec::with_capacity(dataset.len());
        for entry in &dataset.entries {
            let views = dataset
                .load_views(entry)?
                .iter()
                .map(|img| (img.h, img.w, img.to_bytes()))
                .collect();
            let target =
                alphabet.encode_padded(&entry.transcription, t_steps).map_err(|e| {
                    Error::Parse {
                        path: dataset.root.join("manifest.tsv"),
                        line: entry.line,
                        msg: e.to_string(),
                    }
                })?;
            cache.push(CachedSample { views, target });
        }
        Ok(Loader { dataset, cache })
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn entry(&self, i: usize) -> &ManifestEntry {
        &self.dataset.entries[i]
    }

    pub fn target(&self, i: usize) -> &[usize] {
        &self.cache[i].target
    }

    pub fn views(&self, i: usize) -> Vec<Image> {
        self.cache[i]
            .views
            .iter()
            .map(|(h, w, bytes)| Image::from_bytes(*h, *w, 3, bytes).expect("cache consistent"))
            .collect()
    }

    /// Shuffled sample order for one epoch.
    pub fn epoch_order(&self, rng: &mut Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        order
    }

    /// Assemble a batch. With `augment`, each view passes through the crop,
    /// resize and photometric pipeline under a stream derived from the
    /// sample index, so results do not depend on worker scheduling.
    pub fn batch(&self, indices: &[usize], augment: Option<Rng>) -> Batch {
        let views: Vec<Vec<Image>> = indices
            .par_iter()
            .map(|&i| {
                let mut vs = self.views(i);
                if let Some(base) = &augment {
                    let mut rng = base.derive(i as u64);
                    for v in &mut vs {
                        *v = augment_view(v, &mut rng);
                    }
                }
                vs
            })
            .collect();
        Batch {
            indices: indices.to_vec(),
            views,
            targets: indices.iter().map(|&i| self.cache[i].target.clone()).collect(),
        }
    }
}
