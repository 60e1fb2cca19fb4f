//! Synthetic cross-modal benchmark: two colored rectangles on gray, the
//! caption names exactly one of them, the mask covers the named one.
//!
//! The salient blob is not inferable from pixels alone (which blob is named
//! is a fair coin), so any model that beats the text-free baseline must be
//! using the caption.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{pnm, sample_rng, ManifestLine, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Color names with their RGB fill values. All names are in the bundled
/// color lexicon.
pub const COLOR_PALETTE: &[(&str, [u8; 3])] = &[
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [50, 80, 220]),
    ("yellow", [230, 210, 50]),
    ("purple", [150, 60, 200]),
    ("orange", [240, 140, 40]),
    ("pink", [240, 130, 190]),
    ("brown", [130, 85, 45]),
];

const BACKGROUND: f64 = 128.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichBlob {
    A,
    B,
}

/// An axis-aligned rectangle with a palette color.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub color: usize, // palette index
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Blob {
    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }
}

/// One generated scene: two disjoint blobs of distinct colors, one of them
/// named by the caption.
#[derive(Debug, Clone)]
pub struct Scene {
    pub size: usize,
    pub blob_a: Blob,
    pub blob_b: Blob,
    pub named: WhichBlob,
}

impl Scene {
    /// Sample a scene. Blob A lands in the left half, blob B in the right
    /// half; colors always differ; the named blob is a fair coin. Draw
    /// order: colors, blob A geometry, blob B geometry, coin.
    pub fn sample(size: usize, rng: &mut Rng) -> Scene {
        assert!(size >= 16, "synthetic scenes need size >= 16");
        let n_colors = COLOR_PALETTE.len();
        let color_a = rng.below(n_colors);
        let mut color_b = rng.below(n_colors - 1);
        if color_b >= color_a {
            color_b += 1;
        }
        let half = size / 2;
        let mut blob = |color: usize, col_lo: usize, col_hi: usize| {
            let lo = (size / 4).max(2);
            let hi = (2 * size / 5).max(lo + 1);
            let height = lo + rng.below(hi - lo + 1);
            let width = lo + rng.below(hi - lo + 1);
            let top = 1 + rng.below(size - height - 1);
            let left = col_lo + rng.below(col_hi - width - col_lo);
            Blob {
                color,
                top,
                left,
                height,
                width,
            }
        };
        let blob_a = blob(color_a, 1, half);
        let blob_b = blob(color_b, half + 1, size - 1);
        let named = if rng.below(2) == 0 {
            WhichBlob::A
        } else {
            WhichBlob::B
        };
        Scene {
            size,
            blob_a,
            blob_b,
            named,
        }
    }

    pub fn blob(&self, which: WhichBlob) -> &Blob {
        match which {
            WhichBlob::A => &self.blob_a,
            WhichBlob::B => &self.blob_b,
        }
    }

    pub fn named_blob(&self) -> &Blob {
        self.blob(self.named)
    }

    pub fn other_blob(&self) -> &Blob {
        self.blob(match self.named {
            WhichBlob::A => WhichBlob::B,
            WhichBlob::B => WhichBlob::A,
        })
    }

    pub fn caption(&self) -> String {
        format!("the {} object", COLOR_PALETTE[self.named_blob().color].0)
    }

    /// Caption that names the other blob instead.
    pub fn swapped_caption(&self) -> String {
        format!("the {} object", COLOR_PALETTE[self.other_blob().color].0)
    }

    /// `[3,S,S]` image: gray background, both blobs filled.
    pub fn render_image(&self) -> Tensor {
        let s = self.size;
        let mut data = vec![BACKGROUND; 3 * s * s];
        for blob in [&self.blob_a, &self.blob_b] {
            let rgb = COLOR_PALETTE[blob.color].1;
            for r in blob.top..blob.top + blob.height {
                for c in blob.left..blob.left + blob.width {
                    for ch in 0..3 {
                        data[(ch * s + r) * s + c] = f64::from(rgb[ch]) / 255.0;
                    }
                }
            }
        }
        Tensor::from_vec(&[3, s, s], data).expect("scene image is well-formed")
    }

    /// `[S,S]` binary mask covering one blob.
    pub fn render_mask(&self, which: WhichBlob) -> Tensor {
        let s = self.size;
        let blob = self.blob(which);
        let mut data = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                if blob.contains(r, c) {
                    data[r * s + c] = 1.0;
                }
            }
        }
        Tensor::from_vec(&[s, s], data).expect("scene mask is well-formed")
    }

    /// The ground-truth mask (named blob).
    pub fn render_named_mask(&self) -> Tensor {
        self.render_mask(self.named)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
}

/// Generate the synthetic dataset under `out_dir` (images/, masks/,
/// manifest.jsonl) and return the validated records.
///
/// Each sample's scene draws from the stream `seed XOR fnv1a64(id)`, so
/// regeneration with the same config is byte-identical and insertion order
/// does not matter.
pub fn synth_crossmodal(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    if cfg.n_train + cfg.n_test == 0 {
        return Err(Error::Usage("synthetic dataset needs at least one sample".into()));
    }
    if cfg.size < 16 {
        return Err(Error::Validation("synthetic size must be at least 16".into()));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;

    let total = cfg.n_train + cfg.n_test;
    let mut lines = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < cfg.n_train {
            Split::Train
        } else {
            Split::Test
        };
        let id = format!("synth-{:05}", i);
        let mut rng = sample_rng(cfg.seed, &id);
        let scene = Scene::sample(cfg.size, &mut rng);
        pnm::write_raster(&images.join(format!("{}.ppm", id)), &scene.render_image())?;
        pnm::write_raster(&masks.join(format!("{}.pgm", id)), &scene.render_named_mask())?;
        lines.push(ManifestLine {
            id: id.clone(),
            image: format!("images/{}.ppm", id),
            mask: format!("masks/{}.pgm", id),
            caption: scene.caption(),
            split,
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    super::write_manifest(&manifest, &lines)?;
    super::load_manifest(&manifest)
}
