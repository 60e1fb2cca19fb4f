//! Dataset manifests, augmentation, caption statistics, and the synthetic
//! cross-modal benchmark generator.

pub mod pnm;
mod synth;

pub use synth::{synth_crossmodal, Blob, Scene, SynthConfig, WhichBlob, COLOR_PALETTE};

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{color_lexicon, tokenize, Lexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One dataset item. Paths are resolved against the manifest location at
/// load time.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub caption: String,
    pub split: Split,
}

impl SampleRecord {
    pub fn load_image(&self) -> Result<Tensor> {
        pnm::read_ppm(&self.image_path)
    }

    /// Load the `[H,W]` binary mask; storage values must be 0 or 255.
    pub fn load_mask(&self) -> Result<Tensor> {
        let mask = pnm::read_pgm(&self.mask_path)?;
        if !mask.data().iter().all(|v| *v == 0.0 || *v == 1.0) {
            return Err(Error::Validation(format!(
                "mask {} contains values other than 0 and 255",
                self.mask_path.display()
            )));
        }
        Ok(mask)
    }
}

/// The JSONL line layout of a manifest.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub caption: String,
    pub split: Split,
}

/// Load and fully validate a JSONL manifest: line syntax, duplicate ids,
/// referenced files, matching image/mask sizes, binary mask values.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let content = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen: HashSet<String> = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::DuplicateId(parsed.id));
        }
        let record = SampleRecord {
            id: parsed.id,
            image_path: base.join(&parsed.image),
            mask_path: base.join(&parsed.mask),
            caption: parsed.caption,
            split: parsed.split,
        };
        let image = record.load_image().map_err(|e| Error::Manifest {
            line: lineno,
            message: format!("sample {:?}: {}", record.id, e),
        })?;
        let mask = record.load_mask().map_err(|e| Error::Manifest {
            line: lineno,
            message: format!("sample {:?}: {}", record.id, e),
        })?;
        if image.shape()[1..] != mask.shape()[..] {
            return Err(Error::Manifest {
                line: lineno,
                message: format!(
                    "sample {:?}: image is {}x{} but mask is {}x{}",
                    record.id,
                    image.shape()[1],
                    image.shape()[2],
                    mask.shape()[0],
                    mask.shape()[1]
                ),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Write manifest lines as JSONL.
pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Augmentation settings. The crop ratio default mirrors the 320 -> 288
/// protocol; toy runs override it so the cropped side stays divisible by
/// the network's pooling factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub contrast_range: [f64; 2],
    pub crop_ratio: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            contrast_range: [0.75, 1.25],
            crop_ratio: 0.9, // 288/320
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Validation("hflip_prob must be in [0,1]".into()));
        }
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::Validation("crop_ratio must be in (0,1]".into()));
        }
        if self.contrast_range[0] > self.contrast_range[1] {
            return Err(Error::Validation("contrast range is inverted".into()));
        }
        Ok(())
    }

    /// Side length after cropping a square of side `s`.
    pub fn crop_side(&self, s: usize) -> usize {
        (self.crop_ratio * s as f64).floor() as usize
    }
}

fn flip_h(t: &Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("augment tensors are rank 2 or 3"),
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for r in 0..h {
            for x in 0..w {
                out[(ch * h + r) * w + x] = src[(ch * h + r) * w + (w - 1 - x)];
            }
        }
    }
    drop(src);
    Tensor::from_vec(&shape, out).expect("flip preserves shape")
}

fn crop(t: &Tensor, top: usize, left: usize, side: usize) -> Tensor {
    let shape = t.shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("augment tensors are rank 2 or 3"),
    };
    assert!(top + side <= h && left + side <= w);
    let src = t.data();
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for r in 0..side {
            let row = (ch * h + top + r) * w + left;
            out.extend_from_slice(&src[row..row + side]);
        }
    }
    drop(src);
    let new_shape: Vec<usize> = if shape.len() == 2 {
        vec![side, side]
    } else {
        vec![c, side, side]
    };
    Tensor::from_vec(&new_shape, out).expect("crop output is well-formed")
}

fn contrast(t: &Tensor, c: f64) -> Tensor {
    let out = t
        .data()
        .iter()
        .map(|v| (0.5 + c * (v - 0.5)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(t.shape(), out).expect("contrast preserves shape")
}

/// Apply the training augmentations to a square image/mask pair.
///
/// Draw order from `rng` is fixed: flip coin, contrast factor, crop row
/// offset, crop column offset. The flip and crop are applied jointly to the
/// image and the mask; the contrast (centered at 0.5, clamped to [0,1])
/// touches the image only. Captions are never modified.
pub fn augment(
    image: &Tensor,
    mask: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok((image.clone(), mask.clone()));
    }
    let s = image.shape()[1];
    if image.rank() != 3 || image.shape()[2] != s || mask.shape() != [s, s] {
        return Err(Error::Shape {
            op: "augment",
            detail: format!(
                "need a square [C,S,S] image with [S,S] mask, got {:?} and {:?}",
                image.shape(),
                mask.shape()
            ),
        });
    }

    let mut img = image.clone();
    let mut msk = mask.clone();

    if rng.next_f64() < cfg.hflip_prob {
        img = flip_h(&img);
        msk = flip_h(&msk);
    }

    let c = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1]);
    img = contrast(&img, c);

    let side = cfg.crop_side(s);
    let top = rng.below(s - side + 1);
    let left = rng.below(s - side + 1);
    img = crop(&img, top, left, side);
    msk = crop(&msk, top, left, side);

    Ok((img, msk))
}

/// Histograms of caption length and per-caption color-word counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub length_histogram: BTreeMap<usize, u64>,
    pub color_word_histogram: BTreeMap<usize, u64>,
    pub mean_length: f64,
    pub mean_color_words: f64,
}

/// Tokenize every caption and count lengths and color words (using the
/// bundled color lexicon).
pub fn caption_stats(records: &[SampleRecord]) -> CaptionStats {
    caption_stats_with_lexicon(records, &color_lexicon())
}

pub fn caption_stats_with_lexicon(records: &[SampleRecord], colors: &Lexicon) -> CaptionStats {
    let mut length_histogram: BTreeMap<usize, u64> = BTreeMap::new();
    let mut color_word_histogram: BTreeMap<usize, u64> = BTreeMap::new();
    let mut total_len: u64 = 0;
    let mut total_colors: u64 = 0;
    for r in records {
        let tokens = tokenize(&r.caption);
        let n_colors = tokens.iter().filter(|t| colors.contains(t)).count();
        *length_histogram.entry(tokens.len()).or_insert(0) += 1;
        *color_word_histogram.entry(n_colors).or_insert(0) += 1;
        total_len += tokens.len() as u64;
        total_colors += n_colors as u64;
    }
    let n = records.len() as f64;
    CaptionStats {
        length_histogram,
        color_word_histogram,
        mean_length: if records.is_empty() { 0.0 } else { total_len as f64 / n },
        mean_color_words: if records.is_empty() { 0.0 } else { total_colors as f64 / n },
    }
}

impl CaptionStats {
    /// CSV with one `kind,value,count` row per histogram bucket.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,value,count\n");
        for (len, count) in &self.length_histogram {
            out.push_str(&format!("caption_length,{},{}\n", len, count));
        }
        for (colors, count) in &self.color_word_histogram {
            out.push_str(&format!("color_words,{},{}\n", colors, count));
        }
        out
    }
}

/// The documented per-sample stream: `global_seed XOR fnv1a64(id)`.
/// Training extends the global seed per epoch before applying this.
pub fn sample_rng(global_seed: u64, id: &str) -> Rng {
    Rng::derive(global_seed, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn write_fixture(dir: &Path) -> PathBuf {
        let img = Tensor::full(&[3, 2, 2], 0.5);
        let mask = Tensor::from_vec(&[2, 2], vec![0., 1., 1., 0.]).unwrap();
        pnm::write_raster(&dir.join("a.ppm"), &img).unwrap();
        pnm::write_raster(&dir.join("a.pgm"), &mask).unwrap();
        pnm::write_raster(&dir.join("b.ppm"), &img).unwrap();
        pnm::write_raster(&dir.join("b.pgm"), &mask).unwrap();
        let manifest = dir.join("manifest.jsonl");
        let lines = vec![
            ManifestLine {
                id: "a".into(),
                image: "a.ppm".into(),
                mask: "a.pgm".into(),
                caption: "a red bird".into(),
                split: Split::Train,
            },
            ManifestLine {
                id: "b".into(),
                image: "b.ppm".into(),
                mask: "b.pgm".into(),
                caption: "two white dogs on grass".into(),
                split: Split::Test,
            },
        ];
        write_manifest(&manifest, &lines).unwrap();
        manifest
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path());
        let records = load_manifest(&manifest).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, "a");
        assert_eq!(records[0].split, Split::Train);
        assert_eq!(records[1].caption, "two white dogs on grass");
    }

    #[test]
    fn manifest_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path());
        let mut content = std::fs::read_to_string(&manifest).unwrap();
        content = content.replace("\"id\":\"b\"", "\"id\":\"a\"");
        std::fs::write(&manifest, content).unwrap();
        assert!(matches!(
            load_manifest(&manifest),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn manifest_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path());
        let bigger = Tensor::from_vec(&[3, 3], vec![0.0; 9]).unwrap();
        pnm::write_raster(&dir.path().join("b.pgm"), &bigger).unwrap();
        assert!(matches!(
            load_manifest(&manifest),
            Err(Error::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path());
        std::fs::remove_file(dir.path().join("a.ppm")).unwrap();
        assert!(matches!(
            load_manifest(&manifest),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_non_binary_mask() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path());
        let gray = Tensor::full(&[2, 2], 0.5);
        pnm::write_raster(&dir.path().join("a.pgm"), &gray).unwrap();
        assert!(load_manifest(&manifest).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = Rng::new(1);
        let img = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let mask = Tensor::from_vec(
            &[4, 4],
            (0..16).map(|_| f64::from(rng.next_f64() > 0.5)).collect(),
        )
        .unwrap();
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            contrast_range: [1.0, 1.0],
            crop_ratio: 1.0,
            enabled: true,
        };
        let (i1, m1) = augment(&img, &mask, &cfg, &mut Rng::new(9)).unwrap();
        let (i2, m2) = augment(&i1, &m1, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(i2.to_vec(), img.to_vec());
        assert_eq!(m2.to_vec(), mask.to_vec());
    }

    #[test]
    fn flip_maps_columns() {
        let img = Tensor::from_vec(&[3, 1, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let flipped = flip_h(&img);
        assert_eq!(flipped.to_vec(), vec![2., 1., 4., 3., 6., 5.]);
    }

    #[test]
    fn contrast_identity_factor() {
        let mut rng = Rng::new(2);
        let img = Tensor::uniform(&[3, 2, 2], 0.0, 1.0, &mut rng);
        assert_eq!(contrast(&img, 1.0).to_vec(), img.to_vec());
    }

    #[test]
    fn crop_side_matches_protocol() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.crop_side(320), 288);
    }

    #[test]
    fn augment_preserves_binary_masks() {
        let mut rng = Rng::new(3);
        let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let mask = Tensor::from_vec(
            &[8, 8],
            (0..64).map(|_| f64::from(rng.next_f64() > 0.5)).collect(),
        )
        .unwrap();
        let cfg = AugmentConfig {
            crop_ratio: 0.75,
            ..AugmentConfig::default()
        };
        for seed in 0..20 {
            let (i, m) = augment(&img, &mask, &cfg, &mut Rng::new(seed)).unwrap();
            assert!(m.to_vec().iter().all(|v| *v == 0.0 || *v == 1.0));
            assert_eq!(i.shape(), &[3, 6, 6]);
            assert_eq!(m.shape(), &[6, 6]);
        }
    }

    #[test]
    fn caption_stats_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path());
        let records = load_manifest(&manifest).unwrap();
        let stats = caption_stats(&records);
        assert_eq!(stats.length_histogram.get(&3), Some(&1));
        assert_eq!(stats.length_histogram.get(&5), Some(&1));
        assert_eq!(stats.mean_length, 4.0);
        // "red" and "white" are one color word each.
        assert_eq!(stats.color_word_histogram.get(&1), Some(&2));
        assert_eq!(stats.mean_color_words, 1.0);

        let total: u64 = stats.length_histogram.values().sum();
        assert_eq!(total as usize, records.len());
    }

    #[test]
    fn caption_stats_empty_dataset() {
        let stats = caption_stats(&[]);
        assert_eq!(stats.mean_length, 0.0);
        assert_eq!(stats.mean_color_words, 0.0);
        assert!(stats.length_histogram.is_empty());
    }
}
