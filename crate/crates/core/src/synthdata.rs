//! Deterministic two-part-object dataset with exact ground-truth boxes.
//!
//! Every object is a category-specific glyph (the discriminative part) next
//! to a disk shared by all categories (the common part). The disk is tinted
//! with the category colour only some of the time, so it is a weaker cue than
//! the glyph. Part placement guarantees that a box around either part alone
//! has IoU below 0.5 with the full-object box.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::localization::{iou, BBox};
use crate::pngio::{self, Channels, Image8};
use crate::tensor::Tensor;

const TEMPLATE: usize = 8;

#[rustfmt::skip]
const GLYPHS: [[&str; TEMPLATE]; 8] = [
    // plus
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
    // ring
    ["########", "########", "##....##", "##....##", "##....##", "##....##", "########", "########"],
    // cross
    ["##....##", "###..###", ".######.", "..####..", "..####..", ".######.", "###..###", "##....##"],
    // triangle
    ["...##...", "...##...", "..####..", "..####..", ".######.", ".######.", "########", "########"],
    // H
    ["##....##", "##....##", "##....##", "########", "########", "##....##", "##....##", "##....##"],
    // T
    ["########", "########", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."],
    // diamond
    ["...##...", "..####..", ".######.", "########", "########", ".######.", "..####..", "...##..."],
    // bars
    ["########", "########", "........", "########", "########", "........", "########", "########"],
];

#[rustfmt::skip]
const COMMON: [&str; TEMPLATE] =
    ["..####..", ".######.", "########", "########", "########", "########", ".######.", "..####.."];

const TINTS: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
];

pub const MAX_CATEGORIES: usize = GLYPHS.len();

const GLYPH_LEVEL: f64 = 0.92;
const COMMON_LEVEL: f64 = 0.55;
const BACKGROUND_RANGE: (f64, f64) = (0.15, 0.4);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_categories: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Amplitude of uniform per-pixel background noise.
    pub noise: f64,
    pub glyph_size: usize,
    pub common_size: usize,
    /// Part sizes vary uniformly by up to this many pixels either way.
    pub scale_jitter: usize,
    /// Strength of the category colour added to the common part.
    pub tint_strength: f64,
    /// Probability that the common part carries its own category's tint
    /// rather than another category's.
    pub tint_reliability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_categories: 4,
            num_train: 800,
            num_test: 200,
            noise: 0.08,
            glyph_size: 16,
            common_size: 16,
            scale_jitter: 2,
            tint_strength: 0.3,
            tint_reliability: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_categories < 2 || self.num_categories > MAX_CATEGORIES {
            return bad(format!("num_categories must be in 2..={MAX_CATEGORIES}"));
        }
        if !self.num_train.is_multiple_of(self.num_categories) || !self.num_test.is_multiple_of(self.num_categories) {
            return bad(format!(
                "split sizes {} / {} must be divisible by {} categories",
                self.num_train, self.num_test, self.num_categories
            ));
        }
        if self.num_train == 0 {
            return bad("num_train must be positive".into());
        }
        if self.glyph_size < TEMPLATE + self.scale_jitter || self.common_size < TEMPLATE + self.scale_jitter {
            return bad(format!("part sizes must be at least {TEMPLATE} pixels after jitter"));
        }
        if 2 * (self.glyph_size.max(self.common_size) + self.scale_jitter) > self.image_size {
            return bad("parts are too large for the image".into());
        }
        let j = self.scale_jitter;
        for gs in self.glyph_size - j..=self.glyph_size + j {
            for cs in self.common_size - j..=self.common_size + j {
                if valid_offsets(gs, cs).is_empty() {
                    return bad(format!("glyph size {gs} and common size {cs} admit no valid arrangement"));
                }
            }
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=0.45).contains(&self.tint_strength) {
            return bad("noise must lie in [0, 0.5] and tint_strength in [0, 0.45]".into());
        }
        if !(0.0..=1.0).contains(&self.tint_reliability) {
            return bad("tint_reliability must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values `q / 255` for 8-bit `q`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub gt_box: BBox,
    pub discriminative_box: BBox,
    pub common_box: BBox,
    pub tint_category: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub split: Split,
    pub index: usize,
    /// Path relative to the data directory.
    pub file: String,
    pub label: usize,
    pub gt_box: BBox,
    pub discriminative_box: BBox,
    pub common_box: BBox,
    pub tint_category: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    #[serde(flatten)]
    pub config: SynthConfig,
    pub records: Vec<Record>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub manifest: Manifest,
}

fn template_hit(rows: &[&str; TEMPLATE], size: usize, y: usize, x: usize) -> bool {
    rows[y * TEMPLATE / size].as_bytes()[x * TEMPLATE / size] == b'#'
}

fn square(x: i64, y: i64, size: usize) -> BBox {
    BBox {
        x0: x as u32,
        y0: y as u32,
        x1: (x + size as i64) as u32,
        y1: (y + size as i64) as u32,
    }
}

/// Every offset `(dx, dy)` of the common part relative to the glyph for
/// which the object satisfies the placement rules: each part box has IoU
/// below one half with the object box yet covers at least a quarter of it,
/// and the parts overlap by at most a quarter of the smaller one.
fn valid_offsets(gs: usize, cs: usize) -> Vec<(i64, i64)> {
    let (g, c) = (gs as i64, cs as i64);
    let mut out = Vec::new();
    for dy in 1 - c..g {
        for dx in 1 - c..g {
            let (gb, cb) = local_boxes(dx, dy, gs, cs);
            let hull = gb.union_hull(&cb);
            let overlap = gb.intersection_area(&cb);
            if iou(&gb, &hull) < 0.5
                && iou(&cb, &hull) < 0.5
                && 4 * gb.area() >= hull.area()
                && 4 * cb.area() >= hull.area()
                && 4 * overlap <= gb.area().min(cb.area())
            {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Glyph and common-part boxes in the object's own frame (hull at the origin).
fn local_boxes(dx: i64, dy: i64, gs: usize, cs: usize) -> (BBox, BBox) {
    let (sx, sy) = ((-dx).max(0), (-dy).max(0));
    (square(sx, sy, gs), square(dx + sx, dy + sy, cs))
}

fn render_sample(config: &SynthConfig, seed: u64, split: Split, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream() + index as u64);
    let size = config.image_size;
    let label = index % config.num_categories;

    let jitter = |rng: &mut ChaCha8Rng, base: usize| {
        let j = config.scale_jitter as i64;
        (base as i64 + rng.random_range(-j..=j)) as usize
    };
    let gs = jitter(&mut rng, config.glyph_size);
    let cs = jitter(&mut rng, config.common_size);
    let offsets = valid_offsets(gs, cs);
    if offsets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no valid part arrangement for glyph size {gs} and common size {cs}"
        )));
    }
    let (dx, dy) = offsets[rng.random_range(0..offsets.len())];
    let (local_glyph, local_common) = local_boxes(dx, dy, gs, cs);
    let hull = local_glyph.union_hull(&local_common);
    let (hw, hh) = (hull.x1 as i64, hull.y1 as i64);

    let ox = rng.random_range(0..=size as i64 - hw);
    let oy = rng.random_range(0..=size as i64 - hh);
    let shift = |b: BBox| BBox {
        x0: b.x0 + ox as u32,
        y0: b.y0 + oy as u32,
        x1: b.x1 + ox as u32,
        y1: b.y1 + oy as u32,
    };
    let glyph_box = shift(local_glyph);
    let common_box = shift(local_common);
    let gt_box = glyph_box.union_hull(&common_box);

    let tint_category = if rng.random_bool(config.tint_reliability) {
        label
    } else {
        let other = rng.random_range(0..config.num_categories - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    };
    let tint = TINTS[tint_category];
    let base: f64 = rng.random_range(BACKGROUND_RANGE.0..BACKGROUND_RANGE.1);

    let plane = size * size;
    let mut px = vec![0f64; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let n = if config.noise > 0.0 {
                    rng.random_range(-config.noise..=config.noise)
                } else {
                    0.0
                };
                px[ch * plane + y * size + x] = base + n;
            }
        }
    }
    let mut paint = |b: &BBox, rows: &[&str; TEMPLATE], color: [f64; 3]| {
        let s = (b.x1 - b.x0) as usize;
        for ly in 0..s {
            for lx in 0..s {
                if template_hit(rows, s, ly, lx) {
                    let (x, y) = (b.x0 as usize + lx, b.y0 as usize + ly);
                    for (ch, &v) in color.iter().enumerate() {
                        px[ch * plane + y * size + x] = v;
                    }
                }
            }
        }
    };
    let common_color = [0, 1, 2].map(|ch| COMMON_LEVEL + config.tint_strength * tint[ch]);
    paint(&common_box, &COMMON, common_color);
    paint(&glyph_box, &GLYPHS[label], [GLYPH_LEVEL; 3]);

    for part in [&glyph_box, &common_box] {
        if iou(part, &gt_box) >= 0.5 || 4 * part.area() < gt_box.area() {
            return Err(Error::InvalidArgument(format!(
                "sample {index}: part box {part:?} violates the single-part IoU construction"
            )));
        }
    }

    let image = Tensor::from_vec(
        vec![3, size, size],
        px.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
    )?;
    Ok(Sample {
        image,
        label,
        gt_box,
        discriminative_box: glyph_box,
        common_box,
        tint_category,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn file_name(split: Split, index: usize) -> String {
    format!("{}/img_{index:06}.png", split.dir_name())
}

/// Interleaved 8-bit RGB pixels of a `[3, H, W]` image tensor.
pub fn to_image8(image: &Tensor<f32>) -> Image8 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut pixels = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            pixels.push(quantize(image.data()[ch * plane + i] as f64));
        }
    }
    Image8 {
        width: w,
        height: h,
        channels: Channels::Rgb,
        pixels,
    }
}

pub fn from_image8(img: &Image8) -> Result<Tensor<f32>> {
    if img.channels != Channels::Rgb {
        return Err(Error::InvalidArgument("expected an RGB image".into()));
    }
    let plane = img.width * img.height;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = img.pixels[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, img.height, img.width], data)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates train and test splits. Sample `i` of a split draws from its
/// own counter-based stream, so the output depends only on `(config, seed)`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<SynthData> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.num_train + config.num_test);
    let mut splits = Vec::with_capacity(2);
    for (split, count) in [(Split::Train, config.num_train), (Split::Test, config.num_test)] {
        let samples = (0..count)
            .map(|i| render_sample(config, seed, split, i))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in samples.iter().enumerate() {
            let png = pngio::encode(&to_image8(&s.image))?;
            records.push(Record {
                split,
                index: i,
                file: file_name(split, i),
                label: s.label,
                gt_box: s.gt_box,
                discriminative_box: s.discriminative_box,
                common_box: s.common_box,
                tint_category: s.tint_category,
                sha256: sha256_hex(&png),
            });
        }
        splits.push(samples);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(SynthData {
        train,
        test,
        manifest: Manifest {
            seed,
            config: config.clone(),
            records,
        },
    })
}

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

/// Writes `data/{train,test}/img_%06d.png` and `data/manifest.json` under `root`.
pub fn save(root: &Path, data: &SynthData) -> Result<()> {
    let dir = data_dir(root);
    for split in [Split::Train, Split::Test] {
        let d = dir.join(split.dir_name());
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let samples = data.train.iter().chain(&data.test);
    for (rec, sample) in data.manifest.records.iter().zip(samples) {
        let bytes = pngio::encode(&to_image8(&sample.image))?;
        let path = dir.join(&rec.file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&data.manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes)?;
    m.config.validate()?;
    let expected = m.config.num_train + m.config.num_test;
    if m.records.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "manifest lists {} records, config expects {expected}",
            m.records.len()
        )));
    }
    let size = m.config.image_size as u32;
    for r in &m.records {
        if r.label >= m.config.num_categories || r.tint_category >= m.config.num_categories {
            return Err(Error::InvalidArgument(format!("record {} has an out-of-range category", r.file)));
        }
        for b in [r.gt_box, r.discriminative_box, r.common_box] {
            if b.x0 >= b.x1 || b.y0 >= b.y1 || !b.fits_within(size, size) {
                return Err(Error::InvalidArgument(format!("record {} has an invalid box {b:?}", r.file)));
            }
        }
        if r.file.contains("..") || Path::new(&r.file).is_absolute() {
            return Err(Error::InvalidArgument(format!("record path {:?} escapes the data directory", r.file)));
        }
    }
    Ok(m)
}

/// Loads a dataset written by [`save`], verifying every image checksum.
pub fn load(root: &Path) -> Result<SynthData> {
    let dir = data_dir(root);
    let mpath = dir.join("manifest.json");
    let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_manifest(&bytes).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
    let mut train = Vec::with_capacity(manifest.config.num_train);
    let mut test = Vec::with_capacity(manifest.config.num_test);
    for r in &manifest.records {
        let path = dir.join(&r.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != r.sha256 {
            return Err(Error::corrupt(&path, "checksum mismatch"));
        }
        let img = pngio::decode(&bytes).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        if img.width != manifest.config.image_size || img.height != manifest.config.image_size {
            return Err(Error::corrupt(&path, "unexpected image size"));
        }
        let sample = Sample {
            image: from_image8(&img).map_err(|e| Error::corrupt(&path, e.to_string()))?,
            label: r.label,
            gt_box: r.gt_box,
            discriminative_box: r.discriminative_box,
            common_box: r.common_box,
            tint_category: r.tint_category,
        };
        match r.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(SynthData { train, test, manifest })
}

/// Stacks sample images into a `[N, 3, H, W]` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_train: 24,
            num_test: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn templates_span_full_frame_and_are_distinct() {
        let mut all: Vec<&[&str; TEMPLATE]> = GLYPHS.iter().collect();
        all.push(&COMMON);
        for t in &all {
            assert!(t[0].contains('#') && t[TEMPLATE - 1].contains('#'));
            assert!(t.iter().any(|r| r.starts_with('#')) && t.iter().any(|r| r.ends_with('#')));
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "templates {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate(&small(), 7).unwrap();
        let b = generate(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(), 8).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
        for cat in 0..4 {
            assert_eq!(a.train.iter().filter(|s| s.label == cat).count(), 6);
            assert_eq!(a.test.iter().filter(|s| s.label == cat).count(), 2);
        }
    }

    #[test]
    fn noiseless_objects_match_templates() {
        let cfg = SynthConfig { noise: 0.0, scale_jitter: 0, ..small() };
        let data = generate(&cfg, 3).unwrap();
        for s in data.train.iter().chain(&data.test) {
            let size = cfg.image_size;
            let g = s.discriminative_box;
            assert_eq!(g.width() as usize, cfg.glyph_size);
            for ly in 0..cfg.glyph_size {
                for lx in 0..cfg.glyph_size {
                    let (x, y) = (g.x0 as usize + lx, g.y0 as usize + ly);
                    let v = s.image.data()[y * size + x];
                    let on = template_hit(&GLYPHS[s.label], cfg.glyph_size, ly, lx);
                    assert_eq!(on, v == quantize(GLYPH_LEVEL) as f32 / 255.0, "({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn gt_box_is_tight_around_object_pixels() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let data = generate(&cfg, 11).unwrap();
        let size = cfg.image_size;
        for s in &data.train {
            // Background is a flat level darker than either part.
            let bg = s.image.data()[(size - 1) * size + size - 1].min(s.image.data()[0]);
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for y in 0..size {
                for x in 0..size {
                    let differs = (0..3).any(|ch| s.image.data()[ch * size * size + y * size + x] != bg);
                    if differs {
                        x0 = x0.min(x as u32);
                        y0 = y0.min(y as u32);
                        x1 = x1.max(x as u32 + 1);
                        y1 = y1.max(y as u32 + 1);
                    }
                }
            }
            assert_eq!(BBox { x0, y0, x1, y1 }, s.gt_box);
        }
    }

    #[test]
    fn single_part_boxes_fail_the_iou_test() {
        let data = generate(&SynthConfig { num_train: 400, num_test: 4, ..SynthConfig::default() }, 5).unwrap();
        for s in &data.train {
            assert!(iou(&s.discriminative_box, &s.gt_box) < 0.5);
            assert!(iou(&s.common_box, &s.gt_box) < 0.5);
            assert!(4 * s.discriminative_box.area() >= s.gt_box.area());
            assert!(4 * s.common_box.area() >= s.gt_box.area());
            assert!(s.gt_box.area() >= 9);
            assert!(s.gt_box.fits_within(64, 64));
        }
    }

    #[test]
    fn common_part_tint_is_an_unreliable_cue() {
        let data = generate(&SynthConfig { num_train: 400, num_test: 4, ..SynthConfig::default() }, 5).unwrap();
        let agree = data.train.iter().filter(|s| s.tint_category == s.label).count() as f64 / 400.0;
        assert!(agree < 0.9 && agree > 0.7, "{agree}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig { num_train: 10, ..small() }, 1).is_err());
        assert!(generate(&SynthConfig { num_categories: 9, ..small() }, 1).is_err());
        assert!(generate(&SynthConfig { glyph_size: 40, ..small() }, 1).is_err());
    }

    #[test]
    fn save_load_roundtrip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small(), 2).unwrap();
        save(dir.path(), &data).unwrap();
        assert!(dir.path().join("data/train/img_000000.png").exists());
        assert!(dir.path().join("data/test/img_000007.png").exists());
        let back = load(dir.path()).unwrap();
        assert_eq!(back, data);

        let victim = dir.path().join("data/train/img_000003.png");
        let mut bytes = std::fs::read(&victim).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("img_000003.png"), "{err}");

        std::fs::remove_file(&victim).unwrap();
        assert!(load(dir.path()).unwrap_err().to_string().contains("img_000003.png"));
    }
}
