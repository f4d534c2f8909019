//! Synthetic head-slice data, preprocessing, annotation splits and file IO.
//!
//! Each synthetic sample is an elliptical head with a bright rim, textured
//! tissue, two distractor blobs and one target structure (a wobbly
//! superellipse near the head centre). The whole scene is sampled through a
//! smooth random deformation, so the target mask is rasterized from the same
//! analytic boundary that shades the image.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::plane::{BinaryMask, GrayImage, Plane};

/// One image with its mask when the mask is visible to training.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: Option<BinaryMask>,
}

impl Sample {
    pub fn annotated(&self) -> bool {
        self.mask.is_some()
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub image_size: usize,
    /// Peak displacement of the smooth deformation, as a fraction of the half-width.
    pub deformation: f64,
    /// Range of the target-minus-tissue contrast magnitude.
    pub contrast: (f64, f64),
    /// Probability that the target is darker than the surrounding tissue.
    pub dark_target_prob: f64,
    pub noise_sigma: (f64, f64),
    pub distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 250,
            image_size: 64,
            deformation: 0.10,
            contrast: (0.08, 0.30),
            dark_target_prob: 0.3,
            noise_sigma: (0.02, 0.06),
            distractors: 2,
        }
    }
}

/// Smooth random displacement: a few low-frequency sinusoids per axis.
struct Deformation {
    terms: Vec<[f64; 5]>,
}

impl Deformation {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let terms = (0..6)
            .map(|k| {
                let axis = (k % 2) as f64;
                let fy = rng.gen_range(0.5..1.6);
                let fx = rng.gen_range(0.5..1.6);
                let phase = rng.gen_range(0.0..2.0 * PI);
                [axis, fy, fx, phase, amplitude * rng.gen_range(0.3..1.0) / 3.0_f64.sqrt()]
            })
            .collect();
        Self { terms }
    }

    fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        let (mut dy, mut dx) = (0.0, 0.0);
        for &[axis, fy, fx, phase, amp] in &self.terms {
            let v = amp * (PI * (fy * y + fx * x) + phase).sin();
            if axis == 0.0 {
                dy += v
            } else {
                dx += v
            }
        }
        (y + dy, x + dx)
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: 1 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (u, v) = self.local(y, x);
        ((u / self.ry).powi(2) + (v / self.rx).powi(2)).sqrt()
    }

    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (py, px) = (y - self.cy, x - self.cx);
        (self.cos * py + self.sin * px, -self.sin * py + self.cos * px)
    }
}

struct Target {
    frame: Ellipse,
    exponent: f64,
    wobble: Vec<(f64, f64, f64)>,
}

impl Target {
    /// `< 1` inside, `> 1` outside.
    fn level(&self, y: f64, x: f64) -> f64 {
        let (u, v) = self.frame.local(y, x);
        let e = self.exponent;
        let r = ((u / self.frame.ry).abs().powf(e) + (v / self.frame.rx).abs().powf(e)).powf(1.0 / e);
        let phi = v.atan2(u);
        let scale: f64 = 1.0 + self.wobble.iter().map(|&(k, c, p)| c * (k * phi + p).cos()).sum::<f64>();
        r / scale
    }
}

struct Scene {
    head: Ellipse,
    target: Target,
    distractors: Vec<(Ellipse, f64)>,
    tissue: f64,
    target_delta: f64,
    rim: f64,
    texture: Vec<[f64; 4]>,
    bias: (f64, f64, f64),
    warp: Deformation,
}

fn smoothstep(edge: f64, width: f64, v: f64) -> f64 {
    // 1 well inside (v < edge), 0 well outside.
    let t = ((edge + width - v) / (2.0 * width)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Scene {
    fn sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let angle = rng.gen_range(-0.25f64..0.25);
        let head = Ellipse {
            cy: rng.gen_range(-0.06..0.06),
            cx: rng.gen_range(-0.06..0.06),
            ry: rng.gen_range(0.72..0.92),
            rx: rng.gen_range(0.60..0.82),
            cos: angle.cos(),
            sin: angle.sin(),
        };
        // The target scales and turns with the head; only a small share of its
        // variation is independent of the surrounding anatomy.
        let t_angle = angle + rng.gen_range(-0.1f64..0.1);
        let target = Target {
            frame: Ellipse {
                cy: head.cy + rng.gen_range(-0.03..0.03),
                cx: head.cx + rng.gen_range(-0.03..0.03),
                ry: head.ry * rng.gen_range(0.40..0.46),
                rx: head.rx * rng.gen_range(0.38..0.44),
                cos: t_angle.cos(),
                sin: t_angle.sin(),
            },
            exponent: rng.gen_range(2.0..3.0),
            wobble: (2..5).map(|k| (k as f64, rng.gen_range(0.0..0.04), rng.gen_range(0.0..2.0 * PI))).collect(),
        };
        let tissue = rng.gen_range(0.35..0.55);
        let magnitude = rng.gen_range(cfg.contrast.0..cfg.contrast.1);
        let target_delta = if rng.gen_bool(cfg.dark_target_prob) { -magnitude } else { magnitude };
        let mut distractors = Vec::with_capacity(cfg.distractors);
        for _ in 0..cfg.distractors {
            // Blobs sit in the ring between target and skull.
            let theta = rng.gen_range(0.0..2.0 * PI);
            let dist = rng.gen_range(0.5..0.62);
            let a = rng.gen_range(0.0..PI);
            let blob = Ellipse {
                cy: head.cy + dist * head.ry * theta.sin(),
                cx: head.cx + dist * head.rx * theta.cos(),
                ry: rng.gen_range(0.07..0.13),
                rx: rng.gen_range(0.05..0.1),
                cos: a.cos(),
                sin: a.sin(),
            };
            let delta = target_delta.signum() * rng.gen_range(0.5..1.2) * magnitude;
            distractors.push((blob, delta));
        }
        let texture = (0..4)
            .map(|_| [rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..0.04)])
            .collect();
        let bias_angle = rng.gen_range(0.0..2.0 * PI);
        let bias = (bias_angle.sin(), bias_angle.cos(), rng.gen_range(0.0..0.25));
        let warp = Deformation::sample(rng, cfg.deformation);
        Self { head, target, distractors, tissue, target_delta, rim: rng.gen_range(0.75..1.0), texture, bias, warp }
    }

    /// Intensity and target membership at normalized coordinates.
    fn shade(&self, y: f64, x: f64, pixel: f64) -> (f64, bool) {
        let (y, x) = self.warp.apply(y, x);
        let hr = self.head.radius(y, x);
        let rim_w = 0.08;
        let inside_head = smoothstep(1.0, pixel, hr);
        let inside_skull = smoothstep(1.0 + rim_w, pixel, hr);
        let mut tissue = self.tissue;
        for &[fy, fx, p, a] in &self.texture {
            tissue += a * (PI * (fy * y + fx * x) + p).sin();
        }
        let level = self.target.level(y, x);
        let in_target = level <= 1.0;
        let scale = self.target.frame.ry.min(self.target.frame.rx);
        let t_soft = smoothstep(1.0, pixel / scale, level);
        let mut v = tissue + self.target_delta * t_soft;
        for (blob, delta) in &self.distractors {
            let br = blob.radius(y, x);
            v += delta * smoothstep(1.0, pixel / blob.ry.min(blob.rx), br);
        }
        let brain = v * inside_head;
        let rim = self.rim * (inside_skull - inside_head);
        let (by, bx, ba) = self.bias;
        let gain = 1.0 + ba * (by * y + bx * x);
        ((brain + rim) * gain, in_target && hr < 1.0)
    }
}

fn render(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Plane<f32>, BinaryMask) {
    let scene = Scene::sample(cfg, rng);
    let s = cfg.image_size;
    let pixel = 2.0 / s as f64;
    let coord = |i: usize| (i as f64 + 0.5) * pixel - 1.0;
    let sigma = rng.gen_range(cfg.noise_sigma.0..cfg.noise_sigma.1);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let gain = rng.gen_range(50.0..400.0);
    let offset = rng.gen_range(0.0..100.0);
    let mut mask = Plane::filled(s, s, false);
    let mut raw = Plane::filled(s, s, 0.0f32);
    for i in 0..s {
        for j in 0..s {
            let (v, inside) = scene.shade(coord(i), coord(j), pixel);
            raw.set(i, j, ((v + noise.sample(rng)) * gain + offset) as f32);
            mask.set(i, j, inside);
        }
    }
    (raw, mask)
}

/// Fraction of foreground pixels.
pub fn area_fraction(mask: &BinaryMask) -> f64 {
    mask.count() as f64 / mask.len() as f64
}

/// Number of 4-connected foreground components.
pub fn connected_components(mask: &BinaryMask) -> usize {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.as_slice()[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (i, j) = (k / w, k % w);
            let mut visit = |q: usize| {
                if mask.as_slice()[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(k - w);
            }
            if i + 1 < h {
                visit(k + w);
            }
            if j > 0 {
                visit(k - 1);
            }
            if j + 1 < w {
                visit(k + 1);
            }
        }
    }
    count
}

pub const AREA_RANGE: (f64, f64) = (0.05, 0.35);

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Deterministic synthetic samples with visible masks. Draws that fail the
/// area or single-component audit are redrawn from the same stream.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<Sample>> {
    ensure!(cfg.count >= 10, "synthetic dataset needs at least 10 samples, got {}", cfg.count);
    ensure!(cfg.image_size >= 8, "image size {} is too small", cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let mut attempts = 0;
        let (raw, mask) = loop {
            attempts += 1;
            ensure!(attempts <= 100, "generator could not satisfy the mask audit");
            let (raw, mask) = render(cfg, &mut rng);
            let area = area_fraction(&mask);
            if (AREA_RANGE.0..=AREA_RANGE.1).contains(&area) && connected_components(&mask) == 1 {
                break (raw, mask);
            }
        };
        let image = preprocess(&raw, cfg.image_size)?.image;
        out.push(Sample { id: sample_id(index), image, mask: Some(mask) });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Preprocessing.

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub image: GrayImage,
    /// The raw image was constant; the output is all zeros.
    pub constant: bool,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &Plane<f32>, height: usize, width: usize) -> Plane<f32> {
    let (h, w) = src.shape();
    if (h, w) == (height, width) {
        return src.clone();
    }
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), c - lo as f64)
    };
    Plane::from_fn(height, width, |i, j| {
        let (y0, y1, fy) = axis(i, height, h);
        let (x0, x1, fx) = axis(j, width, w);
        let v = |r, c| src.get(r, c) as f64;
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// Resize to `size`×`size`, then min-max normalize to `[0, 1]`.
pub fn preprocess(raw: &Plane<f32>, size: usize) -> Result<Preprocessed> {
    ensure!(raw.as_slice().iter().all(|v| v.is_finite()), "raw image contains non-finite values");
    let resized = resize_bilinear(raw, size, size);
    let (lo, hi) = resized.min_max();
    if hi <= lo {
        log::warn!("constant image normalized to zeros");
        return Ok(Preprocessed { image: Plane::filled(size, size, 0.0), constant: true });
    }
    let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
    let image = resized.map(|v| (((v as f64 - lo64) / span) as f32).clamp(0.0, 1.0));
    Ok(Preprocessed { image, constant: false })
}

// ---------------------------------------------------------------------------
// Splits.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOverride {
    pub rate: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Test share of the data, used when `test_count` is absent.
    pub test_fraction: f64,
    pub test_count: Option<usize>,
    pub validation_count: usize,
    /// Fixed annotated counts for specific rates.
    pub overrides: Vec<RateOverride>,
}

impl SplitConfig {
    /// 250 samples → 200 train (10 validation) / 50 test.
    pub fn desk() -> Self {
        Self { test_fraction: 0.2, test_count: None, validation_count: 10, overrides: vec![] }
    }

    /// 820 samples → 620 train (20 validation) / 200 test; 1% means 5 images.
    pub fn paper() -> Self {
        Self {
            test_fraction: 0.2,
            test_count: Some(200),
            validation_count: 20,
            overrides: vec![RateOverride { rate: 0.01, count: 5 }],
        }
    }

    pub fn annotated_count(&self, rate: f64, pool: usize) -> usize {
        self.overrides
            .iter()
            .find(|o| (o.rate - rate).abs() < 1e-12)
            .map_or_else(|| (rate * pool as f64).round() as usize, |o| o.count)
            .min(pool)
    }
}

/// Partitioned samples. Unannotated training samples carry no mask; their
/// ground truth is reachable only through [`DatasetSplit::audit_mask`].
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub rate: f64,
    pub seed: u64,
    pub train_annotated: Vec<Sample>,
    pub train_unannotated: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    hidden: BTreeMap<String, BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train_annotated: Vec<String>,
    pub train_unannotated: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub rate: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub ids: SplitIds,
}

impl DatasetSplit {
    /// Hidden ground truth of an unannotated training sample, for audits only.
    pub fn audit_mask(&self, id: &str) -> Option<&BinaryMask> {
        self.hidden.get(id)
    }

    /// All training samples (annotated first).
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.train_annotated.iter().chain(&self.train_unannotated)
    }

    pub fn ids(&self) -> SplitIds {
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect();
        SplitIds {
            train_annotated: ids(&self.train_annotated),
            train_unannotated: ids(&self.train_unannotated),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest { rate: self.rate, seed: self.seed, ids: self.ids() }
    }

    /// Rebuilds a split from a manifest over fully labelled samples.
    pub fn from_manifest(samples: &[Sample], manifest: &SplitManifest) -> Result<Self> {
        let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let fetch = |ids: &[String]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|s| (*s).clone())
                        .ok_or_else(|| Error::Contract(format!("split references unknown sample {id}")))
                })
                .collect()
        };
        let ids = &manifest.ids;
        let mut all = BTreeSet::new();
        for id in ids.train_annotated.iter().chain(&ids.train_unannotated).chain(&ids.validation).chain(&ids.test) {
            ensure!(all.insert(id.clone()), "split lists sample {id} twice");
        }
        let train_annotated = fetch(&ids.train_annotated)?;
        ensure!(train_annotated.iter().all(Sample::annotated), "annotated split member lacks a mask");
        let mut hidden = BTreeMap::new();
        let mut train_unannotated = fetch(&ids.train_unannotated)?;
        for s in &mut train_unannotated {
            if let Some(m) = s.mask.take() {
                hidden.insert(s.id.clone(), m);
            }
        }
        Ok(Self {
            rate: manifest.rate,
            seed: manifest.seed,
            train_annotated,
            train_unannotated,
            validation: fetch(&ids.validation)?,
            test: fetch(&ids.test)?,
            hidden,
        })
    }
}

/// Shuffles by `seed`, takes the test share, carves validation from the
/// rest, and annotates a rate-determined prefix of the remaining pool.
pub fn make_split(samples: &[Sample], rate: f64, seed: u64, cfg: &SplitConfig) -> Result<DatasetSplit> {
    ensure!(rate > 0.0 && rate <= 1.0, "annotation rate must lie in (0, 1], got {rate}");
    ensure!(samples.iter().all(Sample::annotated), "splitting requires fully labelled samples");
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ensure!(ids.windows(2).all(|w| w[0] != w[1]), "duplicate sample ids");
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_test = cfg.test_count.unwrap_or_else(|| (cfg.test_fraction * n as f64).round() as usize);
    ensure!(
        n_test < n && n_test + cfg.validation_count < n,
        "{n} samples cannot hold {n_test} test and {} validation images",
        cfg.validation_count
    );
    let test = ids[..n_test].to_vec();
    let validation = ids[n_test..n_test + cfg.validation_count].to_vec();
    let pool = &ids[n_test + cfg.validation_count..];
    let n_ann = cfg.annotated_count(rate, pool.len());
    ensure!(n_ann >= 1, "rate {rate} annotates no image out of {}", pool.len());
    let manifest = SplitManifest {
        rate,
        seed,
        ids: SplitIds {
            train_annotated: pool[..n_ann].to_vec(),
            train_unannotated: pool[n_ann..].to_vec(),
            validation,
            test,
        },
    };
    DatasetSplit::from_manifest(samples, &manifest)
}

// ---------------------------------------------------------------------------
// File IO: `images/<id>.png` (16-bit), `masks/<id>.png` (8-bit, {0,255}).

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 16-bit grayscale PNG with `round(v·65535)`.
pub fn write_gray16(path: &Path, plane: &Plane<f32>) -> Result<()> {
    let (h, w) = plane.shape();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, plane.as_slice().iter().map(|&v| to_u16(v)).collect())
            .expect("buffer size");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path)?;
    Ok(())
}

/// Reads any grayscale PNG into `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Plane<f32>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Plane::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect())
            .expect("buffer size");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    if let Some(bad) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::format(path, format!("mask value {bad} is not 0 or 255")));
    }
    Plane::new(h as usize, w as usize, raw.into_iter().map(|v| v == 255).collect())
}

pub fn split_file_name(rate: f64, seed: u64) -> String {
    format!("split_{rate}_{seed}.json")
}

/// Writes images and masks of fully labelled samples.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        write_gray16(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        let mask = s.mask.as_ref().ok_or_else(|| Error::Contract(format!("sample {} has no mask", s.id)))?;
        write_mask(&dir.join("masks").join(format!("{}.png", s.id)), mask)?;
    }
    Ok(())
}

/// Loads every `images/<id>.png` with its mask, sorted by id, preprocessing
/// images to `size`.
pub fn read_dataset(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&images, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "png"));
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::format(&path, "bad file name"))?;
        let image = preprocess(&read_gray(&path)?, size)?.image;
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mask = read_mask(&mask_path)?;
        if mask.shape() != (size, size) {
            return Err(Error::format(&mask_path, format!("mask is {:?}, expected {size}x{size}", mask.shape())));
        }
        out.push(Sample { id: id.to_string(), image, mask: Some(mask) });
    }
    Ok(out)
}

pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<PathBuf> {
    let path = dir.join(split_file_name(split.rate, split.seed));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, serde_json::to_vec_pretty(&split.manifest())?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_split_manifest(path: &Path) -> Result<SplitManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
