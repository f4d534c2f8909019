//! The segmentation U-Net, the multi-resolution registration network, and
//! their checkpoint format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::LambdaSchedule;
use crate::nn::{Conv2d, Init, InstanceNorm, ParamStore};
use crate::plane::{GrayImage, SoftMask};
use crate::tensor::Tensor;
use crate::warp::{BorderPolicy, DisplacementField, DisplacementPyramid};

// ---------------------------------------------------------------------------
// Segmentation.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub image_size: usize,
    pub base_width: usize,
    /// Number of 2x downsampling stages.
    pub depth: usize,
    pub leaky_slope: f32,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { image_size: 256, base_width: 16, depth: 4, leaky_slope: 0.01 }
    }
}

/// conv→norm→act, conv→norm, identity shortcut from the first activation, act.
#[derive(Clone, Debug)]
struct ResStage {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResStage {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, Init::He, rng),
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, Init::He, rng),
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, slope: f32) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.norm1.forward(g, store, h);
        let h = g.leaky_relu(h, slope);
        let r = self.conv2.forward(g, store, h);
        let r = self.norm2.forward(g, store, r);
        let sum = g.add(r, h);
        g.leaky_relu(sum, slope)
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: SegConfig,
    seed: u64,
    params: ParamStore,
    encoder: Vec<ResStage>,
    decoder: Vec<ResStage>,
    head: Conv2d,
}

impl SegModel {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        ensure!(config.depth >= 1, "segmentation depth must be at least 1");
        ensure!(
            config.image_size % (1 << config.depth) == 0,
            "image size {} is not divisible by 2^{}",
            config.image_size,
            config.depth
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let width = |l: usize| config.base_width << l;
        let mut encoder = Vec::new();
        for l in 0..=config.depth {
            let cin = if l == 0 { 1 } else { width(l - 1) };
            encoder.push(ResStage::new(&mut params, &format!("enc{l}"), cin, width(l), &mut rng));
        }
        let mut decoder = Vec::new();
        for l in 0..config.depth {
            decoder.push(ResStage::new(&mut params, &format!("dec{l}"), width(l + 1) + width(l), width(l), &mut rng));
        }
        let head = Conv2d::new(&mut params, "head", width(0), 1, 1, 1, Init::He, &mut rng);
        Ok(Self { config, seed, params, encoder, decoder, head })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Probabilities for an `[N,1,S,S]` batch.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let slope = self.config.leaky_slope;
        let p = &self.params;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for stage in &self.encoder[..self.config.depth] {
            h = stage.forward(g, p, h, slope);
            skips.push(h);
            h = g.avg_pool2(h);
        }
        h = self.encoder[self.config.depth].forward(g, p, h, slope);
        for (stage, skip) in self.decoder.iter().zip(skips).rev() {
            let up = g.upsample2(h);
            let cat = g.concat(up, skip);
            h = stage.forward(g, p, cat, slope);
        }
        let logits = self.head.forward(g, p, h);
        g.sigmoid(logits)
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        let s = self.config.image_size;
        ensure!(img.shape() == (s, s), "segmentation input must be {s}x{s}, got {:?}", img.shape());
        Ok(())
    }

    pub fn predict(&self, img: &GrayImage) -> Result<SoftMask> {
        Ok(self.predict_batch(&[img])?.remove(0))
    }

    pub fn predict_batch(&self, imgs: &[&GrayImage]) -> Result<Vec<SoftMask>> {
        for img in imgs {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_planes(imgs)?);
        let y = self.forward(&mut g, x);
        let out = g.value(y);
        Ok((0..imgs.len()).map(|i| out.plane(i, 0)).collect())
    }

    pub fn save(&self, dir: &Path, iteration: usize) -> Result<()> {
        let arch = serde_json::to_value(&self.config)?;
        save_checkpoint(dir, "seg", arch, self.seed, iteration, &self.params)
    }

    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        let manifest = read_manifest(dir, "seg")?;
        let config: SegConfig = serde_json::from_value(manifest.architecture.clone())?;
        let mut model = Self::new(config, manifest.seed)?;
        load_tensors(dir, &manifest, &mut model.params)?;
        Ok((model, manifest.iteration))
    }
}

// ---------------------------------------------------------------------------
// Registration.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub image_size: usize,
    /// Pyramid depth K.
    pub levels: usize,
    /// Encoder widths, finest level first.
    pub encoder_widths: Vec<usize>,
    /// Decoder widths, coarsest level first.
    pub decoder_widths: Vec<usize>,
    pub leaky_slope: f32,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            levels: 5,
            encoder_widths: vec![16, 32, 32, 32, 32],
            decoder_widths: vec![32, 32, 32, 32, 16],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegModel {
    config: RegConfig,
    seed: u64,
    params: ParamStore,
    encoder: Vec<(Conv2d, Conv2d)>,
    decoder: Vec<Conv2d>,
    heads: Vec<Conv2d>,
}

impl RegModel {
    pub fn new(config: RegConfig, seed: u64) -> Result<Self> {
        let k = config.levels;
        ensure!(k >= 1, "registration needs at least one level");
        ensure!(
            config.encoder_widths.len() == k && config.decoder_widths.len() == k,
            "encoder/decoder widths must list {k} levels"
        );
        ensure!(
            config.image_size % (1 << (k - 1)) == 0,
            "image size {} is not divisible by 2^{}",
            config.image_size,
            k - 1
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let ew = &config.encoder_widths;
        let dw = &config.decoder_widths;
        let mut encoder = Vec::with_capacity(k);
        for l in 0..k {
            let cin = if l == 0 { 2 } else { ew[l - 1] };
            encoder.push((
                Conv2d::new(&mut params, &format!("enc{l}.a"), cin, ew[l], 3, 1, Init::He, &mut rng),
                Conv2d::new(&mut params, &format!("enc{l}.b"), ew[l], ew[l], 3, 1, Init::He, &mut rng),
            ));
        }
        let mut decoder = Vec::with_capacity(k);
        let mut heads = Vec::with_capacity(k);
        for i in 0..k {
            let skip = ew[k - 1 - i];
            let cin = if i == 0 { skip } else { dw[i - 1] + skip };
            decoder.push(Conv2d::new(&mut params, &format!("dec{i}"), cin, dw[i], 3, 1, Init::He, &mut rng));
            heads.push(Conv2d::new(&mut params, &format!("head{i}"), dw[i], 2, 3, 1, Init::Zeros, &mut rng));
        }
        Ok(Self { config, seed, params, encoder, decoder, heads })
    }

    pub fn config(&self) -> &RegConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Cumulative fields `[N,2,h_i,w_i]`, coarse to fine. Level `i` is the
    /// composition of the upsampled level `i-1` with that level's residual.
    pub fn forward(&self, g: &mut Graph, source: Var, target: Var) -> Vec<Var> {
        let slope = self.config.leaky_slope;
        let p = &self.params;
        let k = self.config.levels;
        let mut feats = Vec::with_capacity(k);
        let mut h = g.concat(source, target);
        for (l, (a, b)) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = g.avg_pool2(h);
            }
            h = a.forward(g, p, h);
            h = g.leaky_relu(h, slope);
            h = b.forward(g, p, h);
            h = g.leaky_relu(h, slope);
            feats.push(h);
        }
        let mut fields: Vec<Var> = Vec::with_capacity(k);
        let mut f: Option<Var> = None;
        for i in 0..k {
            let skip = feats[k - 1 - i];
            let input = match f {
                None => skip,
                Some(prev) => {
                    let up = g.upsample2(prev);
                    g.concat(up, skip)
                }
            };
            let z = self.decoder[i].forward(g, p, input);
            let z = g.leaky_relu(z, slope);
            f = Some(z);
            let residual = self.heads[i].forward(g, p, z);
            let field = match fields.last() {
                None => residual,
                Some(&coarse) => {
                    let up = g.upsample2(coarse);
                    let up = g.scale(up, 2.0);
                    let moved = g.warp(up, residual, BorderPolicy::ClampToEdge);
                    g.add(residual, moved)
                }
            };
            fields.push(field);
        }
        fields
    }

    pub fn register(&self, source: &GrayImage, target: &GrayImage) -> Result<DisplacementPyramid<f32>> {
        Ok(self.register_batch(&[(source, target)])?.remove(0))
    }

    pub fn register_batch(&self, pairs: &[(&GrayImage, &GrayImage)]) -> Result<Vec<DisplacementPyramid<f32>>> {
        let s = self.config.image_size;
        for (a, b) in pairs {
            ensure!(
                a.shape() == (s, s) && b.shape() == (s, s),
                "registration inputs must both be {s}x{s}, got {:?} and {:?}",
                a.shape(),
                b.shape()
            );
        }
        let src: Vec<&GrayImage> = pairs.iter().map(|p| p.0).collect();
        let tgt: Vec<&GrayImage> = pairs.iter().map(|p| p.1).collect();
        let mut g = Graph::new();
        let xs = g.constant(Tensor::from_planes(&src)?);
        let xt = g.constant(Tensor::from_planes(&tgt)?);
        let fields = self.forward(&mut g, xs, xt);
        (0..pairs.len())
            .map(|n| DisplacementPyramid::new(fields.iter().map(|&f| field_of(g.value(f), n)).collect::<Result<_>>()?))
            .collect()
    }

    pub fn save(&self, dir: &Path, iteration: usize) -> Result<()> {
        let arch = serde_json::to_value(&self.config)?;
        save_checkpoint(dir, "reg", arch, self.seed, iteration, &self.params)
    }

    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        let manifest = read_manifest(dir, "reg")?;
        let config: RegConfig = serde_json::from_value(manifest.architecture.clone())?;
        let mut model = Self::new(config, manifest.seed)?;
        load_tensors(dir, &manifest, &mut model.params)?;
        Ok((model, manifest.iteration))
    }
}

/// Batch entry `n` of an `[N,2,H,W]` tensor as a field.
pub fn field_of(t: &Tensor, n: usize) -> Result<DisplacementField<f32>> {
    let [_, c, h, w] = t.shape();
    ensure!(c == 2, "field tensor must have 2 channels, got {c}");
    let (dy, dx) = t.sample(n).split_at(h * w);
    DisplacementField::from_components(h, w, dy.to_vec(), dx.to_vec())
}

/// Scalar nodes of the registration objective; `total` is the one to minimize.
#[derive(Clone, Copy, Debug)]
pub struct RegLoss {
    pub total: Var,
    pub similarity: Var,
    pub dice: Option<Var>,
    pub smoothness: Var,
}

fn pooled_levels(g: &mut Graph, t: &Tensor, k: usize) -> Vec<Var> {
    let mut levels = vec![g.constant(t.clone())];
    for _ in 1..k {
        let prev = *levels.last().unwrap();
        let pooled = g.avg_pool2(prev);
        levels.push(pooled);
    }
    levels.reverse();
    levels
}

/// Batch-mean registration objective on graph fields (coarse to fine): per
/// level `gncc + dice + λ·smoothness`, averaged over levels, with inputs
/// average-pooled to each level. The similarity, Dice and smoothness nodes
/// are level averages without λ.
pub fn registration_loss(
    g: &mut Graph,
    fields: &[Var],
    source: &Tensor,
    target: &Tensor,
    masks: Option<(&Tensor, &Tensor)>,
    schedule: &LambdaSchedule,
) -> Result<RegLoss> {
    let k = fields.len();
    ensure!(k == schedule.depth(), "{k} fields for a schedule of depth {}", schedule.depth());
    let xs = pooled_levels(g, source, k);
    let xt = pooled_levels(g, target, k);
    let ms = masks.map(|(a, b)| (pooled_levels(g, a, k), pooled_levels(g, b, k)));
    let inv_k = 1.0 / k as f32;
    let (mut total, mut sims, mut dices, mut smooths) = (vec![], vec![], vec![], vec![]);
    for (i, &d) in fields.iter().enumerate() {
        let warped = g.warp(xs[i], d, BorderPolicy::IMAGE);
        let sim = g.gncc(warped, xt[i]);
        let sm = g.smoothness(d);
        total.push((sim, inv_k));
        total.push((sm, inv_k * schedule.weights()[i] as f32));
        sims.push((sim, inv_k));
        smooths.push((sm, inv_k));
        if let Some((ys, yt)) = &ms {
            let wm = g.warp(ys[i], d, BorderPolicy::MASK);
            let dice = g.soft_dice(wm, yt[i]);
            total.push((dice, inv_k));
            dices.push((dice, inv_k));
        }
    }
    Ok(RegLoss {
        total: g.weighted_sum(&total),
        similarity: g.weighted_sum(&sims),
        dice: (!dices.is_empty()).then(|| g.weighted_sum(&dices)),
        smoothness: g.weighted_sum(&smooths),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: `manifest.json` plus one little-endian f32 file per tensor.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub iteration: usize,
    pub tensors: Vec<TensorEntry>,
}

fn save_checkpoint(
    dir: &Path,
    kind: &str,
    architecture: serde_json::Value,
    seed: u64,
    iteration: usize,
    params: &ParamStore,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let name = params.name(id).to_string();
        let file = format!("{name}.f32");
        let t = params.get(id);
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry { name, shape: t.shape(), file });
    }
    let manifest = CheckpointManifest { kind: kind.into(), architecture, seed, iteration, tensors };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path, kind: &str) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if manifest.kind != kind {
        return Err(Error::format(&path, format!("expected a {kind} checkpoint, found {}", manifest.kind)));
    }
    Ok(manifest)
}

fn load_tensors(dir: &Path, manifest: &CheckpointManifest, params: &mut ParamStore) -> Result<()> {
    let mpath = dir.join("manifest.json");
    if manifest.tensors.len() != params.len() {
        return Err(Error::format(&mpath, "tensor count does not match the architecture"));
    }
    for entry in &manifest.tensors {
        let id = params
            .find(&entry.name)
            .ok_or_else(|| Error::format(&mpath, format!("unknown tensor {}", entry.name)))?;
        if params.get(id).shape() != entry.shape {
            return Err(Error::format(&mpath, format!("shape mismatch for {}", entry.name)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 4 * params.get(id).numel() {
            return Err(Error::format(&path, "tensor file has the wrong length"));
        }
        for (dst, chunk) in params.get_mut(id).data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(())
}
