//! Pre-training, the iterative joint loop, and the FS and Mean-Teacher baselines.
//!
//! Every phase draws randomness from its own stream derived from
//! `(seed, iteration, phase)`, and each phase starts a fresh optimizer, so a
//! run resumed from an iteration checkpoint continues bit-identically.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{write_gray16, DatasetSplit, Sample};
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::metrics::dsc_soft;
use crate::models::{registration_loss, RegModel, SegModel};
use crate::nn::{ema_update, Adam, AdamConfig};
use crate::plane::{GrayImage, SoftMask};
use crate::pseudo::{combined_inference, SoftPseudoMask};
use crate::tensor::Tensor;
use crate::warp::{apply_augment, apply_spatial, invert_augment, AugmentSpec, BorderPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SegPretrain,
    RegPretrain,
    PseudoLabel,
    SegFinetune,
    RegFinetune,
    MeanTeacher,
    Evaluation,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one phase of one iteration.
pub fn phase_rng(seed: u64, iteration: usize, phase: Phase) -> ChaCha8Rng {
    let mixed = splitmix(splitmix(seed) ^ splitmix(iteration as u64 + 1).rotate_left(17) ^ (phase as u64 + 1) << 48);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Initialization seeds of the two networks.
pub fn seg_init_seed(seed: u64) -> u64 {
    splitmix(seed ^ 0x5E6)
}

pub fn reg_init_seed(seed: u64) -> u64 {
    splitmix(seed ^ 0x4E6)
}

// ---------------------------------------------------------------------------
// Logs.

/// Ids that fed one step (or one pseudo-labelling call).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub method: String,
    pub phase: Phase,
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    /// Space-separated sample ids.
    pub ids: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub method: String,
    pub phase: Phase,
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub similarity: Option<f64>,
    pub dice: Option<f64>,
    pub smoothness: Option<f64>,
    pub consistency: Option<f64>,
    pub validation_dsc: Option<f64>,
}

/// Batch and epoch logs, kept in memory and appended to CSV files when a
/// directory is attached.
pub struct RunLog {
    method: String,
    batches: Vec<BatchRecord>,
    epochs: Vec<EpochRecord>,
    batch_csv: Option<csv::Writer<File>>,
    epoch_csv: Option<csv::Writer<File>>,
}

pub const BATCH_LOG: &str = "batches.csv";
pub const EPOCH_LOG: &str = "epochs.csv";

fn append_writer(path: &Path) -> Result<csv::Writer<File>> {
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

impl RunLog {
    pub fn in_memory(method: &str) -> Self {
        Self { method: method.into(), batches: vec![], epochs: vec![], batch_csv: None, epoch_csv: None }
    }

    pub fn to_dir(dir: &Path, method: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            batch_csv: Some(append_writer(&dir.join(BATCH_LOG))?),
            epoch_csv: Some(append_writer(&dir.join(EPOCH_LOG))?),
            ..Self::in_memory(method)
        })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn batches(&self) -> &[BatchRecord] {
        &self.batches
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    fn batch(&mut self, phase: Phase, iteration: usize, epoch: usize, step: usize, ids: &[&str]) -> Result<()> {
        let rec = BatchRecord { method: self.method.clone(), phase, iteration, epoch, step, ids: ids.join(" ") };
        if let Some(w) = self.batch_csv.as_mut() {
            w.serialize(&rec)?;
        }
        self.batches.push(rec);
        Ok(())
    }

    fn epoch(&mut self, mut rec: EpochRecord) -> Result<()> {
        rec.method = self.method.clone();
        log::debug!(
            "{} {:?} it{} ep{} loss {:.4} val {:?}",
            rec.method,
            rec.phase,
            rec.iteration,
            rec.epoch,
            rec.loss,
            rec.validation_dsc
        );
        if let Some(w) = self.epoch_csv.as_mut() {
            w.serialize(&rec)?;
            w.flush().map_err(|e| Error::io("epochs.csv", e))?;
        }
        if let Some(w) = self.batch_csv.as_mut() {
            w.flush().map_err(|e| Error::io("batches.csv", e))?;
        }
        self.epochs.push(rec);
        Ok(())
    }
}

/// Reads every batch record from a run directory's log.
pub fn read_batch_log(dir: &Path) -> Result<Vec<BatchRecord>> {
    let path = dir.join(BATCH_LOG);
    let mut reader = csv::Reader::from_path(&path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

// ---------------------------------------------------------------------------
// Segmentation training.

/// Mean thresholded DSC of the model on labelled samples.
pub fn mean_dsc(model: &SegModel, samples: &[Sample]) -> Result<f64> {
    ensure!(!samples.is_empty(), "no samples to score");
    let mut total = 0.0;
    for chunk in samples.chunks(8) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        for (pred, s) in model.predict_batch(&imgs)?.iter().zip(chunk) {
            let gt = s.mask.as_ref().ok_or_else(|| Error::Contract(format!("sample {} has no mask", s.id)))?;
            total += dsc_soft(pred, gt)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// One image with its (possibly soft) training target.
pub struct SegItem<'a> {
    pub id: &'a str,
    pub image: &'a GrayImage,
    pub target: SoftMask,
}

struct SegFit<'a> {
    phase: Phase,
    iteration: usize,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    validation: &'a [Sample],
    /// Validate every this many epochs and keep the best parameters.
    keep_best_every: Option<usize>,
}

fn fit_segmentation(
    model: &mut SegModel,
    items: &[SegItem],
    fit: &SegFit,
    rng: &mut ChaCha8Rng,
    log: &mut RunLog,
) -> Result<()> {
    ensure!(!items.is_empty(), "segmentation training set is empty");
    let mut adam = Adam::new(model.params(), AdamConfig::with_lr(fit.lr));
    let mut best: Option<(f64, crate::nn::ParamStore)> = None;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..fit.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(fit.batch_size).enumerate() {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&k| items[k].image).collect();
            let tgts: Vec<&SoftMask> = chunk.iter().map(|&k| &items[k].target).collect();
            let ids: Vec<&str> = chunk.iter().map(|&k| items[k].id).collect();
            log.batch(fit.phase, fit.iteration, epoch, step, &ids)?;
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_planes(&imgs)?);
            let t = g.constant(Tensor::from_planes(&tgts)?);
            let y = model.forward(&mut g, x);
            let loss = g.soft_dice(y, t);
            loss_sum += g.value(loss).item() as f64;
            steps += 1;
            let grads = g.backward(loss);
            adam.step(model.params_mut(), &grads);
        }
        let mut val = None;
        if let Some(every) = fit.keep_best_every {
            if !fit.validation.is_empty() && ((epoch + 1) % every == 0 || epoch + 1 == fit.epochs) {
                let v = mean_dsc(model, fit.validation)?;
                val = Some(v);
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, model.params().clone()));
                }
            }
        }
        log.epoch(EpochRecord {
            method: String::new(),
            phase: fit.phase,
            iteration: fit.iteration,
            epoch,
            loss: loss_sum / steps as f64,
            similarity: None,
            dice: None,
            smoothness: None,
            consistency: None,
            validation_dsc: val,
        })?;
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(())
}

fn annotated_items(samples: &[Sample]) -> Result<Vec<SegItem<'_>>> {
    samples
        .iter()
        .map(|s| {
            let mask = s.mask.as_ref().ok_or_else(|| Error::Contract(format!("sample {} is not annotated", s.id)))?;
            Ok(SegItem { id: &s.id, image: &s.image, target: mask.to_soft() })
        })
        .collect()
}

/// Soft-Dice training from scratch on the annotated images, keeping the
/// validation-best parameters.
pub fn pretrain_segmentation(
    cfg: &ExperimentConfig,
    annotated: &[Sample],
    validation: &[Sample],
    log: &mut RunLog,
) -> Result<SegModel> {
    ensure!(!annotated.is_empty(), "segmentation pre-training needs at least one annotated image");
    let mut model = SegModel::new(cfg.seg.clone(), seg_init_seed(cfg.seed))?;
    let items = annotated_items(annotated)?;
    let fit = SegFit {
        phase: Phase::SegPretrain,
        iteration: 0,
        lr: cfg.seg_lr_initial,
        epochs: cfg.seg_initial_epochs(),
        batch_size: cfg.batch_size,
        validation,
        keep_best_every: Some(cfg.validate_every),
    };
    fit_segmentation(&mut model, &items, &fit, &mut phase_rng(cfg.seed, 0, Phase::SegPretrain), log)?;
    Ok(model)
}

/// The fully supervised baseline: segmentation pre-training alone.
pub fn train_fully_supervised(cfg: &ExperimentConfig, split: &DatasetSplit, log: &mut RunLog) -> Result<SegModel> {
    pretrain_segmentation(cfg, &split.train_annotated, &split.validation, log)
}

// ---------------------------------------------------------------------------
// Registration training.

/// A training pair; masks are present for mask-guided fine-tuning.
#[derive(Clone, Debug)]
pub struct RegPair {
    pub source_id: String,
    pub target_id: String,
    pub source: GrayImage,
    pub target: GrayImage,
    pub masks: Option<(SoftMask, SoftMask)>,
}

pub struct RegFit {
    pub phase: Phase,
    pub iteration: usize,
    pub lr: f64,
    pub epochs: usize,
}

/// Minimizes the registration objective over pairs drawn afresh each epoch.
/// Returns the mean loss of every epoch.
pub fn fit_registration(
    model: &mut RegModel,
    cfg: &ExperimentConfig,
    fit: &RegFit,
    rng: &mut ChaCha8Rng,
    log: &mut RunLog,
    mut pairs_for_epoch: impl FnMut(&mut ChaCha8Rng) -> Vec<RegPair>,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(model.params(), AdamConfig::with_lr(fit.lr));
    let mut history = Vec::with_capacity(fit.epochs);
    for epoch in 0..fit.epochs {
        let pairs = pairs_for_epoch(rng);
        ensure!(!pairs.is_empty(), "registration epoch has no pairs");
        let (mut loss_sum, mut sim_sum, mut dice_sum, mut smooth_sum, mut steps) = (0.0, 0.0, 0.0, 0.0, 0);
        for (step, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let with_masks = chunk[0].masks.is_some();
            ensure!(chunk.iter().all(|p| p.masks.is_some() == with_masks), "batch mixes masked and unmasked pairs");
            let ids: Vec<&str> = chunk.iter().flat_map(|p| [p.source_id.as_str(), p.target_id.as_str()]).collect();
            log.batch(fit.phase, fit.iteration, epoch, step, &ids)?;
            let xs = Tensor::from_planes(&chunk.iter().map(|p| &p.source).collect::<Vec<_>>())?;
            let xt = Tensor::from_planes(&chunk.iter().map(|p| &p.target).collect::<Vec<_>>())?;
            let masks = if with_masks {
                let ms = Tensor::from_planes(&chunk.iter().map(|p| &p.masks.as_ref().unwrap().0).collect::<Vec<_>>())?;
                let mt = Tensor::from_planes(&chunk.iter().map(|p| &p.masks.as_ref().unwrap().1).collect::<Vec<_>>())?;
                Some((ms, mt))
            } else {
                None
            };
            let mut g = Graph::new();
            let (sv, tv) = (g.constant(xs.clone()), g.constant(xt.clone()));
            let fields = model.forward(&mut g, sv, tv);
            let loss = registration_loss(
                &mut g,
                &fields,
                &xs,
                &xt,
                masks.as_ref().map(|(a, b)| (a, b)),
                &cfg.lambda_schedule,
            )?;
            loss_sum += g.value(loss.total).item() as f64;
            sim_sum += g.value(loss.similarity).item() as f64;
            smooth_sum += g.value(loss.smoothness).item() as f64;
            if let Some(d) = loss.dice {
                dice_sum += g.value(d).item() as f64;
            }
            steps += 1;
            let grads = g.backward(loss.total);
            adam.step(model.params_mut(), &grads);
        }
        let n = steps as f64;
        history.push(loss_sum / n);
        let has_masks = pairs[0].masks.is_some();
        log.epoch(EpochRecord {
            method: String::new(),
            phase: fit.phase,
            iteration: fit.iteration,
            epoch,
            loss: loss_sum / n,
            similarity: Some(sim_sum / n),
            dice: has_masks.then_some(dice_sum / n),
            smoothness: Some(smooth_sum / n),
            consistency: None,
            validation_dsc: None,
        })?;
    }
    ensure!(model.params().all_finite(), "registration training diverged");
    Ok(history)
}

/// Each image once as target, with a random other image as source.
fn random_pairs(images: &[&Sample], rng: &mut ChaCha8Rng) -> Vec<RegPair> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|t| {
            let mut s = rng.gen_range(0..images.len() - 1);
            if s >= t {
                s += 1;
            }
            RegPair {
                source_id: images[s].id.clone(),
                target_id: images[t].id.clone(),
                source: images[s].image.clone(),
                target: images[t].image.clone(),
                masks: None,
            }
        })
        .collect()
}

/// Unsupervised registration training on random pairs, no masks.
pub fn pretrain_registration(cfg: &ExperimentConfig, images: &[&Sample], log: &mut RunLog) -> Result<RegModel> {
    ensure!(images.len() >= 2, "registration pre-training needs at least two images, got {}", images.len());
    let mut model = RegModel::new(cfg.reg.clone(), reg_init_seed(cfg.seed))?;
    let fit = RegFit { phase: Phase::RegPretrain, iteration: 0, lr: cfg.reg_lr_initial, epochs: cfg.reg_initial_epochs() };
    let mut rng = phase_rng(cfg.seed, 0, Phase::RegPretrain);
    fit_registration(&mut model, cfg, &fit, &mut rng, log, |rng| random_pairs(images, rng))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Joint training.

/// Mean agreement of pseudo-masks with the hidden ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoAudit {
    pub fused_dsc: f64,
    pub seg_dsc: f64,
    pub reg_dsc: f64,
    pub mean_entropy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub validation_dsc: Option<f64>,
    /// Audit of the pseudo-masks generated by this iteration's models.
    pub pseudo: Option<PseudoAudit>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    pub seg: SegModel,
    pub reg: RegModel,
    pub pseudo_masks: BTreeMap<String, SoftPseudoMask>,
    pub history: Vec<IterationRecord>,
}

impl TrainState {
    pub fn new(seg: SegModel, reg: RegModel, validation: &[Sample]) -> Result<Self> {
        let validation_dsc = if validation.is_empty() { None } else { Some(mean_dsc(&seg, validation)?) };
        Ok(Self {
            iteration: 0,
            seg,
            reg,
            pseudo_masks: BTreeMap::new(),
            history: vec![IterationRecord { iteration: 0, validation_dsc, pseudo: None }],
        })
    }

    fn checkpoint_dir(run_dir: &Path, iteration: usize) -> PathBuf {
        run_dir.join("checkpoints").join(format!("iter_{iteration}"))
    }

    /// Writes both models and the history under `checkpoints/iter_<t>/`.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let dir = Self::checkpoint_dir(run_dir, self.iteration);
        self.seg.save(&dir.join("seg"), self.iteration)?;
        self.reg.save(&dir.join("reg"), self.iteration)?;
        let path = dir.join("history.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.history)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores the state saved at `iteration`. Pseudo-masks are regenerated
    /// by the next iteration and are not stored.
    pub fn load(run_dir: &Path, iteration: usize) -> Result<Self> {
        let dir = Self::checkpoint_dir(run_dir, iteration);
        let (seg, a) = SegModel::load(&dir.join("seg"))?;
        let (reg, b) = RegModel::load(&dir.join("reg"))?;
        ensure!(a == iteration && b == iteration, "checkpoint iteration mismatch in {}", dir.display());
        let path = dir.join("history.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let history: Vec<IterationRecord> = serde_json::from_slice(&bytes)?;
        ensure!(history.len() == iteration + 1, "history length does not match iteration {iteration}");
        Ok(Self { iteration, seg, reg, pseudo_masks: BTreeMap::new(), history })
    }
}

/// Fused pseudo-masks for every unannotated training image, in id order.
pub fn generate_pseudo_masks(
    seg: &SegModel,
    reg: &RegModel,
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    iteration: usize,
    log: &mut RunLog,
) -> Result<BTreeMap<String, SoftPseudoMask>> {
    let pool: Vec<&Sample> = split.train_annotated.iter().collect();
    let mut targets: Vec<&Sample> = split.train_unannotated.iter().collect();
    targets.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = phase_rng(cfg.seed, iteration, Phase::PseudoLabel);
    let mut out = BTreeMap::new();
    for (step, t) in targets.iter().enumerate() {
        let fused = combined_inference(seg, reg, &t.image, &pool, cfg.n_pseudo, &cfg.augment, &mut rng)?;
        let mut ids = vec![t.id.as_str()];
        for c in &fused.contributors {
            if let crate::pseudo::Contributor::Reg { source_id } = c {
                ids.push(source_id);
            }
        }
        log.batch(Phase::PseudoLabel, iteration, 0, step, &ids)?;
        out.insert(t.id.clone(), fused);
    }
    Ok(out)
}

/// Compares pseudo-masks with the hidden labels of the unannotated images.
pub fn audit_pseudo_masks(split: &DatasetSplit, masks: &BTreeMap<String, SoftPseudoMask>) -> Result<Option<PseudoAudit>> {
    if masks.is_empty() {
        return Ok(None);
    }
    let (mut f, mut s, mut r, mut e) = (0.0, 0.0, 0.0, 0.0);
    for (id, m) in masks {
        let gt = split.audit_mask(id).ok_or_else(|| Error::Contract(format!("no hidden label for {id}")))?;
        f += dsc_soft(&m.confidence, gt)?;
        s += dsc_soft(&m.seg_mean(), gt)?;
        r += dsc_soft(&m.reg_mean(), gt)?;
        e += m.mean_entropy();
    }
    let n = masks.len() as f64;
    Ok(Some(PseudoAudit { fused_dsc: f / n, seg_dsc: s / n, reg_dsc: r / n, mean_entropy: e / n, count: masks.len() }))
}

/// Writes seg, reg and fused confidences as 16-bit PNGs under `pseudo/iter_<t>/`.
pub fn persist_pseudo_masks(run_dir: &Path, iteration: usize, masks: &BTreeMap<String, SoftPseudoMask>) -> Result<()> {
    let dir = run_dir.join("pseudo").join(format!("iter_{iteration}"));
    for (id, m) in masks {
        write_gray16(&dir.join(format!("{id}_seg.png")), &m.seg_mean())?;
        write_gray16(&dir.join(format!("{id}_reg.png")), &m.reg_mean())?;
        write_gray16(&dir.join(format!("{id}_fused.png")), &m.confidence)?;
    }
    Ok(())
}

fn label_pseudo(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    log: &mut RunLog,
    run_dir: Option<&Path>,
) -> Result<()> {
    let masks = generate_pseudo_masks(&state.seg, &state.reg, cfg, split, state.iteration, log)?;
    if let Some(dir) = run_dir {
        persist_pseudo_masks(dir, state.iteration, &masks)?;
    }
    let audit = audit_pseudo_masks(split, &masks)?;
    if let Some(a) = &audit {
        log::info!(
            "iteration {}: pseudo-mask DSC fused {:.4} seg {:.4} reg {:.4}",
            state.iteration,
            a.fused_dsc,
            a.seg_dsc,
            a.reg_dsc
        );
    }
    state.history.last_mut().expect("history is never empty").pseudo = audit;
    state.pseudo_masks = masks;
    Ok(())
}

/// One co-training cycle: pseudo-label, fine-tune the segmenter on the
/// union, fine-tune the registration net with mask guidance.
pub fn run_iteration(
    mut state: TrainState,
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    log: &mut RunLog,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    label_pseudo(&mut state, cfg, split, log, run_dir)?;
    let t = state.iteration;

    let mut items = annotated_items(&split.train_annotated)?;
    for s in &split.train_unannotated {
        let pm = &state.pseudo_masks[&s.id];
        items.push(SegItem { id: &s.id, image: &s.image, target: pm.confidence.clone() });
    }
    let fit = SegFit {
        phase: Phase::SegFinetune,
        iteration: t,
        lr: cfg.seg_lr_later,
        epochs: cfg.seg_later_epochs(),
        batch_size: cfg.batch_size,
        validation: &split.validation,
        keep_best_every: None,
    };
    fit_segmentation(&mut state.seg, &items, &fit, &mut phase_rng(cfg.seed, t, Phase::SegFinetune), log)?;

    let sources: Vec<&Sample> = split.train_annotated.iter().collect();
    let targets: Vec<(&Sample, SoftMask)> = split
        .train()
        .map(|s| {
            let m = match &s.mask {
                Some(m) => m.to_soft(),
                None => state.pseudo_masks[&s.id].confidence.clone(),
            };
            (s, m)
        })
        .collect();
    let fit = RegFit { phase: Phase::RegFinetune, iteration: t, lr: cfg.reg_lr_later, epochs: cfg.reg_later_epochs() };
    let mut rng = phase_rng(cfg.seed, t, Phase::RegFinetune);
    fit_registration(&mut state.reg, cfg, &fit, &mut rng, log, |rng| {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(rng);
        order
            .into_iter()
            .map(|k| {
                let (tgt, tmask) = &targets[k];
                let src = sources[rng.gen_range(0..sources.len())];
                RegPair {
                    source_id: src.id.clone(),
                    target_id: tgt.id.clone(),
                    source: src.image.clone(),
                    target: tgt.image.clone(),
                    masks: Some((src.mask.as_ref().unwrap().to_soft(), tmask.clone())),
                }
            })
            .collect()
    })?;

    state.iteration += 1;
    let validation_dsc = if split.validation.is_empty() { None } else { Some(mean_dsc(&state.seg, &split.validation)?) };
    state.history.push(IterationRecord { iteration: state.iteration, validation_dsc, pseudo: None });
    if let Some(dir) = run_dir {
        state.save(dir)?;
    }
    Ok(state)
}

/// Continues `state` up to `cfg.n_iterations`, then labels once more with
/// the final models so the last history entry carries an audit too.
pub fn continue_joint(
    mut state: TrainState,
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    log: &mut RunLog,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    while state.iteration < cfg.n_iterations {
        state = run_iteration(state, cfg, split, log, run_dir)?;
    }
    if !split.train_unannotated.is_empty() {
        label_pseudo(&mut state, cfg, split, log, run_dir)?;
        if let Some(dir) = run_dir {
            state.save(dir)?;
        }
    }
    Ok(state)
}

/// Pre-trains both networks and runs the co-training loop.
pub fn train_joint(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    log: &mut RunLog,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    let seg = pretrain_segmentation(cfg, &split.train_annotated, &split.validation, log)?;
    let images: Vec<&Sample> = split.train().collect();
    let reg = pretrain_registration(cfg, &images, log)?;
    let state = TrainState::new(seg, reg, &split.validation)?;
    if let Some(dir) = run_dir {
        state.save(dir)?;
    }
    continue_joint(state, cfg, split, log, run_dir)
}

// ---------------------------------------------------------------------------
// Mean Teacher.

/// Consistency weight at `epoch`: 0 before the ramp, linear to the full weight across it.
pub fn consistency_weight(cfg: &ExperimentConfig, epoch: usize) -> f64 {
    let mt = &cfg.mean_teacher;
    let (a, b) = (cfg.mt_epoch(mt.ramp_start_epoch), cfg.mt_epoch(mt.ramp_end_epoch));
    let ramp = if epoch < a {
        0.0
    } else if epoch >= b {
        1.0
    } else {
        (epoch - a) as f64 / (b - a) as f64
    };
    mt.consistency_weight * ramp
}

/// Student trained with soft Dice on annotated images plus a squared-error
/// consistency term against the teacher on differently augmented unannotated
/// images. The teacher copies the student until the EMA start epoch and
/// follows it by EMA afterwards. Returns the validation-best teacher.
pub fn train_mean_teacher(cfg: &ExperimentConfig, split: &DatasetSplit, log: &mut RunLog) -> Result<SegModel> {
    cfg.validate()?;
    ensure!(!split.train_annotated.is_empty(), "Mean Teacher needs at least one annotated image");
    let mt = &cfg.mean_teacher;
    let mut student = SegModel::new(cfg.seg.clone(), seg_init_seed(cfg.seed))?;
    let mut teacher = student.clone();
    let mut adam = Adam::new(student.params(), AdamConfig::with_lr(cfg.seg_lr_initial));
    let mut rng = phase_rng(cfg.seed, 0, Phase::MeanTeacher);
    let labelled = annotated_items(&split.train_annotated)?;
    let unlabeled: Vec<&Sample> = split.train_unannotated.iter().collect();
    let ema_start = cfg.mt_epoch(mt.ema_start_epoch);
    let epochs = cfg.seg_initial_epochs();
    let mut best: Option<(f64, SegModel)> = None;
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let w = consistency_weight(cfg, epoch);
        let (mut loss_sum, mut cons_sum, mut steps) = (0.0, 0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut ids: Vec<&str> = chunk.iter().map(|&k| labelled[k].id).collect();
            let picked: Vec<&Sample> = if unlabeled.is_empty() {
                vec![]
            } else {
                (0..mt.unlabeled_batch).map(|_| unlabeled[rng.gen_range(0..unlabeled.len())]).collect()
            };
            ids.extend(picked.iter().map(|s| s.id.as_str()));
            log.batch(Phase::MeanTeacher, 0, epoch, step, &ids)?;

            let mut g = Graph::new();
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&k| labelled[k].image).collect();
            let tgts: Vec<&SoftMask> = chunk.iter().map(|&k| &labelled[k].target).collect();
            let x = g.constant(Tensor::from_planes(&imgs)?);
            let t = g.constant(Tensor::from_planes(&tgts)?);
            let y = student.forward(&mut g, x);
            let sup = g.soft_dice(y, t);
            let mut terms = vec![(sup, 1.0f32)];
            let mut cons_value = 0.0;
            if !picked.is_empty() {
                let specs: Vec<(AugmentSpec, AugmentSpec)> = picked
                    .iter()
                    .map(|_| (AugmentSpec::sample(&mut rng, &cfg.augment), AugmentSpec::sample(&mut rng, &cfg.augment)))
                    .collect();
                let student_views: Vec<GrayImage> =
                    picked.iter().zip(&specs).map(|(s, (a, _))| apply_augment(&s.image, a)).collect();
                let teacher_views: Vec<GrayImage> =
                    picked.iter().zip(&specs).map(|(s, (_, b))| apply_augment(&s.image, b)).collect();
                let teacher_preds = teacher.predict_batch(&teacher_views.iter().collect::<Vec<_>>())?;
                let targets: Vec<SoftMask> = teacher_preds
                    .iter()
                    .zip(&specs)
                    .map(|(p, (a, b))| apply_spatial(&invert_augment(p, b), a, BorderPolicy::MASK))
                    .collect();
                let xu = g.constant(Tensor::from_planes(&student_views.iter().collect::<Vec<_>>())?);
                let tu = g.constant(Tensor::from_planes(&targets.iter().collect::<Vec<_>>())?);
                let yu = student.forward(&mut g, xu);
                let cons = g.mse(yu, tu);
                cons_value = g.value(cons).item() as f64;
                if w > 0.0 {
                    terms.push((cons, w as f32));
                }
            }
            let loss = g.weighted_sum(&terms);
            loss_sum += g.value(loss).item() as f64;
            cons_sum += cons_value;
            steps += 1;
            let grads = g.backward(loss);
            adam.step(student.params_mut(), &grads);
            if epoch >= ema_start {
                ema_update(teacher.params_mut(), student.params(), mt.ema_decay as f32);
            } else {
                *teacher.params_mut() = student.params().clone();
            }
        }
        let mut val = None;
        if !split.validation.is_empty() && ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == epochs) {
            let v = mean_dsc(&teacher, &split.validation)?;
            val = Some(v);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, teacher.clone()));
            }
        }
        log.epoch(EpochRecord {
            method: String::new(),
            phase: Phase::MeanTeacher,
            iteration: 0,
            epoch,
            loss: loss_sum / steps as f64,
            similarity: None,
            dice: None,
            smoothness: None,
            consistency: Some(cons_sum / steps as f64),
            validation_dsc: val,
        })?;
    }
    Ok(best.map_or(teacher, |(_, m)| m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_split};

    fn tiny() -> (ExperimentConfig, DatasetSplit) {
        let mut cfg = ExperimentConfig::quick();
        cfg.seg_epochs_initial = 4;
        cfg.reg_epochs_initial = 10;
        cfg.n_iterations = 1;
        cfg.data.count = 16;
        cfg.split.validation_count = 2;
        cfg.annotation_rate = 0.2;
        let samples = generate_synthetic(&cfg.data, 3).unwrap();
        let split = make_split(&samples, cfg.annotation_rate, cfg.seed, &cfg.split).unwrap();
        (cfg, split)
    }

    #[test]
    fn phase_streams_are_distinct_and_reproducible() {
        let a: u64 = phase_rng(1, 0, Phase::SegPretrain).gen();
        let b: u64 = phase_rng(1, 0, Phase::RegPretrain).gen();
        let c: u64 = phase_rng(1, 1, Phase::SegPretrain).gen();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, phase_rng(1, 0, Phase::SegPretrain).gen::<u64>());
    }

    #[test]
    fn consistency_ramp() {
        let cfg = ExperimentConfig::paper();
        assert_eq!(consistency_weight(&cfg, 50), 0.0);
        assert_eq!(consistency_weight(&cfg, 150), 0.5);
        assert_eq!(consistency_weight(&cfg, 300), 1.0);
    }

    #[test]
    fn empty_inputs_are_contract_violations() {
        let (cfg, split) = tiny();
        let mut log = RunLog::in_memory("t");
        assert!(pretrain_segmentation(&cfg, &[], &split.validation, &mut log).is_err());
        let one: Vec<&Sample> = split.train().take(1).collect();
        assert!(pretrain_registration(&cfg, &one, &mut log).is_err());
    }

    #[test]
    fn joint_bookkeeping_and_label_identity() {
        let (cfg, split) = tiny();
        let mut log = RunLog::in_memory("joint");
        let state = train_joint(&cfg, &split, &mut log, None).unwrap();
        assert_eq!(state.iteration, 1);
        assert_eq!(state.history.len(), 2);
        assert!(state.history.iter().all(|h| h.pseudo.is_some()));
        let ids: Vec<&String> = state.pseudo_masks.keys().collect();
        let mut want: Vec<&String> = split.train_unannotated.iter().map(|s| &s.id).collect();
        want.sort();
        assert_eq!(ids, want);
        // Annotated labels are never replaced by pseudo-masks.
        assert!(split.train_annotated.iter().all(|s| !state.pseudo_masks.contains_key(&s.id)));
        let test_ids: Vec<&str> = split.test.iter().map(|s| s.id.as_str()).collect();
        for b in log.batches() {
            assert!(b.ids.split(' ').all(|id| !test_ids.contains(&id)));
        }
    }

    #[test]
    fn zero_iterations_return_pretrained_state() {
        let (mut cfg, split) = tiny();
        cfg.n_iterations = 0;
        let state = train_joint(&cfg, &split, &mut RunLog::in_memory("j"), None).unwrap();
        assert_eq!(state.iteration, 0);
        assert_eq!(state.history.len(), 1);
        let fs = train_fully_supervised(&cfg, &split, &mut RunLog::in_memory("fs")).unwrap();
        for id in fs.params().ids() {
            assert_eq!(fs.params().get(id), state.seg.params().get(id));
        }
    }

    #[test]
    fn mean_teacher_runs_and_is_deterministic() {
        let (mut cfg, split) = tiny();
        cfg.seg_epochs_initial = 10;
        let a = train_mean_teacher(&cfg, &split, &mut RunLog::in_memory("mt")).unwrap();
        let b = train_mean_teacher(&cfg, &split, &mut RunLog::in_memory("mt")).unwrap();
        for id in a.params().ids() {
            assert_eq!(a.params().get(id), b.params().get(id));
        }
    }
}
