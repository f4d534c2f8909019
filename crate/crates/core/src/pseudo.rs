//! Soft pseudo-masks: test-time-augmented segmentation predictions fused
//! with registration-warped source masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{ensure, Error, Result};
use crate::losses::gncc;
use crate::models::{RegModel, SegModel};
use crate::plane::{GrayImage, SoftMask};
use crate::warp::{apply_augment, invert_augment, warp, AugmentRanges, AugmentSpec, BorderPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Contributor {
    Seg { augment: AugmentSpec },
    Reg { source_id: String },
}

/// Per-pixel mean of the contributing masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPseudoMask {
    pub confidence: SoftMask,
    pub seg_masks: Vec<SoftMask>,
    pub reg_masks: Vec<SoftMask>,
    pub contributors: Vec<Contributor>,
}

impl SoftPseudoMask {
    /// Mean of the segmentation contributions alone.
    pub fn seg_mean(&self) -> SoftMask {
        mean_of(&self.seg_masks).expect("non-empty seg masks")
    }

    /// Mean of the registration contributions alone.
    pub fn reg_mean(&self) -> SoftMask {
        mean_of(&self.reg_masks).expect("non-empty reg masks")
    }

    /// Mean binary entropy (nats) of the confidence map.
    pub fn mean_entropy(&self) -> f64 {
        let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) };
        self.confidence.as_slice().iter().map(|&p| h(p as f64)).sum::<f64>() / self.confidence.len() as f64
    }
}

fn mean_of(masks: &[SoftMask]) -> Result<SoftMask> {
    ensure!(!masks.is_empty(), "cannot average zero masks");
    let shape = masks[0].shape();
    ensure!(masks.iter().all(|m| m.shape() == shape), "masks differ in shape");
    let n = masks.len() as f64;
    let mut acc = vec![0.0f64; masks[0].len()];
    for m in masks {
        for (a, &v) in acc.iter_mut().zip(m.as_slice()) {
            *a += v as f64;
        }
    }
    SoftMask::new(shape.0, shape.1, acc.into_iter().map(|v| ((v / n) as f32).clamp(0.0, 1.0)).collect())
}

/// Predictions on augmented copies mapped back to the original frame, one per spec.
pub fn tta_seg_masks_with(m: &SegModel, img: &GrayImage, specs: &[AugmentSpec]) -> Result<Vec<SoftMask>> {
    ensure!(!specs.is_empty(), "test-time augmentation needs at least one view");
    let views: Vec<GrayImage> = specs.iter().map(|a| apply_augment(img, a)).collect();
    let refs: Vec<&GrayImage> = views.iter().collect();
    let preds = m.predict_batch(&refs)?;
    Ok(preds.iter().zip(specs).map(|(p, a)| invert_augment(p, a)).collect())
}

/// `n` independently sampled augmentations and their inverted predictions.
pub fn tta_seg_masks<R: Rng + ?Sized>(
    m: &SegModel,
    img: &GrayImage,
    n: usize,
    ranges: &AugmentRanges,
    rng: &mut R,
) -> Result<(Vec<SoftMask>, Vec<AugmentSpec>)> {
    ensure!(n >= 1, "test-time augmentation needs n >= 1");
    let specs: Vec<AugmentSpec> = (0..n).map(|_| AugmentSpec::sample(rng, ranges)).collect();
    Ok((tta_seg_masks_with(m, img, &specs)?, specs))
}

/// The `n` pool members with the largest `|gncc|` against `target`, ties kept in pool order.
pub fn select_sources<'a>(target: &GrayImage, pool: &[&'a Sample], n: usize) -> Result<Vec<&'a Sample>> {
    ensure!(!pool.is_empty(), "source pool is empty");
    let mut scored = Vec::with_capacity(pool.len());
    for (k, s) in pool.iter().enumerate() {
        scored.push((gncc(&s.image, target)?.value.abs(), k));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, k)| pool[k]).collect())
}

/// Each source mask warped into the target frame by the finest registration field.
pub fn reg_masks(m: &RegModel, target: &GrayImage, sources: &[&Sample]) -> Result<Vec<SoftMask>> {
    for s in sources {
        ensure!(s.mask.is_some(), "registration source {} has no mask", s.id);
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let pairs: Vec<(&GrayImage, &GrayImage)> = sources.iter().map(|s| (&s.image, target)).collect();
    let pyramids = m.register_batch(&pairs)?;
    sources
        .iter()
        .zip(&pyramids)
        .map(|(s, pyr)| warp(&s.mask.as_ref().unwrap().to_soft(), pyr.finest(), BorderPolicy::MASK))
        .collect()
}

/// Mean of all segmentation and registration masks.
pub fn fuse(
    seg_masks: Vec<SoftMask>,
    reg_masks: Vec<SoftMask>,
    seg_specs: &[AugmentSpec],
    source_ids: &[String],
) -> Result<SoftPseudoMask> {
    if seg_masks.len() != reg_masks.len() {
        return Err(Error::Contract(format!(
            "fusing {} segmentation masks with {} registration masks",
            seg_masks.len(),
            reg_masks.len()
        )));
    }
    ensure!(seg_specs.len() == seg_masks.len() && source_ids.len() == reg_masks.len(), "contributor records mismatch");
    let all: Vec<SoftMask> = seg_masks.iter().chain(&reg_masks).cloned().collect();
    let confidence = mean_of(&all)?;
    let contributors = seg_specs
        .iter()
        .map(|a| Contributor::Seg { augment: *a })
        .chain(source_ids.iter().map(|id| Contributor::Reg { source_id: id.clone() }))
        .collect();
    Ok(SoftPseudoMask { confidence, seg_masks, reg_masks, contributors })
}

/// Fused TTA and registration masks for one image. With a pool smaller than
/// `n` the segmentation side is cut to the pool size so both halves stay equal.
pub fn combined_inference<R: Rng + ?Sized>(
    seg: &SegModel,
    reg: &RegModel,
    img: &GrayImage,
    pool: &[&Sample],
    n: usize,
    ranges: &AugmentRanges,
    rng: &mut R,
) -> Result<SoftPseudoMask> {
    let sources = select_sources(img, pool, n)?;
    let (seg_masks, specs) = tta_seg_masks(seg, img, sources.len(), ranges, rng)?;
    let regs = reg_masks(reg, img, &sources)?;
    let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
    fuse(seg_masks, regs, &specs, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{RegConfig, SegConfig};
    use crate::plane::Plane;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg() -> SegModel {
        SegModel::new(SegConfig { image_size: 16, base_width: 4, depth: 2, leaky_slope: 0.01 }, 1).unwrap()
    }

    fn reg() -> RegModel {
        let cfg = RegConfig {
            image_size: 16,
            levels: 3,
            encoder_widths: vec![4, 4, 4],
            decoder_widths: vec![4, 4, 4],
            leaky_slope: 0.2,
        };
        RegModel::new(cfg, 1).unwrap()
    }

    fn sample(id: &str, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Plane::from_fn(16, 16, |_, _| rng.gen::<f32>());
        let mask = Plane::from_fn(16, 16, |i, j| (i + j + seed as usize) % 3 == 0);
        Sample { id: id.into(), image, mask: Some(mask) }
    }

    #[test]
    fn identity_tta_equals_plain_prediction_and_is_seeded() {
        let m = seg();
        let img = sample("a", 0).image;
        let masks = tta_seg_masks_with(&m, &img, &[AugmentSpec::IDENTITY]).unwrap();
        assert_eq!(masks[0], m.predict(&img).unwrap());
        let r = AugmentRanges::default();
        let a = tta_seg_masks(&m, &img, 3, &r, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = tta_seg_masks(&m, &img, 3, &r, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_ranks_copy_first_and_matches_brute_force() {
        let pool: Vec<Sample> = (0..20).map(|k| sample(&format!("p{k}"), k)).collect();
        let refs: Vec<&Sample> = pool.iter().collect();
        let target = pool[13].image.clone();
        let chosen = select_sources(&target, &refs, 5).unwrap();
        assert_eq!(chosen[0].id, "p13");
        let mut oracle: Vec<(f64, usize)> = pool
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (x, y) = (s.image.to_f64(), target.to_f64());
                let n = x.len() as f64;
                let mx = x.as_slice().iter().sum::<f64>() / n;
                let my = y.as_slice().iter().sum::<f64>() / n;
                let cov: f64 =
                    x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                let sx = (x.as_slice().iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
                let sy = (y.as_slice().iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
                ((cov / (sx * sy)).abs(), k)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<String> = oracle[..5].iter().map(|&(_, k)| format!("p{k}")).collect();
        let got: Vec<String> = chosen.iter().map(|s| s.id.clone()).collect();
        assert_eq!(got, want);
        let small = &refs[..3];
        assert_eq!(select_sources(&target, small, 5).unwrap().len(), 3);
        assert!(select_sources(&target, &[], 5).is_err());
    }

    #[test]
    fn identity_registration_copies_source_masks_in_order() {
        let m = reg();
        let a = sample("a", 1);
        let b = sample("b", 2);
        let out = reg_masks(&m, &a.image, &[&a, &b]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], a.mask.as_ref().unwrap().to_soft());
        assert_eq!(out[1], b.mask.as_ref().unwrap().to_soft());
        let unlabeled = Sample { mask: None, ..a.clone() };
        assert!(reg_masks(&m, &a.image, &[&unlabeled]).is_err());
    }

    #[test]
    fn fuse_cases() {
        let ones = Plane::filled(4, 4, 1.0f32);
        let zeros = Plane::filled(4, 4, 0.0f32);
        let specs = [AugmentSpec::IDENTITY; 2];
        let ids = ["x".to_string(), "y".to_string()];
        let f = fuse(vec![ones.clone(), ones.clone()], vec![zeros.clone(), zeros.clone()], &specs, &ids).unwrap();
        assert!(f.confidence.as_slice().iter().all(|&v| v == 0.5));
        assert_eq!(f.contributors.len(), 4);
        let same = fuse(vec![ones.clone(); 2], vec![ones.clone(); 2], &specs, &ids).unwrap();
        assert_eq!(same.confidence, ones);
        assert!(fuse(vec![ones.clone()], vec![], &specs[..1], &[]).is_err());
    }

    proptest! {
        #[test]
        fn fuse_is_a_bounded_permutation_invariant_mean(
            vals in proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 16), 6)
        ) {
            let masks: Vec<SoftMask> = vals.iter().map(|v| Plane::new(4, 4, v.clone()).unwrap()).collect();
            let specs = [AugmentSpec::IDENTITY; 3];
            let ids = ["a".to_string(), "b".to_string(), "c".to_string()];
            let f = fuse(masks[..3].to_vec(), masks[3..].to_vec(), &specs, &ids).unwrap();
            let mut rev = masks.clone();
            rev.reverse();
            let g = fuse(rev[..3].to_vec(), rev[3..].to_vec(), &specs, &ids).unwrap();
            for k in 0..16 {
                let col: Vec<f32> = masks.iter().map(|m| m.as_slice()[k]).collect();
                let direct = col.iter().map(|&v| v as f64).sum::<f64>() / 6.0;
                let c = f.confidence.as_slice()[k];
                prop_assert!((c as f64 - direct).abs() < 1e-7);
                prop_assert!(c >= col.iter().cloned().fold(1.0, f32::min) && c <= col.iter().cloned().fold(0.0, f32::max));
                prop_assert_eq!(c, g.confidence.as_slice()[k]);
                if col.iter().all(|&v| v > 0.5) { prop_assert!(c > 0.5); }
                if col.iter().all(|&v| v < 0.5) { prop_assert!(c < 0.5); }
            }
        }
    }
}
