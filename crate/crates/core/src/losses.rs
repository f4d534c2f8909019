//! Scalar training objectives with closed-form gradients.
//!
//! Every kernel is generic over the float type: the training graph runs them
//! in `f64` on `f32` activations, and gradient checks run them in `f64`
//! against finite differences.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::plane::{GrayImage, Plane, SoftMask};
use crate::warp::{self, BorderPolicy, DisplacementField, DisplacementPyramid};

/// Stabilizer for the Dice denominator and the GNCC normalizer.
pub const EPSILON: f64 = 1e-6;

/// A loss value plus a flag raised when a degenerate input hit the
/// stabilizer (empty masks, flat images, 1x1 fields).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T = f64> {
    pub value: T,
    pub degenerate: bool,
}

impl<T> LossValue<T> {
    fn new(value: T, degenerate: bool) -> Self {
        Self { value, degenerate }
    }
}

#[inline]
fn eps<T: Float>() -> T {
    T::from(EPSILON).unwrap()
}

// ---------------------------------------------------------------------------
// Soft Dice with squared denominator.

/// `1 - 2Σ(p·t) / (Σp² + Σt² + ε)`. Two all-zero masks score 0 (flagged).
pub(crate) fn soft_dice_slice<T: Float>(pred: &[T], target: &[T]) -> LossValue<T> {
    let (mut inter, mut pp, mut tt) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred.iter().zip(target) {
        inter = inter + p * t;
        pp = pp + p * p;
        tt = tt + t * t;
    }
    if pp == T::zero() && tt == T::zero() {
        return LossValue::new(T::zero(), true);
    }
    let two = T::from(2.0).unwrap();
    LossValue::new(T::one() - two * inter / (pp + tt + eps()), false)
}

/// Gradient of [`soft_dice_slice`] with respect to `pred`, scaled by `scale`
/// and accumulated into `grad`.
pub(crate) fn soft_dice_grad_slice<T: Float>(pred: &[T], target: &[T], scale: T, grad: &mut [T]) {
    let (mut inter, mut pp, mut tt) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred.iter().zip(target) {
        inter = inter + p * t;
        pp = pp + p * p;
        tt = tt + t * t;
    }
    if pp == T::zero() && tt == T::zero() {
        return;
    }
    let two = T::from(2.0).unwrap();
    let denom = pp + tt + eps();
    let a = -two / denom;
    let b = two * two * inter / (denom * denom);
    for ((g, &p), &t) in grad.iter_mut().zip(pred).zip(target) {
        *g = *g + scale * (a * t + b * p);
    }
}

pub fn soft_dice_loss<T: Float>(pred: &Plane<T>, target: &Plane<T>) -> Result<LossValue<T>> {
    ensure!(
        pred.same_shape(target),
        "soft dice shape mismatch: {:?} vs {:?}",
        pred.shape(),
        target.shape()
    );
    Ok(soft_dice_slice(pred.as_slice(), target.as_slice()))
}

/// d(soft Dice)/d(pred).
pub fn soft_dice_loss_grad<T: Float>(pred: &Plane<T>, target: &Plane<T>) -> Result<Plane<T>> {
    ensure!(pred.same_shape(target), "soft dice shape mismatch");
    let mut g = vec![T::zero(); pred.len()];
    soft_dice_grad_slice(pred.as_slice(), target.as_slice(), T::one(), &mut g);
    Plane::new(pred.height(), pred.width(), g)
}

// ---------------------------------------------------------------------------
// Global normalized cross-correlation.

struct NccStats<T> {
    n: T,
    mean_x: T,
    mean_y: T,
    cov: T,
    sd_x: T,
    sd_y: T,
}

fn ncc_stats<T: Float>(x: &[T], y: &[T]) -> NccStats<T> {
    let n = T::from(x.len()).unwrap();
    let mean_x = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let mean_y = y.iter().fold(T::zero(), |a, &v| a + v) / n;
    let (mut cov, mut vx, mut vy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mean_x, b - mean_y);
        cov = cov + da * db;
        vx = vx + da * da;
        vy = vy + db * db;
    }
    NccStats { n, mean_x, mean_y, cov: cov / n, sd_x: (vx / n).sqrt(), sd_y: (vy / n).sqrt() }
}

/// `-(1/|Ω|) Σ (x-x̄)(y-ȳ) / max(σx·σy, ε)` with σ the population standard deviation.
pub(crate) fn gncc_slice<T: Float>(x: &[T], y: &[T]) -> LossValue<T> {
    let s = ncc_stats(x, y);
    let prod = s.sd_x * s.sd_y;
    let degenerate = prod < eps();
    LossValue::new(-s.cov / prod.max(eps()), degenerate)
}

/// Gradient of [`gncc_slice`] with respect to `x`, scaled and accumulated.
pub(crate) fn gncc_grad_slice<T: Float>(x: &[T], y: &[T], scale: T, grad: &mut [T]) {
    let s = ncc_stats(x, y);
    let prod = s.sd_x * s.sd_y;
    if prod < eps() {
        // Normalizer is the constant ε here; only the covariance moves.
        let k = -scale / (s.n * eps());
        for (g, &b) in grad.iter_mut().zip(y) {
            *g = *g + k * (b - s.mean_y);
        }
        return;
    }
    // G = -cov / (σx σy); dcov/dx_k = (y_k - ȳ)/n; dσx/dx_k = (x_k - x̄)/(n σx).
    let inv = T::one() / prod;
    let c = s.cov * inv / (s.sd_x * s.sd_x);
    for ((g, &a), &b) in grad.iter_mut().zip(x).zip(y) {
        let d = -((b - s.mean_y) * inv - c * (a - s.mean_x)) / s.n;
        *g = *g + scale * d;
    }
}

pub fn gncc<T: Float>(x: &Plane<T>, y: &Plane<T>) -> Result<LossValue<T>> {
    ensure!(x.same_shape(y), "gncc shape mismatch: {:?} vs {:?}", x.shape(), y.shape());
    Ok(gncc_slice(x.as_slice(), y.as_slice()))
}

/// d(gncc)/dx.
pub fn gncc_grad<T: Float>(x: &Plane<T>, y: &Plane<T>) -> Result<Plane<T>> {
    ensure!(x.same_shape(y), "gncc shape mismatch");
    let mut g = vec![T::zero(); x.len()];
    gncc_grad_slice(x.as_slice(), y.as_slice(), T::one(), &mut g);
    Plane::new(x.height(), x.width(), g)
}

// ---------------------------------------------------------------------------
// Displacement smoothness.

/// Average over the two axes of the mean squared forward difference of the
/// displacement vector. Axes with no neighbor pairs contribute zero.
pub(crate) fn smoothness_slice<T: Float>(dy: &[T], dx: &[T], h: usize, w: usize) -> LossValue<T> {
    let half = T::from(0.5).unwrap();
    let mut total = T::zero();
    if w > 1 {
        let mut acc = T::zero();
        for i in 0..h {
            for j in 0..w - 1 {
                let (k, q) = (i * w + j, i * w + j + 1);
                let (a, b) = (dy[q] - dy[k], dx[q] - dx[k]);
                acc = acc + a * a + b * b;
            }
        }
        total = total + acc / T::from(h * (w - 1)).unwrap();
    }
    if h > 1 {
        let mut acc = T::zero();
        for i in 0..h - 1 {
            for j in 0..w {
                let (k, q) = (i * w + j, (i + 1) * w + j);
                let (a, b) = (dy[q] - dy[k], dx[q] - dx[k]);
                acc = acc + a * a + b * b;
            }
        }
        total = total + acc / T::from((h - 1) * w).unwrap();
    }
    LossValue::new(half * total, h == 1 && w == 1)
}

/// Gradient of [`smoothness_slice`], scaled and accumulated into planar `(gdy, gdx)`.
pub(crate) fn smoothness_grad_slice<T: Float>(
    dy: &[T],
    dx: &[T],
    h: usize,
    w: usize,
    scale: T,
    gdy: &mut [T],
    gdx: &mut [T],
) {
    let mut pairs = |n_pairs: usize, idx: &mut dyn Iterator<Item = (usize, usize)>| {
        let c = scale / T::from(n_pairs).unwrap();
        for (k, q) in idx {
            let (a, b) = (dy[q] - dy[k], dx[q] - dx[k]);
            gdy[q] = gdy[q] + c * a;
            gdy[k] = gdy[k] - c * a;
            gdx[q] = gdx[q] + c * b;
            gdx[k] = gdx[k] - c * b;
        }
    };
    if w > 1 {
        pairs(h * (w - 1), &mut (0..h).flat_map(|i| (0..w - 1).map(move |j| (i * w + j, i * w + j + 1))));
    }
    if h > 1 {
        pairs((h - 1) * w, &mut (0..h - 1).flat_map(|i| (0..w).map(move |j| (i * w + j, (i + 1) * w + j))));
    }
}

pub fn smoothness_penalty<T: Float>(d: &DisplacementField<T>) -> LossValue<T> {
    let (h, w) = d.shape();
    smoothness_slice(d.dy(), d.dx(), h, w)
}

pub fn smoothness_penalty_grad<T: Float>(d: &DisplacementField<T>) -> DisplacementField<T> {
    let (h, w) = d.shape();
    let mut gdy = vec![T::zero(); h * w];
    let mut gdx = vec![T::zero(); h * w];
    smoothness_grad_slice(d.dy(), d.dx(), h, w, T::one(), &mut gdy, &mut gdx);
    DisplacementField::from_components(h, w, gdy, gdx).expect("finite gradient")
}

// ---------------------------------------------------------------------------
// Multi-resolution registration objective.

/// Per-level smoothness weights, ordered coarse to fine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LambdaSchedule(Vec<f64>);

impl LambdaSchedule {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        ensure!(!weights.is_empty(), "lambda schedule must be non-empty");
        ensure!(
            weights.iter().all(|w| w.is_finite() && *w > 0.0),
            "lambda weights must be positive, got {weights:?}"
        );
        Ok(Self(weights))
    }

    /// `first, first/2, first/4, ...` over `levels` levels.
    pub fn halving(first: f64, levels: usize) -> Self {
        Self((0..levels).map(|i| first / (1u64 << i) as f64).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl Default for LambdaSchedule {
    /// 128, 64, 32, 16, 8.
    fn default() -> Self {
        Self::halving(128.0, 5)
    }
}

/// Per-level breakdown of [`registration_objective`].
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationTerms {
    pub similarity: Vec<f64>,
    pub dice: Vec<f64>,
    pub smoothness: Vec<f64>,
    pub total: f64,
}

/// `(1/K) Σ_i [gncc(warp(x_S, D_i), x_T) + dice(warp(y_S, D_i), y_T) + λ_i ‖∇D_i‖]`
/// with images and masks average-pooled to each level's resolution. The Dice
/// term is zero when masks are absent.
pub fn registration_objective(
    pyramid: &DisplacementPyramid<f32>,
    source: &GrayImage,
    target: &GrayImage,
    masks: Option<(&SoftMask, &SoftMask)>,
    schedule: &LambdaSchedule,
) -> Result<RegistrationTerms> {
    let k = pyramid.depth();
    ensure!(
        k == schedule.depth(),
        "pyramid depth {k} does not match lambda schedule depth {}",
        schedule.depth()
    );
    ensure!(source.same_shape(target), "source and target shapes differ");
    ensure!(
        pyramid.finest().shape() == source.shape(),
        "finest field {:?} does not match image {:?}",
        pyramid.finest().shape(),
        source.shape()
    );
    let xs = warp::downsample(&source.to_f64(), k)?;
    let xt = warp::downsample(&target.to_f64(), k)?;
    let ys_yt = match masks {
        Some((ys, yt)) => {
            ensure!(ys.same_shape(source) && yt.same_shape(source), "mask shapes differ from images");
            Some((warp::downsample(&ys.to_f64(), k)?, warp::downsample(&yt.to_f64(), k)?))
        }
        None => None,
    };
    let mut terms = RegistrationTerms { similarity: vec![], dice: vec![], smoothness: vec![], total: 0.0 };
    for (i, field) in pyramid.levels().iter().enumerate() {
        let d = field.cast::<f64>();
        let warped = warp::warp(&xs[i], &d, BorderPolicy::IMAGE)?;
        let sim = gncc(&warped, &xt[i])?.value;
        let dice = match &ys_yt {
            Some((ys, yt)) => soft_dice_loss(&warp::warp(&ys[i], &d, BorderPolicy::MASK)?, &yt[i])?.value,
            None => 0.0,
        };
        let smooth = smoothness_penalty(&d).value;
        terms.total += sim + dice + schedule.weights()[i] * smooth;
        terms.similarity.push(sim);
        terms.dice.push(dice);
        terms.smoothness.push(smooth);
    }
    terms.total /= k as f64;
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane<f64> {
        Plane::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn dice_identity_disjoint_and_constant_fields() {
        let m = Plane::from_fn(6, 6, |i, j| if i < 3 && j < 2 { 1.0f64 } else { 0.0 });
        assert!(soft_dice_loss(&m, &m).unwrap().value.abs() < 1e-6);
        let other = m.map(|v| 1.0 - v);
        assert!((soft_dice_loss(&m, &other).unwrap().value - 1.0).abs() < 1e-12);
        let half = Plane::filled(5, 5, 0.5f64);
        let ones = Plane::filled(5, 5, 1.0f64);
        assert!((soft_dice_loss(&half, &ones).unwrap().value - 0.2).abs() < 1e-6);
    }

    #[test]
    fn dice_empty_masks_score_zero_and_flag() {
        let z = Plane::filled(4, 4, 0.0f64);
        let v = soft_dice_loss(&z, &z).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.degenerate);
        assert!(soft_dice_loss(&z, &Plane::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn gncc_self_affine_and_anti_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_plane(&mut rng, 8, 8);
        assert!((gncc(&x, &x).unwrap().value + 1.0).abs() < 1e-12);
        let affine = x.map(|v| 3.0 * v + 0.7);
        assert!((gncc(&x, &affine).unwrap().value + 1.0).abs() < 1e-12);
        let anti = x.map(|v| 2.0 - v);
        assert!((gncc(&x, &anti).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gncc_flat_image_is_flagged_not_fatal() {
        let flat = Plane::filled(4, 4, 0.3f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_plane(&mut rng, 4, 4);
        let v = gncc(&flat, &x).unwrap();
        assert!(v.degenerate);
        assert!(v.value.abs() < 1e-12);
        assert!(gncc_grad(&flat, &x).unwrap().as_slice().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn smoothness_cases() {
        assert_eq!(smoothness_penalty(&DisplacementField::constant(5, 7, 3.0f64, -2.0)).value, 0.0);
        assert_eq!(smoothness_penalty(&DisplacementField::<f64>::zeros(4, 4)).value, 0.0);
        let ramp = DisplacementField::from_fn(6, 9, |_, j| (0.0f64, j as f64));
        assert!((smoothness_penalty(&ramp).value - 0.5).abs() < 1e-12);
        let single = smoothness_penalty(&DisplacementField::constant(1, 1, 4.0f64, 1.0));
        assert_eq!(single.value, 0.0);
        assert!(single.degenerate);
    }

    #[test]
    fn lambda_schedule_defaults_and_validation() {
        assert_eq!(LambdaSchedule::default().weights(), &[128.0, 64.0, 32.0, 16.0, 8.0]);
        assert!(LambdaSchedule::new(vec![1.0, 0.0]).is_err());
        assert!(LambdaSchedule::new(vec![]).is_err());
    }

    fn ramp_image(n: usize) -> GrayImage {
        Plane::from_fn(n, n, |i, j| ((i * 3 + j * 5) % 11) as f32 / 10.0)
    }

    #[test]
    fn objective_identity_alignment() {
        let img = ramp_image(8);
        let pyr = DisplacementPyramid::new(vec![DisplacementField::zeros(8, 8)]).unwrap();
        let sched = LambdaSchedule::new(vec![128.0]).unwrap();
        let t = registration_objective(&pyr, &img, &img, None, &sched).unwrap();
        assert!((t.total + 1.0).abs() < 1e-9);
        let mask = Plane::from_fn(8, 8, |i, j| if (2..6).contains(&i) && (1..5).contains(&j) { 1.0 } else { 0.0 });
        let t = registration_objective(&pyr, &img, &img, Some((&mask, &mask)), &sched).unwrap();
        assert!((t.total + 1.0).abs() < 1e-6);
    }

    #[test]
    fn objective_contract_violations() {
        let img = ramp_image(8);
        let pyr = DisplacementPyramid::new(vec![DisplacementField::zeros(8, 8)]).unwrap();
        assert!(registration_objective(&pyr, &img, &img, None, &LambdaSchedule::default()).is_err());
        let small = DisplacementPyramid::new(vec![DisplacementField::zeros(4, 4)]).unwrap();
        let sched = LambdaSchedule::new(vec![1.0]).unwrap();
        assert!(registration_objective(&small, &img, &img, None, &sched).is_err());
    }

    #[test]
    fn objective_two_levels_matches_hand_evaluation() {
        // Independent per-level evaluation: pool by hand, shift by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: GrayImage = Plane::from_fn(8, 8, |_, _| rng.gen::<f32>());
        let xt: GrayImage = Plane::from_fn(8, 8, |_, _| rng.gen::<f32>());
        let ys: SoftMask = Plane::from_fn(8, 8, |i, j| if i > 2 && j < 5 { 1.0 } else { 0.0 });
        let yt: SoftMask = Plane::from_fn(8, 8, |i, j| if i > 1 && j < 6 { 1.0 } else { 0.0 });
        // Integer shifts make the warp an index lookup.
        let coarse = DisplacementField::constant(4, 4, 1.0f32, 0.0);
        let fine = DisplacementField::constant(8, 8, 0.0f32, -1.0);
        let pyr = DisplacementPyramid::new(vec![coarse, fine]).unwrap();
        let sched = LambdaSchedule::new(vec![2.0, 1.0]).unwrap();
        let got = registration_objective(&pyr, &xs, &xt, Some((&ys, &yt)), &sched).unwrap();

        let pool = |p: &Plane<f32>| -> Vec<f64> {
            let mut v = vec![0.0; 16];
            for i in 0..4 {
                for j in 0..4 {
                    v[i * 4 + j] = (p.get(2 * i, 2 * j) as f64
                        + p.get(2 * i + 1, 2 * j) as f64
                        + p.get(2 * i, 2 * j + 1) as f64
                        + p.get(2 * i + 1, 2 * j + 1) as f64)
                        / 4.0;
                }
            }
            v
        };
        let ncc = |a: &[f64], b: &[f64]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
            let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
            -cov / (sa * sb)
        };
        let dice = |a: &[f64], b: &[f64]| -> f64 {
            let i: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let s: f64 = a.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|y| y * y).sum::<f64>();
            1.0 - 2.0 * i / (s + 1e-6)
        };
        // Level 0: 4x4, shift one row down with clamp for image, zero for mask.
        let (pxs, pxt, pys, pyt) = (pool(&xs), pool(&xt), pool(&ys), pool(&yt));
        let shift = |v: &[f64], n: usize, dr: i64, dc: i64, zero: bool| -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for i in 0..n as i64 {
                for j in 0..n as i64 {
                    let (r, c) = (i + dr, j + dc);
                    let inside = r >= 0 && r < n as i64 && c >= 0 && c < n as i64;
                    out[(i * n as i64 + j) as usize] = if inside {
                        v[(r * n as i64 + c) as usize]
                    } else if zero {
                        0.0
                    } else {
                        let (r, c) = (r.clamp(0, n as i64 - 1), c.clamp(0, n as i64 - 1));
                        v[(r * n as i64 + c) as usize]
                    };
                }
            }
            out
        };
        let l0 = ncc(&shift(&pxs, 4, 1, 0, false), &pxt) + dice(&shift(&pys, 4, 1, 0, true), &pyt);
        let flat = |p: &Plane<f32>| p.as_slice().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let l1 = ncc(&shift(&flat(&xs), 8, 0, -1, false), &flat(&xt))
            + dice(&shift(&flat(&ys), 8, 0, -1, true), &flat(&yt));
        let expected = (l0 + l1) / 2.0;
        assert!((got.total - expected).abs() < 1e-9, "{} vs {expected}", got.total);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_plane(&mut rng, 6, 6);
            let b = random_plane(&mut rng, 6, 6);
            let ab = soft_dice_loss(&a, &b).unwrap().value;
            let ba = soft_dice_loss(&b, &a).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((-1e-9..=1.0).contains(&ab));
        }

        #[test]
        fn gncc_affine_invariant_and_bounded(seed in any::<u64>(), a in 0.05f64..20.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_plane(&mut rng, 8, 8);
            let y = random_plane(&mut rng, 8, 8);
            let base = gncc(&x, &y).unwrap().value;
            let scaled = gncc(&x.map(|v| a * v + b), &y).unwrap().value;
            prop_assert!((base - scaled).abs() < 1e-6);
            let scaled_y = gncc(&x, &y.map(|v| a * v + b)).unwrap().value;
            prop_assert!((base - scaled_y).abs() < 1e-6);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        }

        #[test]
        fn objective_without_masks_is_masked_minus_dice(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = |rng: &mut ChaCha8Rng| Plane::from_fn(8, 8, |_, _| rng.gen::<f32>());
            let (xs, xt, ys, yt) = (img(&mut rng), img(&mut rng), img(&mut rng), img(&mut rng));
            let field = |rng: &mut ChaCha8Rng, n: usize| {
                DisplacementField::from_fn(n, n, |_, _| (rng.gen_range(-1.5..1.5f32), rng.gen_range(-1.5..1.5f32)))
            };
            let pyr = DisplacementPyramid::new(vec![field(&mut rng, 4), field(&mut rng, 8)]).unwrap();
            let sched = LambdaSchedule::new(vec![4.0, 2.0]).unwrap();
            let with = registration_objective(&pyr, &xs, &xt, Some((&ys, &yt)), &sched).unwrap();
            let without = registration_objective(&pyr, &xs, &xt, None, &sched).unwrap();
            let dice_mean = with.dice.iter().sum::<f64>() / 2.0;
            prop_assert!((with.total - dice_mean - without.total).abs() < 1e-12);
        }
    }
}
