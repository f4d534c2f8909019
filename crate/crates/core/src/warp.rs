//! Displacement fields and the spatial-transformer resampling core.
//!
//! Convention throughout: a field `d` warps an input by
//! `output(p) = input(p + d(p))`, with offsets in pixel units and channel
//! order (row offset, column offset). Sampling is bilinear.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::plane::{GrayImage, Plane, SoftMask};

/// What a sample outside the grid reads as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BorderPolicy {
    /// Sampling coordinates are clamped to the grid.
    ClampToEdge,
    /// Taps outside the grid contribute zero.
    ZeroFill,
}

impl BorderPolicy {
    /// Default policy for intensity images.
    pub const IMAGE: BorderPolicy = BorderPolicy::ClampToEdge;
    /// Default policy for masks: no confidence outside the field of view.
    pub const MASK: BorderPolicy = BorderPolicy::ZeroFill;
}

/// Dense per-pixel offsets, stored as two planar components.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T = f32> {
    height: usize,
    width: usize,
    dy: Vec<T>,
    dx: Vec<T>,
}

impl<T: Float> DisplacementField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, T::zero(), T::zero())
    }

    pub fn constant(height: usize, width: usize, dy: T, dx: T) -> Self {
        assert!(height > 0 && width > 0, "field must be non-empty");
        Self { height, width, dy: vec![dy; height * width], dx: vec![dx; height * width] }
    }

    /// Builds a field from planar row/column offsets; all values must be finite.
    pub fn from_components(height: usize, width: usize, dy: Vec<T>, dx: Vec<T>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "field must be non-empty");
        ensure!(
            dy.len() == height * width && dx.len() == height * width,
            "field components must have {} entries",
            height * width
        );
        ensure!(
            dy.iter().chain(dx.iter()).all(|v| v.is_finite()),
            "displacement field contains non-finite values"
        );
        Ok(Self { height, width, dy, dx })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut dy = Vec::with_capacity(height * width);
        let mut dx = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let (a, b) = f(i, j);
                dy.push(a);
                dx.push(b);
            }
        }
        Self { height, width, dy, dx }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dy(&self) -> &[T] {
        &self.dy
    }

    pub fn dx(&self) -> &[T] {
        &self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [T] {
        &mut self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [T] {
        &mut self.dx
    }

    pub fn at(&self, i: usize, j: usize) -> (T, T) {
        let k = i * self.width + j;
        (self.dy[k], self.dx[k])
    }

    pub fn is_finite(&self) -> bool {
        self.dy.iter().chain(self.dx.iter()).all(|v| v.is_finite())
    }

    /// Mean Euclidean length of the offsets.
    pub fn mean_magnitude(&self) -> f64 {
        let total: f64 = self
            .dy
            .iter()
            .zip(&self.dx)
            .map(|(&a, &b)| {
                let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
                (a * a + b * b).sqrt()
            })
            .sum();
        total / self.dy.len() as f64
    }

    /// Component-wise median offset `(row, col)`.
    pub fn median(&self) -> (f64, f64) {
        fn median_of<T: Float>(values: &[T]) -> f64 {
            let mut v: Vec<f64> = values.iter().map(|x| x.to_f64().unwrap()).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
        (median_of(&self.dy), median_of(&self.dx))
    }

    pub fn cast<U: Float>(&self) -> DisplacementField<U> {
        DisplacementField {
            height: self.height,
            width: self.width,
            dy: self.dy.iter().map(|v| U::from(*v).unwrap()).collect(),
            dx: self.dx.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }

    /// Row-offset and column-offset planes.
    pub fn components(&self) -> (Plane<T>, Plane<T>) {
        (
            Plane::new(self.height, self.width, self.dy.clone()).unwrap(),
            Plane::new(self.height, self.width, self.dx.clone()).unwrap(),
        )
    }
}

/// Coarse-to-fine stack of displacement fields, each level twice the size of the previous.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementPyramid<T = f32> {
    levels: Vec<DisplacementField<T>>,
}

impl<T: Float> DisplacementPyramid<T> {
    pub fn new(levels: Vec<DisplacementField<T>>) -> Result<Self> {
        ensure!(!levels.is_empty(), "pyramid needs at least one level");
        for pair in levels.windows(2) {
            let (c, f) = (&pair[0], &pair[1]);
            ensure!(
                f.height == 2 * c.height && f.width == 2 * c.width,
                "pyramid levels must be dyadic: {:?} then {:?}",
                c.shape(),
                f.shape()
            );
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[DisplacementField<T>] {
        &self.levels
    }

    pub fn finest(&self) -> &DisplacementField<T> {
        self.levels.last().unwrap()
    }

    pub fn into_levels(self) -> Vec<DisplacementField<T>> {
        self.levels
    }
}

// ---------------------------------------------------------------------------
// Bilinear sampling kernels shared by the plain API and the autodiff graph.

#[derive(Clone, Copy)]
struct Axis<T> {
    i0: isize,
    frac: T,
    /// Coordinate was clamped, so the sample does not move with the offset.
    pinned: bool,
}

#[inline]
fn axis<T: Float>(pos: T, n: usize, border: BorderPolicy) -> Axis<T> {
    match border {
        BorderPolicy::ClampToEdge => {
            let hi = T::from(n - 1).unwrap();
            let pinned = pos < T::zero() || pos > hi;
            let p = pos.max(T::zero()).min(hi);
            let i0 = p.floor();
            Axis { i0: i0.to_isize().unwrap(), frac: p - i0, pinned }
        }
        BorderPolicy::ZeroFill => {
            let i0 = pos.floor();
            Axis { i0: i0.to_isize().unwrap(), frac: pos - i0, pinned: false }
        }
    }
}

#[inline]
fn tap_index(i: isize, n: usize, border: BorderPolicy) -> Option<usize> {
    match border {
        BorderPolicy::ClampToEdge => Some(i.clamp(0, n as isize - 1) as usize),
        BorderPolicy::ZeroFill => (i >= 0 && (i as usize) < n).then_some(i as usize),
    }
}

/// `a + t (b - a)`, kept inside `[min(a,b), max(a,b)]` despite rounding.
#[inline]
fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// Per-pixel bilinear stencil: four tap indices (None = zero) and the fractional parts.
#[derive(Clone, Copy)]
struct Stencil<T> {
    taps: [Option<usize>; 4],
    fy: T,
    fx: T,
    pinned_y: bool,
    pinned_x: bool,
}

#[inline]
fn stencil<T: Float>(i: usize, j: usize, dy: T, dx: T, h: usize, w: usize, border: BorderPolicy) -> Stencil<T> {
    let ay = axis(T::from(i).unwrap() + dy, h, border);
    let ax = axis(T::from(j).unwrap() + dx, w, border);
    let r0 = tap_index(ay.i0, h, border);
    let r1 = tap_index(ay.i0 + 1, h, border);
    let c0 = tap_index(ax.i0, w, border);
    let c1 = tap_index(ax.i0 + 1, w, border);
    let idx = |r: Option<usize>, c: Option<usize>| match (r, c) {
        (Some(r), Some(c)) => Some(r * w + c),
        _ => None,
    };
    Stencil {
        taps: [idx(r0, c0), idx(r0, c1), idx(r1, c0), idx(r1, c1)],
        fy: ay.frac,
        fx: ax.frac,
        pinned_y: ay.pinned,
        pinned_x: ax.pinned,
    }
}

#[inline]
fn fetch<T: Float>(plane: &[T], tap: Option<usize>) -> T {
    tap.map_or(T::zero(), |k| plane[k])
}

/// Warps `channels` planes of size `h`×`w` stored back to back in `src` by one field.
pub(crate) fn warp_channels<T: Float>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    dy: &[T],
    dx: &[T],
    border: BorderPolicy,
    out: &mut [T],
) {
    let hw = h * w;
    debug_assert_eq!(src.len(), channels * hw);
    debug_assert_eq!(out.len(), channels * hw);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let s = stencil(i, j, dy[k], dx[k], h, w, border);
            for c in 0..channels {
                let plane = &src[c * hw..(c + 1) * hw];
                let top = lerp(fetch(plane, s.taps[0]), fetch(plane, s.taps[1]), s.fx);
                let bot = lerp(fetch(plane, s.taps[2]), fetch(plane, s.taps[3]), s.fx);
                out[c * hw + k] = lerp(top, bot, s.fy);
            }
        }
    }
}

/// Vector-Jacobian product of [`warp_channels`]. Gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_channels_backward<T: Float>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    dy: &[T],
    dx: &[T],
    border: BorderPolicy,
    grad_out: &[T],
    mut grad_src: Option<&mut [T]>,
    mut grad_field: Option<(&mut [T], &mut [T])>,
) {
    let hw = h * w;
    let one = T::one();
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let s = stencil(i, j, dy[k], dx[k], h, w, border);
            let (fy, fx) = (s.fy, s.fx);
            let weights = [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx];
            let mut gy = T::zero();
            let mut gx = T::zero();
            for c in 0..channels {
                let g = grad_out[c * hw + k];
                if g == T::zero() {
                    continue;
                }
                let plane = &src[c * hw..(c + 1) * hw];
                if let Some(gs) = grad_src.as_deref_mut() {
                    for (tap, wt) in s.taps.iter().zip(weights) {
                        if let Some(t) = tap {
                            gs[c * hw + t] = gs[c * hw + t] + g * wt;
                        }
                    }
                }
                if grad_field.is_some() {
                    let v = [
                        fetch(plane, s.taps[0]),
                        fetch(plane, s.taps[1]),
                        fetch(plane, s.taps[2]),
                        fetch(plane, s.taps[3]),
                    ];
                    if !s.pinned_y {
                        gy = gy + g * ((one - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]));
                    }
                    if !s.pinned_x {
                        gx = gx + g * ((one - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]));
                    }
                }
            }
            if let Some((gdy, gdx)) = grad_field.as_mut() {
                gdy[k] = gdy[k] + gy;
                gdx[k] = gdx[k] + gx;
            }
        }
    }
}

/// Bilinear warp `output(p) = input(p + d(p))`.
pub fn warp<T: Float>(input: &Plane<T>, d: &DisplacementField<T>, border: BorderPolicy) -> Result<Plane<T>> {
    ensure!(
        input.shape() == d.shape(),
        "warp shape mismatch: input {:?}, field {:?}",
        input.shape(),
        d.shape()
    );
    ensure!(d.is_finite(), "displacement field contains non-finite values");
    let (h, w) = input.shape();
    let mut out = vec![T::zero(); h * w];
    warp_channels(input.as_slice(), 1, h, w, &d.dy, &d.dx, border, &mut out);
    Plane::new(h, w, out)
}

/// Gradients of `Σ grad_out ⊙ warp(input, d)` with respect to the input and the field.
pub fn warp_vjp<T: Float>(
    input: &Plane<T>,
    d: &DisplacementField<T>,
    border: BorderPolicy,
    grad_out: &Plane<T>,
) -> Result<(Plane<T>, DisplacementField<T>)> {
    ensure!(input.shape() == d.shape() && grad_out.shape() == d.shape(), "warp_vjp shape mismatch");
    let (h, w) = input.shape();
    let mut gi = vec![T::zero(); h * w];
    let mut gdy = vec![T::zero(); h * w];
    let mut gdx = vec![T::zero(); h * w];
    warp_channels_backward(
        input.as_slice(),
        1,
        h,
        w,
        &d.dy,
        &d.dx,
        border,
        grad_out.as_slice(),
        Some(&mut gi),
        Some((&mut gdy, &mut gdx)),
    );
    Ok((Plane::new(h, w, gi)?, DisplacementField { height: h, width: w, dy: gdy, dx: gdx }))
}

// ---------------------------------------------------------------------------
// 2x resampling.

/// The two source taps of fine index `u` when doubling a length-`n` axis.
/// Fine index `2i` sits exactly on coarse index `i`.
#[inline]
fn up_taps(u: usize, n: usize) -> [(usize, f64); 2] {
    let i = u / 2;
    if u % 2 == 0 {
        [(i, 1.0), (i, 0.0)]
    } else {
        [(i, 0.5), ((i + 1).min(n - 1), 0.5)]
    }
}

/// Bilinear 2x upsampling of `channels` planes (no value rescaling).
pub(crate) fn upsample2_channels<T: Float>(src: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let (fh, fw) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); channels * fh * fw];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * fh * fw..(c + 1) * fh * fw];
        for u in 0..fh {
            let ty = up_taps(u, h);
            for v in 0..fw {
                let tx = up_taps(v, w);
                let mut acc = T::zero();
                for &(r, wy) in &ty {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(q, wx) in &tx {
                        if wx == 0.0 {
                            continue;
                        }
                        acc = acc + T::from(wy * wx).unwrap() * plane[r * w + q];
                    }
                }
                dst[u * fw + v] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2_channels`], accumulated into `grad_src`.
pub(crate) fn upsample2_channels_backward<T: Float>(
    grad_out: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grad_src: &mut [T],
) {
    let (fh, fw) = (2 * h, 2 * w);
    for c in 0..channels {
        let g = &grad_out[c * fh * fw..(c + 1) * fh * fw];
        let dst = &mut grad_src[c * h * w..(c + 1) * h * w];
        for u in 0..fh {
            let ty = up_taps(u, h);
            for v in 0..fw {
                let tx = up_taps(v, w);
                let gv = g[u * fw + v];
                for &(r, wy) in &ty {
                    for &(q, wx) in &tx {
                        if wy != 0.0 && wx != 0.0 {
                            dst[r * w + q] = dst[r * w + q] + T::from(wy * wx).unwrap() * gv;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pooling of `channels` planes with even dimensions.
pub(crate) fn avg_pool2_channels<T: Float>(src: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from(0.25).unwrap();
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let a = plane[2 * i * w + 2 * j] + plane[2 * i * w + 2 * j + 1];
                let b = plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1];
                out[c * oh * ow + i * ow + j] = (a + b) * quarter;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2_channels`], accumulated into `grad_src`.
pub(crate) fn avg_pool2_channels_backward<T: Float>(
    grad_out: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grad_src: &mut [T],
) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from(0.25).unwrap();
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let g = grad_out[c * oh * ow + i * ow + j] * quarter;
                for (r, q) in [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)] {
                    let k = c * h * w + r * w + q;
                    grad_src[k] = grad_src[k] + g;
                }
            }
        }
    }
}

/// Doubles the grid of a field; offsets double too because pixel units halve.
pub fn upsample_field<T: Float>(d: &DisplacementField<T>, factor: usize) -> Result<DisplacementField<T>> {
    ensure!(factor == 2, "only factor 2 upsampling is supported, got {factor}");
    let (h, w) = d.shape();
    let two = T::from(2.0).unwrap();
    let scale = |v: Vec<T>| v.into_iter().map(|x| x * two).collect::<Vec<_>>();
    Ok(DisplacementField {
        height: 2 * h,
        width: 2 * w,
        dy: scale(upsample2_channels(&d.dy, 1, h, w)),
        dx: scale(upsample2_channels(&d.dx, 1, h, w)),
    })
}

/// Resample-then-add composition: `out(p) = residual(p) + coarse_up(p + residual(p))`.
pub fn compose_fields<T: Float>(
    coarse_up: &DisplacementField<T>,
    residual: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    ensure!(coarse_up.shape() == residual.shape(), "compose_fields shape mismatch");
    let (h, w) = coarse_up.shape();
    let mut stacked = coarse_up.dy.clone();
    stacked.extend_from_slice(&coarse_up.dx);
    let mut sampled = vec![T::zero(); 2 * h * w];
    warp_channels(&stacked, 2, h, w, &residual.dy, &residual.dx, BorderPolicy::ClampToEdge, &mut sampled);
    let (sy, sx) = sampled.split_at(h * w);
    Ok(DisplacementField {
        height: h,
        width: w,
        dy: residual.dy.iter().zip(sy).map(|(&r, &s)| r + s).collect(),
        dx: residual.dx.iter().zip(sx).map(|(&r, &s)| r + s).collect(),
    })
}

/// Repeated 2x average pooling. Returns `levels` planes ordered coarse to fine;
/// the last entry is the input itself.
pub fn downsample<T: Float>(plane: &Plane<T>, levels: usize) -> Result<Vec<Plane<T>>> {
    ensure!(levels >= 1, "need at least one level");
    let div = 1usize << (levels - 1);
    let (h, w) = plane.shape();
    ensure!(
        h % div == 0 && w % div == 0,
        "{h}x{w} is not divisible by 2^{} for a {levels}-level pyramid",
        levels - 1
    );
    let mut out = vec![plane.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (ph, pw) = prev.shape();
        out.push(Plane::new(ph / 2, pw / 2, avg_pool2_channels(prev.as_slice(), 1, ph, pw))?);
    }
    out.reverse();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Test-time augmentation.

/// One test-time augmentation: contrast, then rotation about the center, then flips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub contrast_gamma: f64,
}

/// Sampling ranges for [`AugmentSpec::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub flip_probability: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, flip_probability: 0.5, gamma_min: 0.7, gamma_max: 1.4 }
    }
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec =
        AugmentSpec { rotation_deg: 0.0, flip_h: false, flip_v: false, contrast_gamma: 1.0 };

    /// Uniform rotation, independent flips, log-uniform gamma.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, ranges: &AugmentRanges) -> Self {
        let rotation_deg = if ranges.max_rotation_deg > 0.0 {
            rng.gen_range(-ranges.max_rotation_deg..=ranges.max_rotation_deg)
        } else {
            0.0
        };
        let flip_h = rng.gen_bool(ranges.flip_probability);
        let flip_v = rng.gen_bool(ranges.flip_probability);
        let (lo, hi) = (ranges.gamma_min.ln(), ranges.gamma_max.ln());
        let contrast_gamma = if hi > lo { rng.gen_range(lo..=hi).exp() } else { ranges.gamma_min };
        Self { rotation_deg, flip_h, flip_v, contrast_gamma }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Field that rotates image content by `deg` degrees about the grid center.
fn rotation_field(h: usize, w: usize, deg: f64) -> DisplacementField<f32> {
    let (s, c) = (-deg).to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    DisplacementField::from_fn(h, w, |i, j| {
        let (y, x) = (i as f64 - cy, j as f64 - cx);
        let sx = x * c - y * s;
        let sy = x * s + y * c;
        ((sy - y) as f32, (sx - x) as f32)
    })
}

fn flip_h<T: Copy>(p: &Plane<T>) -> Plane<T> {
    let w = p.width();
    Plane::from_fn(p.height(), w, |i, j| p.get(i, w - 1 - j))
}

fn flip_v<T: Copy>(p: &Plane<T>) -> Plane<T> {
    let h = p.height();
    Plane::from_fn(h, p.width(), |i, j| p.get(h - 1 - i, j))
}

/// Spatial part of `spec` (rotation, then flips).
pub fn apply_spatial(plane: &Plane<f32>, spec: &AugmentSpec, border: BorderPolicy) -> Plane<f32> {
    let mut out = if spec.rotation_deg != 0.0 {
        let field = rotation_field(plane.height(), plane.width(), spec.rotation_deg);
        warp(plane, &field, border).expect("rotation field matches plane")
    } else {
        plane.clone()
    };
    if spec.flip_h {
        out = flip_h(&out);
    }
    if spec.flip_v {
        out = flip_v(&out);
    }
    out
}

/// Contrast `x^gamma` followed by the spatial transform, clamp-to-edge border.
pub fn apply_augment(img: &GrayImage, spec: &AugmentSpec) -> GrayImage {
    let gamma = spec.contrast_gamma as f32;
    let contrasted = if gamma == 1.0 { img.clone() } else { img.map(|v| v.max(0.0).powf(gamma)) };
    apply_spatial(&contrasted, spec, BorderPolicy::IMAGE)
}

/// Maps a prediction made on an augmented image back to the original frame.
/// Contrast has no spatial effect and is ignored.
pub fn invert_augment(mask: &SoftMask, spec: &AugmentSpec) -> SoftMask {
    let mut out = mask.clone();
    if spec.flip_v {
        out = flip_v(&out);
    }
    if spec.flip_h {
        out = flip_h(&out);
    }
    if spec.rotation_deg != 0.0 {
        let field = rotation_field(out.height(), out.width(), -spec.rotation_deg);
        out = warp(&out, &field, BorderPolicy::MASK).expect("rotation field matches plane");
    }
    out
}

// ---------------------------------------------------------------------------
// Field file format: "DFLD", u32 height, u32 width, u32 channels (= 2), then
// height*width*2 little-endian f32 values, interleaved (row offset, col offset).

const FIELD_MAGIC: &[u8; 4] = b"DFLD";

pub fn encode_field(d: &DisplacementField<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * d.dy.len());
    buf.extend_from_slice(FIELD_MAGIC);
    buf.extend_from_slice(&(d.height as u32).to_le_bytes());
    buf.extend_from_slice(&(d.width as u32).to_le_bytes());
    buf.extend_from_slice(&2u32.to_le_bytes());
    for (a, b) in d.dy.iter().zip(&d.dx) {
        buf.extend_from_slice(&a.to_le_bytes());
        buf.extend_from_slice(&b.to_le_bytes());
    }
    buf
}

pub fn decode_field(bytes: &[u8]) -> std::result::Result<DisplacementField<f32>, String> {
    if bytes.len() < 16 || &bytes[..4] != FIELD_MAGIC {
        return Err("missing DFLD header".into());
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    let (h, w, ch) = (word(4), word(8), word(12));
    if ch != 2 {
        return Err(format!("expected 2 channels, found {ch}"));
    }
    if h == 0 || w == 0 || bytes.len() != 16 + h * w * 8 {
        return Err(format!("payload size does not match {h}x{w}x2"));
    }
    let floats: Vec<f32> =
        bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let dy = floats.iter().step_by(2).copied().collect();
    let dx = floats.iter().skip(1).step_by(2).copied().collect();
    DisplacementField::from_components(h, w, dy, dx).map_err(|e| e.to_string())
}

pub fn write_field(path: &Path, d: &DisplacementField<f32>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_field(d)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<DisplacementField<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes).map_err(|reason| Error::format(path, reason))
}
