//! Subpixel edge extraction and grouping into elliptical boundaries.
//!
//! Dark regions are segmented at a global threshold, each region boundary
//! (and the boundary of every bright hole inside one) owns a thin band of
//! pixels, and gradient maxima inside the band become subpixel edge points.
//! All thresholds come from whole-image statistics and every filter has a
//! bounded footprint, so running on regions that contain the marker with a
//! margin gives the same points as the full-image pass.

use std::collections::{HashSet, VecDeque};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{evaluate, fit_conic_algebraic, EdgePointSet};
use crate::geometry::{Conic, Point2H};
use crate::image::{gaussian_kernel, GrayImage};
use crate::marker::MarkerSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdgeError {
    #[error("no marker found: {found} elliptical boundaries, {required} required")]
    NoMarkerFound { found: usize, required: usize },
}

/// Axis-aligned pixel region, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeOptions {
    pub min_smoothing: f64,
    pub max_smoothing: f64,
    /// Smoothing added per unit of estimated noise standard deviation.
    pub noise_gain: f64,
    /// Smallest segmented region kept, pixels.
    pub min_area: usize,
    /// Half-width of the band searched for gradient maxima, pixels.
    pub band: usize,
    /// Gradient acceptance threshold in units of gradient noise.
    pub gradient_k: f64,
    pub min_points: usize,
    pub max_rms: f64,
    /// Fraction of angular bins around the ellipse that must hold points.
    pub min_coverage: f64,
    /// Compensate the inward shift of blurred curved edges.
    pub curvature_correction: bool,
    /// Upper bound of the smoothing matched to blurred edges in noise.
    pub max_edge_smoothing: f64,
}

impl Default for EdgeOptions {
    fn default() -> Self {
        Self {
            min_smoothing: 1.0,
            max_smoothing: 3.0,
            noise_gain: 5.0,
            min_area: 8,
            band: 3,
            gradient_k: 2.0,
            min_points: 8,
            max_rms: 1.5,
            min_coverage: 0.6,
            curvature_correction: true,
            max_edge_smoothing: 8.0,
        }
    }
}

/// Edge points of one elliptical boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeChain {
    pub points: EdgePointSet,
    /// Algebraic fit used for filtering.
    pub conic: Conic,
    /// Ellipse area in square pixels.
    pub area: f64,
    /// Mean raw intensity of the enclosed region.
    pub mean_intensity: f64,
    /// Mean hue in degrees when the frame has color and is saturated.
    pub hue: Option<f64>,
    /// Boundary of a bright region enclosed by a dark one.
    pub is_hole: bool,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeExtraction {
    /// One chain per marker circle, in no particular order.
    pub chains: Vec<EdgeChain>,
    /// Centers of point features.
    pub features: Vec<Point2H>,
    pub noise_sigma: f64,
    pub smoothing_sigma: f64,
    pub threshold: f64,
}

/// Standard deviation of additive noise: the median absolute horizontal
/// difference on every other row, or, when a large share of pixels sits at a
/// clip level, the half-normal spread of the unclipped rest of that
/// population (clipping hides half of the noise from differences).
pub fn estimate_noise(img: &GrayImage) -> f64 {
    noise_model(img).sigma
}

/// Noise level and the clip levels it was censored at.
#[derive(Debug, Clone, Copy, PartialEq)]
struct NoiseModel {
    sigma: f64,
    /// Per-channel level for color frames.
    channel: Option<f64>,
    low: bool,
    high: bool,
}

fn noise_model(img: &GrayImage) -> NoiseModel {
    if let Some(rgb) = &img.rgb {
        // Per channel, then through the luma weights. Channels of saturated
        // colors clip symmetrically, so no linearization.
        let mut s: Vec<f64> = (0..3)
            .map(|k| {
                let data = rgb.iter().map(|c| c[k]).collect();
                let ch = GrayImage { width: img.width, height: img.height, data, rgb: None };
                plane_noise(&ch).sigma
            })
            .collect();
        s.sort_by(f64::total_cmp);
        let gain = (0.299f64 * 0.299 + 0.587 * 0.587 + 0.114 * 0.114).sqrt();
        return NoiseModel { sigma: s[1] * gain, channel: Some(s[1]), low: false, high: false };
    }
    plane_noise(img)
}

fn plane_noise(img: &GrayImage) -> NoiseModel {
    let mut d: Vec<f32> = Vec::with_capacity(img.width * img.height / 2);
    for y in (0..img.height).step_by(2) {
        let row = &img.data[y * img.width..(y + 1) * img.width];
        d.extend(row.windows(2).map(|w| (w[1] - w[0]).abs()));
    }
    if d.is_empty() {
        return NoiseModel { sigma: 0.0, channel: None, low: false, high: false };
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let diff = *m as f64 / 0.6745 / std::f64::consts::SQRT_2;
    let (hi, lo) = (clipped_spread(img, 1.0), clipped_spread(img, 0.0));
    NoiseModel { sigma: diff.max(hi).max(lo), channel: None, low: lo > 0.0, high: hi > 0.0 }
}

/// Inverse of the expected value of clipped noisy intensities,
/// `I ↦ E[clip(I + n)]`, tabulated over `I ∈ [0, 1]`. Straightens the
/// profile that clipping bends on the saturated side of an edge.
struct Linearizer {
    f: Vec<f64>,
}

impl Linearizer {
    const N: usize = 1024;

    fn new(model: &NoiseModel) -> Option<Self> {
        if !(model.sigma > 0.0) || !(model.low || model.high) {
            return None;
        }
        let s = model.sigma;
        let phi = |z: f64| (-0.5 * z * z).exp() / (std::f64::consts::TAU).sqrt();
        let cdf = |z: f64| 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
        let f = (0..=Self::N)
            .map(|i| {
                let x = i as f64 / Self::N as f64;
                let mut e = x;
                if model.low {
                    // E[max(X, 0)] - x.
                    let a = -x / s;
                    e += -x * cdf(a) + s * phi(a);
                }
                if model.high {
                    let b = (1.0 - x) / s;
                    e += (1.0 - x) * (1.0 - cdf(b)) - s * phi(b);
                }
                e
            })
            .collect();
        Some(Self { f })
    }

    fn apply(&self, v: f32) -> f32 {
        let v = v as f64;
        let f = &self.f;
        let n = Self::N as f64;
        let last = f.len() - 1;
        let i = f.partition_point(|&y| y < v);
        let x = if i == 0 {
            (v - f[0]) / ((f[1] - f[0]) * n)
        } else if i > last {
            1.0 + (v - f[last]) / ((f[last] - f[last - 1]) * n)
        } else {
            let t = (v - f[i - 1]) / (f[i] - f[i - 1]);
            (i as f64 - 1.0 + t) / n
        };
        x as f32
    }
}

fn clipped_spread(img: &GrayImage, level: f32) -> f64 {
    let n = img.data.len();
    let clipped = img.data.iter().filter(|&&v| v == level).count();
    if clipped < n / 400 {
        return 0.0;
    }
    let mut dev: Vec<f32> = img.data.iter().filter(|&&v| v != level).map(|&v| (v - level).abs()).collect();
    // The unclipped half of the population: as many pixels as were clipped.
    if dev.len() < clipped {
        return 0.0;
    }
    let at = |f: f64| (f * clipped as f64) as usize;
    let (i25, i50, i75) = (at(0.25), at(0.5), at(0.75));
    let (head, &mut q75, _) = dev.select_nth_unstable_by(i75, f32::total_cmp);
    let (head, &mut q50, _) = head.select_nth_unstable_by(i50, f32::total_cmp);
    let (_, &mut q25, _) = head.select_nth_unstable_by(i25, f32::total_cmp);
    let med = q50 as f64;
    // Half-normal quantile ratios: 0.472 at 25 %, 1.705 at 75 %.
    let (lo, hi) = (q25 as f64 / med, q75 as f64 / med);
    if med > 0.0 && (lo / 0.472 - 1.0).abs() < 0.25 && (hi / 1.705 - 1.0).abs() < 0.25 {
        med / 0.6745
    } else {
        0.0
    }
}

/// Half-open integer rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn width(&self) -> usize {
        self.x1 - self.x0
    }
    fn height(&self) -> usize {
        self.y1 - self.y0
    }
    fn grow(&self, m: usize, w: usize, h: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(m),
            y0: self.y0.saturating_sub(m),
            x1: (self.x1 + m).min(w),
            y1: (self.y1 + m).min(h),
        }
    }
    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }
    fn union(&self, o: &Rect) -> Rect {
        Rect { x0: self.x0.min(o.x0), y0: self.y0.min(o.y0), x1: self.x1.max(o.x1), y1: self.y1.max(o.y1) }
    }
}

fn region_rects(regions: &[Region], w: usize, h: usize) -> Vec<Rect> {
    let mut rects: Vec<Rect> = regions
        .iter()
        .filter_map(|r| {
            let x0 = r.x0.floor().max(0.0) as usize;
            let y0 = r.y0.floor().max(0.0) as usize;
            let x1 = ((r.x1.ceil() + 1.0).max(0.0) as usize).min(w);
            let y1 = ((r.y1.ceil() + 1.0).max(0.0) as usize).min(h);
            (x1 > x0 && y1 > y0).then_some(Rect { x0, y0, x1, y1 })
        })
        .collect();
    loop {
        let mut merged = false;
        'outer: for i in 0..rects.len() {
            for j in i + 1..rects.len() {
                if rects[i].overlaps(&rects[j]) {
                    rects[i] = rects[i].union(&rects[j]);
                    rects.swap_remove(j);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    rects.sort_by_key(|r| (r.y0, r.x0));
    rects
}

/// Values over a rectangle, addressed in image coordinates.
struct Plane {
    rect: Rect,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[(y - self.rect.y0) * self.rect.width() + (x - self.rect.x0)]
    }
}

/// Separable Gaussian smoothing of `img` evaluated on `out`, with image-border
/// clamping. Values do not depend on `out`.
fn smooth(img: &GrayImage, kernel: &[f32], out: Rect) -> Plane {
    let (w, h) = (img.width as i64, img.height as i64);
    let r = (kernel.len() / 2) as i64;
    let ty0 = (out.y0 as i64 - r).max(0) as usize;
    let ty1 = ((out.y1 as i64 + r).min(h)) as usize;
    let ow = out.width();
    let mut tmp = vec![0f32; (ty1 - ty0) * ow];
    for y in ty0..ty1 {
        let row = &img.data[y * img.width..(y + 1) * img.width];
        let trow = &mut tmp[(y - ty0) * ow..(y - ty0 + 1) * ow];
        for (i, x) in (out.x0..out.x1).enumerate() {
            let mut s = 0f32;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - r).clamp(0, w - 1) as usize;
                s += kv * row[xx];
            }
            trow[i] = s;
        }
    }
    let mut data = vec![0f32; out.height() * ow];
    for y in out.y0..out.y1 {
        let drow = &mut data[(y - out.y0) * ow..(y - out.y0 + 1) * ow];
        for (k, kv) in kernel.iter().enumerate() {
            let yy = (y as i64 + k as i64 - r).clamp(0, h - 1) as usize;
            let trow = &tmp[(yy - ty0) * ow..(yy - ty0 + 1) * ow];
            for (d, t) in drow.iter_mut().zip(trow) {
                *d += kv * t;
            }
        }
    }
    Plane { rect: out, data }
}

/// Standard deviation of the central-difference gradient component of
/// smoothed unit-variance white noise.
fn gradient_noise_gain(kernel: &[f32]) -> f64 {
    let n = kernel.len();
    let mut diff = vec![0f64; n + 2];
    for (i, &k) in kernel.iter().enumerate() {
        diff[i] += 0.5 * k as f64;
        diff[i + 2] -= 0.5 * k as f64;
    }
    let a: f64 = diff.iter().map(|v| v * v).sum();
    let b: f64 = kernel.iter().map(|&v| (v as f64).powi(2)).sum();
    (a * b).sqrt()
}

/// Background level and the dark/bright decision threshold from 4x4 cell
/// means of the whole frame.
fn global_threshold(img: &GrayImage, noise: f64) -> Option<(f64, f64)> {
    let (cw, ch) = (img.width / 4, img.height / 4);
    if cw == 0 || ch == 0 {
        return None;
    }
    let mut cells = vec![0f32; cw * ch];
    for y in 0..ch * 4 {
        let row = &img.data[y * img.width..y * img.width + cw * 4];
        for (cx, chunk) in row.chunks_exact(4).enumerate() {
            cells[(y / 4) * cw + cx] += chunk.iter().sum::<f32>();
        }
    }
    cells.iter_mut().for_each(|c| *c /= 16.0);
    let mut sorted = cells.clone();
    let mid = sorted.len() / 2;
    let bg = *sorted.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1 as f64;
    let cut = bg - (6.0 * noise / 4.0).max(0.15);
    let dark: Vec<f64> = cells.iter().filter(|&&c| (c as f64) < cut).map(|&c| c as f64).collect();
    if dark.is_empty() {
        return None;
    }
    let dark = dark.iter().sum::<f64>() / dark.len() as f64;
    Some((bg, 0.5 * (bg + dark)))
}

/// A segmented area whose outline becomes one chain.
struct Blob {
    pixels: Vec<(usize, usize)>,
    boundary: Vec<(usize, usize)>,
    is_hole: bool,
    centroid: Vector2<f64>,
}

const NONE: u32 = u32::MAX;

/// 4-connected components of pixels of `rect` satisfying `pred`; returns the
/// component pixel lists and whether each touches the rectangle border.
fn components(rect: Rect, pred: impl Fn(usize, usize) -> bool) -> Vec<(Vec<(usize, usize)>, bool)> {
    let (w, h) = (rect.width(), rect.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !pred(sx + rect.x0, sy + rect.y0) {
                continue;
            }
            seen[sy * w + sx] = true;
            queue.push_back((sx, sy));
            let mut pix = Vec::new();
            let mut border = false;
            while let Some((x, y)) = queue.pop_front() {
                pix.push((x + rect.x0, y + rect.y0));
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    border = true;
                }
                let mut push = |nx: usize, ny: usize| {
                    let i = ny * w + nx;
                    if !seen[i] && pred(nx + rect.x0, ny + rect.y0) {
                        seen[i] = true;
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
            out.push((pix, border));
        }
    }
    out
}

/// `pixels` never touch the image border; neighbors in `skip` do not make a
/// pixel a boundary pixel.
fn make_blob(pixels: Vec<(usize, usize)>, is_hole: bool, skip: &HashSet<(usize, usize)>) -> Blob {
    let set: HashSet<(usize, usize)> = pixels.iter().copied().collect();
    let boundary = pixels
        .iter()
        .copied()
        .filter(|&(x, y)| {
            [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|q| !set.contains(q) && !skip.contains(q))
        })
        .collect();
    let n = pixels.len() as f64;
    let c = pixels.iter().fold(Vector2::zeros(), |a, &(x, y)| a + Vector2::new(x as f64, y as f64)) / n;
    Blob { pixels, boundary, is_hole, centroid: c }
}

fn bbox(pixels: &[(usize, usize)]) -> Rect {
    let mut r = Rect { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
    for &(x, y) in pixels {
        r.x0 = r.x0.min(x);
        r.y0 = r.y0.min(y);
        r.x1 = r.x1.max(x + 1);
        r.y1 = r.y1.max(y + 1);
    }
    r
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Algebraic fit with iterative rejection of points far from the current fit.
fn robust_fit(points: &[Point2H]) -> Option<(Conic, Vec<Point2H>, f64)> {
    let mut kept: Vec<Point2H> = points.to_vec();
    let mut conic = fit_conic_algebraic(&EdgePointSet::new(kept.clone(), 0)).ok()?;
    for _ in 0..3 {
        let d: Vec<f64> = points
            .iter()
            .map(|p| evaluate(p.coords(), conic.matrix(), None).map_or(f64::INFINITY, |e| e.residual.abs()))
            .collect();
        let mut finite: Vec<f64> = d.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < 6 {
            return None;
        }
        let cut = (3.0 * 1.4826 * median(&mut finite)).max(0.3);
        let next: Vec<Point2H> = points.iter().zip(&d).filter(|(_, &r)| r <= cut).map(|(p, _)| *p).collect();
        if next.len() < 6 {
            return None;
        }
        let same = next.len() == kept.len();
        kept = next;
        conic = fit_conic_algebraic(&EdgePointSet::new(kept.clone(), 0)).ok()?;
        if same {
            break;
        }
    }
    let rms = (kept
        .iter()
        .map(|p| evaluate(p.coords(), conic.matrix(), None).map_or(0.0, |e| e.residual * e.residual))
        .sum::<f64>()
        / kept.len() as f64)
        .sqrt();
    Some((conic, kept, rms))
}

/// Fraction of angular bins around `center` holding a point; bins are about
/// three pixels of perimeter wide, at most 36.
/// `I1(z)/I0(z)`: continued fraction for small `z`, asymptotic series above.
fn bessel_ratio(z: f64) -> f64 {
    if z > 30.0 {
        let u = 1.0 / z;
        let i0 = 1.0 + u / 8.0 + 9.0 * u * u / 128.0 + 225.0 * u.powi(3) / 3072.0;
        let i1 = 1.0 - 3.0 * u / 8.0 - 15.0 * u * u / 128.0 - 315.0 * u.powi(3) / 3072.0;
        return i1 / i0;
    }
    let mut t = 0.0;
    for k in (1..=100).rev() {
        t = 1.0 / (2.0 * k as f64 / z + t);
    }
    t
}

/// Radius of a disk whose blurred gradient peaks at radius `rho` under
/// Gaussian variance `var`. The peak satisfies `r = R·(I0/I1(z) - 1/z)`,
/// `z = rR/var`.
fn deblurred_radius(rho: f64, var: f64) -> f64 {
    let mut r = rho + 0.5 * var / rho;
    for _ in 0..50 {
        let z = rho * r / var;
        let h = 1.0 / bessel_ratio(z) - 1.0 / z;
        let next = rho / h;
        if !next.is_finite() || next > 4.0 * rho + 4.0 * var.sqrt() {
            return rho + 0.5 * var / rho;
        }
        let done = (next - r).abs() < 1e-9 * rho;
        r = next;
        if done {
            break;
        }
    }
    r
}

/// Blurring a curved step moves its gradient maximum toward the center of
/// curvature; push the point back along the normal, treating the boundary
/// as its osculating circle.
fn unbias(p: &Point2H, conic: &Conic, var: f64) -> Point2H {
    let c = conic.matrix();
    let u = c * p.coords();
    let g2 = u.x * u.x + u.y * u.y;
    if g2 <= 0.0 {
        return *p;
    }
    let kappa = (c[(0, 0)] * u.y * u.y - 2.0 * c[(0, 1)] * u.x * u.y + c[(1, 1)] * u.x * u.x).abs() / g2.powf(1.5);
    let Some(center) = conic.ellipse_center() else { return *p };
    let n = Vector2::new(u.x, u.y) / g2.sqrt();
    let out = if (p.x() - center.x) * n.x + (p.y() - center.y) * n.y >= 0.0 { n } else { -n };
    let d = if kappa > 0.0 { deblurred_radius(1.0 / kappa, var) - 1.0 / kappa } else { 0.0 };
    Point2H::new(p.x() + d * out.x, p.y() + d * out.y, 1.0)
}

fn angular_coverage(points: &[Point2H], center: Vector2<f64>, perimeter: f64) -> f64 {
    let bins = ((perimeter / 3.0) as usize).clamp(8, 36);
    let mut hit = vec![false; bins];
    for p in points {
        let a = (p.y() - center.y).atan2(p.x() - center.x) + std::f64::consts::PI;
        let b = ((a / std::f64::consts::TAU * bins as f64) as usize).min(bins - 1);
        hit[b] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / bins as f64
}

fn mean_hue(img: &GrayImage, pixels: &[(usize, usize)]) -> Option<f64> {
    let rgb = img.rgb.as_ref()?;
    let mut m = [0f64; 3];
    for &(x, y) in pixels {
        let c = rgb[y * img.width + x];
        for k in 0..3 {
            m[k] += c[k] as f64;
        }
    }
    let n = pixels.len() as f64;
    rgb_hue(m.map(|v| v / n))
}

/// RGB of a named color.
pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    match name.trim().to_ascii_lowercase().as_str() {
        "red" => Some([1.0, 0.0, 0.0]),
        "yellow" => Some([1.0, 1.0, 0.0]),
        "green" => Some([0.0, 1.0, 0.0]),
        "cyan" => Some([0.0, 1.0, 1.0]),
        "blue" => Some([0.0, 0.0, 1.0]),
        "magenta" => Some([1.0, 0.0, 1.0]),
        _ => None,
    }
}

/// Hue of a named color, degrees.
pub fn color_hue(name: &str) -> Option<f64> {
    color_rgb(name).and_then(|c| rgb_hue(c.map(f64::from)))
}

fn rgb_hue([r, g, b]: [f64; 3]) -> Option<f64> {
    let (mx, mn) = (r.max(g).max(b), r.min(g).min(b));
    if mx - mn < 0.15 {
        return None;
    }
    let hue = (3f64.sqrt() * (g - b)).atan2(2.0 * r - g - b).to_degrees();
    Some(if hue < 0.0 { hue + 360.0 } else { hue })
}

fn hue_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Assign marker-circle classes: by hue when the frame has color and the marker
/// names hues, else by intensity rank against the configured fills.
fn classify(chains: &mut [EdgeChain], spec: &MarkerSpec) {
    let n = spec.circles.len();
    if chains.len() != n || n < 2 {
        return;
    }
    let hues: Option<Vec<f64>> = spec.colors.iter().map(|c| color_hue(c)).collect();
    if let Some(hues) = hues.filter(|h| h.len() == n) {
        if chains.iter().all(|c| c.hue.is_some()) {
            let mut used = vec![false; n];
            for c in chains.iter_mut() {
                let h = c.hue.expect("checked");
                let best = (0..n)
                    .filter(|&i| !used[i])
                    .min_by(|&i, &j| hue_gap(h, hues[i]).total_cmp(&hue_gap(h, hues[j])))
                    .expect("n classes");
                used[best] = true;
                c.class = Some(best);
            }
            return;
        }
    }
    let mut spec_order: Vec<usize> = (0..n).collect();
    spec_order.sort_by(|&a, &b| spec.circles[a].fill.total_cmp(&spec.circles[b].fill));
    let distinct = spec_order.windows(2).all(|w| spec.circles[w[1]].fill - spec.circles[w[0]].fill > 0.05);
    if !distinct {
        return;
    }
    let mut det_order: Vec<usize> = (0..n).collect();
    det_order.sort_by(|&a, &b| chains[a].mean_intensity.total_cmp(&chains[b].mean_intensity));
    for (d, s) in det_order.into_iter().zip(spec_order) {
        chains[d].class = Some(s);
    }
}

/// Extract circle boundaries and point features, optionally only inside
/// `regions`.
pub fn extract_edges(
    img: &GrayImage,
    regions: Option<&[Region]>,
    spec: &MarkerSpec,
    opts: &EdgeOptions,
) -> Result<EdgeExtraction, EdgeError> {
    let required = spec.required_circles();
    let model = noise_model(img);
    let noise = model.sigma;
    let sigma = (opts.min_smoothing + opts.noise_gain * noise).clamp(opts.min_smoothing, opts.max_smoothing);
    let Some((background, threshold)) = global_threshold(img, noise) else {
        return Err(EdgeError::NoMarkerFound { found: 0, required });
    };
    let color = match (&img.rgb, model.channel) {
        (Some(rgb), Some(noise)) => Some(ColorLevels { background: channel_medians(rgb.iter().step_by(3)), noise }),
        _ => None,
    };
    let levels = Levels { background, threshold, noise, sigma, linearizer: Linearizer::new(&model), color };
    let (w, h) = (img.width, img.height);
    let rects = match regions {
        Some(r) => region_rects(r, w, h),
        None => vec![Rect { x0: 0, y0: 0, x1: w, y1: h }],
    };

    let mut chains = Vec::new();
    for rect in rects {
        chains.extend(extract_in_rect(img, rect, &levels, opts));
    }

    // Largest boundaries are the marker circles, clearly smaller ones dots.
    chains.sort_by(|a, b| b.area.total_cmp(&a.area));
    if chains.len() < required {
        return Err(EdgeError::NoMarkerFound { found: chains.len(), required });
    }
    let rest = chains.split_off(required);
    let min_circle = chains.last().map_or(0.0, |c| c.area);
    let (_, fmax) = spec.required_features();
    let features: Vec<Point2H> = rest
        .iter()
        .filter(|c| c.area < 0.5 * min_circle)
        .take(fmax)
        .filter_map(|c| c.conic.ellipse_center().map(|v| Point2H::euclidean(v.x, v.y)))
        .collect();
    classify(&mut chains, spec);
    for (i, c) in chains.iter_mut().enumerate() {
        c.points.source_tag = i;
    }
    Ok(EdgeExtraction { chains, features, noise_sigma: noise, smoothing_sigma: sigma, threshold })
}

struct Levels {
    background: f64,
    threshold: f64,
    noise: f64,
    sigma: f64,
    linearizer: Option<Linearizer>,
    color: Option<ColorLevels>,
}

struct ColorLevels {
    background: [f64; 3],
    noise: f64,
}

fn channel_medians<'a>(px: impl Iterator<Item = &'a [f32; 3]>) -> [f64; 3] {
    let px: Vec<[f32; 3]> = px.copied().collect();
    if px.is_empty() {
        return [0.0; 3];
    }
    std::array::from_fn(|k| {
        let mut v: Vec<f32> = px.iter().map(|c| c[k]).collect();
        let mid = v.len() / 2;
        *v.select_nth_unstable_by(mid, f32::total_cmp).1 as f64
    })
}

/// Color frame projected on the unit direction `dir` over `rect`; zero
/// elsewhere. Matched to a step between two colors under per-channel noise.
fn project(img: &GrayImage, rgb: &[[f32; 3]], dir: [f64; 3], rect: Rect) -> GrayImage {
    let mut data = vec![0f32; img.width * img.height];
    let d = dir.map(|v| v as f32);
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let c = rgb[y * img.width + x];
            data[y * img.width + x] = d[0] * c[0] + d[1] * c[1] + d[2] * c[2];
        }
    }
    GrayImage { width: img.width, height: img.height, data, rgb: None }
}

/// Smoothed central-difference gradient over `rect`.
struct Gradient {
    rect: Rect,
    gx: Vec<f32>,
    gy: Vec<f32>,
    mag: Vec<f32>,
}

impl Gradient {
    fn new(img: &GrayImage, kernel: &[f32], rect: Rect, lin: Option<&Linearizer>) -> Self {
        let (w, h) = (img.width, img.height);
        let mut smoothed = smooth(img, kernel, rect.grow(1, w, h));
        if let Some(l) = lin {
            smoothed.data.iter_mut().for_each(|v| *v = l.apply(*v));
        }
        let sr = smoothed.rect;
        let sm = |x: i64, y: i64| {
            smoothed
                .at(x.clamp(sr.x0 as i64, sr.x1 as i64 - 1) as usize, y.clamp(sr.y0 as i64, sr.y1 as i64 - 1) as usize)
        };
        let n = rect.width() * rect.height();
        let (mut gx, mut gy, mut mag) = (vec![0f32; n], vec![0f32; n], vec![0f32; n]);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let (xi, yi) = (x as i64, y as i64);
                let i = (y - rect.y0) * rect.width() + (x - rect.x0);
                gx[i] = 0.5 * (sm(xi + 1, yi) - sm(xi - 1, yi));
                gy[i] = 0.5 * (sm(xi, yi + 1) - sm(xi, yi - 1));
                mag[i] = gx[i].hypot(gy[i]);
            }
        }
        Self { rect, gx, gy, mag }
    }

    fn idx(&self, x: usize, y: usize) -> usize {
        (y - self.rect.y0) * self.rect.width() + (x - self.rect.x0)
    }
}

/// Edge candidate: point, gradient magnitude, profile variance.
type Candidate = (Point2H, f64, Option<f64>);

/// Subpixel gradient maxima on the band pixels of one blob at smoothing
/// `sigma`, keeping the strongest response per direction from the centroid.
fn blob_candidates(
    img: &GrayImage,
    blob: &Blob,
    band: &[(usize, usize)],
    sigma: f64,
    noise: f64,
    gradient_k: f64,
    lin: Option<&Linearizer>,
) -> Vec<Candidate> {
    let (w, h) = (img.width, img.height);
    let kernel = gaussian_kernel(sigma, 3.0);
    let grad_floor = (gradient_k * noise * gradient_noise_gain(&kernel)).max(1e-3);
    // Wider stencil for the profile width on wide ridges.
    let step = (sigma / 2.0).round().max(1.0) as usize;
    let g = Gradient::new(img, &kernel, bbox(band).grow(step, w, h), lin);
    let bins = blob.boundary.len().max(16);
    let mut best: Vec<Option<(f64, Candidate)>> = vec![None; bins];
    for &(x, y) in band {
        let gi = g.idx(x, y);
        let m = g.mag[gi] as f64;
        if m < grad_floor {
            continue;
        }
        let (dx, dy) = (g.gx[gi] as f64 / m, g.gy[gi] as f64 / m);
        // Compare with the integer neighbors along the axis closest to the
        // gradient and interpolate along that axis (Devernay's variant).
        let (sx, sy) = if dx.abs() >= dy.abs() { (1usize, 0usize) } else { (0, 1) };
        let mp = g.mag[g.idx(x + sx, y + sy)] as f64;
        let mm = g.mag[g.idx(x - sx, y - sy)] as f64;
        if !(m > mp && m >= mm) {
            continue;
        }
        // Parabola through the log-magnitudes: exact for a Gaussian profile.
        let (lm, lp, l0) = (mm.max(1e-12).ln(), mp.max(1e-12).ln(), m.ln());
        let denom = lm - 2.0 * l0 + lp;
        let off = if denom < 0.0 { (0.5 * (lm - lp) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let (px, py) = (x as f64 + off * sx as f64, y as f64 + off * sy as f64);
        // Intensity rises away from a dark region and into a bright hole.
        let (rx, ry) = (px - blob.centroid.x, py - blob.centroid.y);
        if (rx * dx + ry * dy > 0.0) == blob.is_hole {
            continue;
        }
        // Profile variance across the edge; the axis sees it stretched.
        let n_axis = if sx == 1 { dx } else { dy };
        let var = if step == 1 {
            (denom < 0.0).then(|| -n_axis * n_axis / denom)
        } else {
            let mp = g.mag[g.idx(x + step * sx, y + step * sy)].max(1e-12).ln() as f64;
            let mm = g.mag[g.idx(x - step * sx, y - step * sy)].max(1e-12).ln() as f64;
            let d = mm - 2.0 * l0 + mp;
            (d < 0.0).then(|| -n_axis * n_axis * (step * step) as f64 / d)
        };
        // Noise on a wide ridge leaves extra maxima on its flanks; the
        // strongest response along each direction is the edge.
        let a = ry.atan2(rx) + std::f64::consts::PI;
        let bin = ((a / std::f64::consts::TAU * bins as f64) as usize).min(bins - 1);
        if best[bin].as_ref().is_none_or(|b| m > b.0) {
            best[bin] = Some((m, (Point2H::new(px, py, 1.0), m, var)));
        }
    }
    best.into_iter().flatten().map(|b| b.1).collect()
}

fn extract_in_rect(img: &GrayImage, rect: Rect, levels: &Levels, opts: &EdgeOptions) -> Vec<EdgeChain> {
    let kernel = gaussian_kernel(levels.sigma, 3.0);
    let threshold = levels.threshold;
    let (w, h) = (img.width, img.height);
    let smoothed = smooth(img, &kernel, rect.grow(2, w, h));
    let thr = threshold as f32;
    let dark = |x: usize, y: usize| smoothed.at(x, y) < thr;

    let mut blobs = Vec::new();
    for (pix, border) in components(rect, dark) {
        if border || pix.len() < opts.min_area {
            continue;
        }
        let bb = bbox(&pix);
        let inner: HashSet<(usize, usize)> = pix.iter().copied().collect();
        let mut enclosed_px = HashSet::new();
        if bb.width() > 2 && bb.height() > 2 {
            for (hole, hb) in components(bb, |x, y| !dark(x, y)) {
                // A bright patch enclosed by this region.
                let enclosed = !hb
                    && hole.iter().all(|&(x, y)| {
                        [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                            .iter()
                            .all(|q| !dark(q.0, q.1) || inner.contains(q))
                    });
                if !enclosed {
                    continue;
                }
                enclosed_px.extend(hole.iter().copied());
                if hole.len() >= opts.min_area {
                    blobs.push(make_blob(hole, true, &HashSet::new()));
                }
            }
        }
        // Edges facing enclosed holes belong to the holes.
        blobs.push(make_blob(pix, false, &enclosed_px));
    }
    if blobs.is_empty() {
        return Vec::new();
    }

    // Band ownership by breadth-first distance from every boundary pixel.
    let (rw, rh) = (rect.width(), rect.height());
    let mut owner = vec![NONE; rw * rh];
    let mut dist = vec![u8::MAX; rw * rh];
    let mut queue = VecDeque::new();
    for (b, blob) in blobs.iter().enumerate() {
        for &(x, y) in &blob.boundary {
            let i = (y - rect.y0) * rw + (x - rect.x0);
            if owner[i] == NONE {
                owner[i] = b as u32;
                dist[i] = 0;
                queue.push_back((x - rect.x0, y - rect.y0));
            }
        }
    }
    let band = opts.band as u8;
    let mut band_pixels = Vec::new();
    while let Some((x, y)) = queue.pop_front() {
        let i = y * rw + x;
        band_pixels.push((x + rect.x0, y + rect.y0));
        if dist[i] >= band {
            continue;
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= rw as i64 || ny >= rh as i64 {
                    continue;
                }
                let j = ny as usize * rw + nx as usize;
                if owner[j] == NONE {
                    owner[j] = owner[i];
                    dist[j] = dist[i] + 1;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
    }
    band_pixels.sort_by_key(|&(x, y)| (y, x));

    let mut owned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); blobs.len()];
    for &(x, y) in &band_pixels {
        owned[owner[(y - rect.y0) * rw + (x - rect.x0)] as usize].push((x, y));
    }
    let mut points: Vec<Vec<Point2H>> = Vec::with_capacity(blobs.len());
    let mut widths: Vec<Vec<f64>> = Vec::with_capacity(blobs.len());
    for (blob, band) in blobs.iter().zip(&owned) {
        if band.len() < opts.min_points {
            points.push(Vec::new());
            widths.push(Vec::new());
            continue;
        }
        // Color blobs: edges on the projection along background minus
        // interior color, where contrast per unit noise is largest.
        let mut projected = None;
        if let (Some(cl), Some(rgb), false) = (&levels.color, &img.rgb, blob.is_hole) {
            let mut order: Vec<(usize, usize)> = blob.pixels.clone();
            order.sort_by(|a, b| smoothed.at(a.0, a.1).total_cmp(&smoothed.at(b.0, b.1)));
            let core = &order[..(order.len() / 10).max(1)];
            let inside = channel_medians(core.iter().map(|&(x, y)| &rgb[y * w + x]));
            let d: [f64; 3] = std::array::from_fn(|k| cl.background[k] - inside[k]);
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.05 {
                let reach = ((3.0 * opts.max_edge_smoothing.max(levels.sigma)).ceil() as usize) + 8;
                let dir = d.map(|v| v / norm);
                projected = Some((project(img, rgb, dir, bbox(band).grow(reach, w, h)), norm, cl.noise));
            }
        }
        let (src, lin, noise) = match &projected {
            Some((p, _, n)) => (p, None, *n),
            None => (img, levels.linearizer.as_ref(), levels.noise),
        };
        let mut cands = blob_candidates(src, blob, band, levels.sigma, noise, opts.gradient_k, lin);
        let mut profile_var = None;
        if noise > 0.0 && !blob.is_hole && cands.len() >= opts.min_points {
            // Blurred edges in noise: the profile width from contrast over
            // peak gradient is steadier than the local ridge curvature. It
            // also sets the smoothing when the edge is much wider.
            let contrast = match &projected {
                Some((_, c, _)) => *c,
                None => {
                    let mut inner: Vec<f64> = blob.pixels.iter().map(|&(x, y)| smoothed.at(x, y) as f64).collect();
                    inner.sort_by(f64::total_cmp);
                    levels.background - inner[inner.len() / 20]
                }
            };
            let width_sq = |c: &[Candidate]| {
                let mut mags: Vec<f64> = c.iter().map(|c| c.1).collect();
                (contrast / ((std::f64::consts::TAU).sqrt() * median(&mut mags))).powi(2)
            };
            let w2 = width_sq(&cands);
            profile_var = Some(w2);
            let intrinsic = (w2 - levels.sigma * levels.sigma).max(0.0).sqrt();
            if intrinsic > 1.25 * levels.sigma {
                let s2 = intrinsic.min(opts.max_edge_smoothing);
                cands = blob_candidates(src, blob, band, s2, noise, opts.gradient_k, lin);
                profile_var = (cands.len() >= opts.min_points).then(|| width_sq(&cands));
            }
        }
        points.push(cands.iter().map(|c| c.0).collect());
        widths.push(match profile_var {
            Some(v) => vec![v],
            None => cands.iter().filter_map(|c| c.2).collect(),
        });
    }

    let mut chains = Vec::new();
    for ((blob, pts), mut w2) in blobs.iter().zip(points).zip(widths) {
        if pts.len() < opts.min_points {
            continue;
        }
        let Some((mut conic, mut kept, mut rms)) = robust_fit(&pts) else { continue };
        if opts.curvature_correction && !w2.is_empty() {
            let var = median(&mut w2);
            let shifted: Vec<Point2H> = pts.iter().map(|p| unbias(p, &conic, var)).collect();
            let Some(refit) = robust_fit(&shifted) else { continue };
            (conic, kept, rms) = refit;
        }
        if rms > opts.max_rms || !conic.is_ellipse() {
            continue;
        }
        let Some(center) = conic.ellipse_center() else { continue };
        let Some((a, b)) = conic.ellipse_semi_axes() else { continue };
        let perimeter = std::f64::consts::TAU * ((a * a + b * b) * 0.5).sqrt();
        if angular_coverage(&kept, center, perimeter) < opts.min_coverage {
            continue;
        }
        let bb = bbox(&blob.pixels);
        let slack = 3.0 + opts.band as f64;
        if center.x < bb.x0 as f64 - slack
            || center.x > bb.x1 as f64 + slack
            || center.y < bb.y0 as f64 - slack
            || center.y > bb.y1 as f64 + slack
        {
            continue;
        }
        let mean_intensity =
            blob.pixels.iter().map(|&(x, y)| img.get(x, y) as f64).sum::<f64>() / blob.pixels.len() as f64;
        chains.push(EdgeChain {
            points: EdgePointSet::new(kept, 0),
            conic,
            area: std::f64::consts::PI * a * b,
            mean_intensity,
            hue: mean_hue(img, &blob.pixels),
            is_hole: blob.is_hole,
            class: None,
        });
    }
    chains
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marker::MarkerKind;

    fn disk_image(w: usize, h: usize, disks: &[(f64, f64, f64, f32)]) -> GrayImage {
        let mut data = vec![1f32; w * h];
        for y in 0..h {
            for x in 0..w {
                // 4x4 supersampled coverage.
                let mut acc = 0f32;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                        let mut v = 1f32;
                        for &(cx, cy, r, fill) in disks {
                            if (px - cx).hypot(py - cy) < r {
                                v = fill;
                            }
                        }
                        acc += v;
                    }
                }
                data[y * w + x] = acc / 16.0;
            }
        }
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn blank_image_has_no_marker() {
        let img = GrayImage::filled(64, 48, 1.0);
        let spec = MarkerSpec::preset(MarkerKind::A);
        assert!(matches!(
            extract_edges(&img, None, &spec, &EdgeOptions::default()),
            Err(EdgeError::NoMarkerFound { .. })
        ));
    }

    #[test]
    fn two_disks_give_two_accurate_chains() {
        let img = disk_image(200, 120, &[(60.3, 60.7, 30.0, 0.0), (140.2, 58.9, 25.0, 0.25)]);
        let spec = MarkerSpec::preset(MarkerKind::A);
        let ex = extract_edges(&img, None, &spec, &EdgeOptions::default()).unwrap();
        assert_eq!(ex.chains.len(), 2);
        for c in &ex.chains {
            let (cx, cy, r) = if c.class == Some(0) { (60.3, 60.7, 30.0) } else { (140.2, 58.9, 25.0) };
            assert!(c.points.len() >= 100);
            let mean =
                c.points.points.iter().map(|p| (p.x() - cx).hypot(p.y() - cy) - r).sum::<f64>() / c.points.len() as f64;
            assert!(mean.abs() < 0.01, "{mean}");
            for p in &c.points.points {
                let d = ((p.x() - cx).hypot(p.y() - cy) - r).abs();
                assert!(d < 0.1, "{d}");
            }
        }
        assert_eq!(ex.chains.iter().filter(|c| c.class == Some(0)).count(), 1);
    }

    #[test]
    fn regions_reproduce_full_image_points() {
        let img = disk_image(200, 120, &[(60.3, 60.7, 30.0, 0.0), (140.2, 58.9, 25.0, 0.25)]);
        let spec = MarkerSpec::preset(MarkerKind::A);
        let opts = EdgeOptions::default();
        let full = extract_edges(&img, None, &spec, &opts).unwrap();
        let regions =
            [Region { x0: 20.0, y0: 20.0, x1: 101.0, y1: 101.0 }, Region { x0: 105.0, y0: 24.0, x1: 176.0, y1: 94.0 }];
        let gated = extract_edges(&img, Some(&regions), &spec, &opts).unwrap();
        let key = |e: &EdgeExtraction| {
            let mut v: Vec<_> = e.chains.iter().map(|c| (c.class, c.points.points.clone())).collect();
            v.sort_by_key(|(c, _)| *c);
            v
        };
        assert_eq!(key(&full), key(&gated));
    }

    #[test]
    fn holes_become_features() {
        let img = disk_image(160, 120, &[(70.0, 60.0, 40.0, 0.0), (70.0, 60.0, 6.0, 1.0), (128.0, 60.0, 6.0, 0.0)]);
        let spec = MarkerSpec::preset(MarkerKind::D);
        let ex = extract_edges(&img, None, &spec, &EdgeOptions::default()).unwrap();
        assert_eq!(ex.chains.len(), 1);
        assert_eq!(ex.features.len(), 2);
        let mut xs: Vec<f64> = ex.features.iter().map(|p| p.x()).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 70.0).abs() < 0.1 && (xs[1] - 128.0).abs() < 0.1);
    }

    #[test]
    fn hue_classes_follow_configured_colors() {
        let (w, h) = (160, 90);
        let mut rgb = vec![[1f32; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - 40.0).hypot(y as f64 - 45.0) < 20.0 {
                    rgb[y * w + x] = [0.1, 0.1, 0.8];
                }
                if (x as f64 - 115.0).hypot(y as f64 - 45.0) < 20.0 {
                    rgb[y * w + x] = [0.8, 0.1, 0.1];
                }
            }
        }
        let img = GrayImage::from_rgb(w, h, rgb).unwrap();
        let spec = MarkerSpec::preset(MarkerKind::A);
        let ex = extract_edges(&img, None, &spec, &EdgeOptions::default()).unwrap();
        for c in &ex.chains {
            let cx = c.conic.ellipse_center().unwrap().x;
            // preset colors: red first, blue second
            assert_eq!(c.class, Some(if cx > 80.0 { 0 } else { 1 }));
        }
    }

    #[test]
    fn noise_estimate_tracks_sigma() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.5, 0.05).unwrap();
        let data = (0..320 * 240).map(|_| n.sample(&mut rng) as f32).collect();
        let img = GrayImage::new(320, 240, data).unwrap();
        assert!((estimate_noise(&img) - 0.05).abs() < 0.003);
    }
}
