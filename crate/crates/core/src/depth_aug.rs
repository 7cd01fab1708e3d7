//! Depth image augmentation for the simulated side and preprocessing for the
//! real side, so that both depth distributions line up.
//!
//! Missing depth is encoded as `0`. The simulated pipeline runs
//! clip → blur → noise → dropout → mixup in that fixed order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("expected {expected} pixels, got {got}")]
    PixelCount { expected: usize, got: usize },
    #[error("pixel {index} = {value} outside [0, {max_depth}]")]
    OutOfRange { index: usize, value: f64, max_depth: f64 },
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("pixel {index} has zero depth")]
    ZeroDepth { index: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("portable graymap: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major metric depth grid with its declared maximum depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
    max_depth: T,
}

impl<T: Real> DepthImage<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, max_depth: T) -> Result<Self, DepthError> {
        if width == 0 || height == 0 {
            return Err(DepthError::EmptyImage { width, height });
        }
        if values.len() != width * height {
            return Err(DepthError::PixelCount { expected: width * height, got: values.len() });
        }
        if !(max_depth >= T::zero()) || !max_depth.is_finite() {
            return Err(DepthError::InvalidConfig(format!("max_depth must be finite and non-negative, got {max_depth}")));
        }
        if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= T::zero() && **v <= max_depth)) {
            return Err(DepthError::OutOfRange { index, value: v.to_f64_lossy(), max_depth: max_depth.to_f64_lossy() });
        }
        Ok(Self { width, height, values, max_depth })
    }

    pub fn filled(width: usize, height: usize, value: T, max_depth: T) -> Result<Self, DepthError> {
        Self::new(width, height, vec![value; width * height], max_depth)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn max_depth(&self) -> T {
        self.max_depth
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    fn with_values(&self, values: Vec<T>) -> Self {
        Self { width: self.width, height: self.height, values, max_depth: self.max_depth }
    }

    fn clamped(mut self) -> Self {
        let m = self.max_depth;
        for v in &mut self.values {
            *v = v.max(T::zero()).min(m);
        }
        self
    }
}

/// Values beyond `d` become `d`; `d` becomes the new maximum depth.
pub fn clip_depth<T: Real>(img: &DepthImage<T>, d: T) -> DepthImage<T> {
    DepthImage {
        width: img.width,
        height: img.height,
        values: img.values.iter().map(|v| v.min(d)).collect(),
        max_depth: d,
    }
}

/// Missing (zero) pixels take the maximum depth.
pub fn fill_missing<T: Real>(img: &DepthImage<T>) -> DepthImage<T> {
    img.with_values(
        img.values
            .iter()
            .map(|&v| if v == T::zero() { img.max_depth } else { v })
            .collect(),
    )
}

/// Adds `N(0, sigma^2)` per pixel and clamps to `[0, max_depth]`.
pub fn add_gaussian_noise<T: Real>(img: &DepthImage<T>, sigma: T, seed: u64) -> DepthImage<T> {
    if sigma == T::zero() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = img
        .values
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + sigma * T::lit(n)
        })
        .collect();
    img.with_values(values).clamped()
}

fn gaussian_kernel<T: Real>(sigma: T) -> Vec<T> {
    let radius = (T::lit(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let x = T::lit(i as f64 - radius as f64);
            (-(x * x) / two_s2).exp()
        })
        .collect();
    let sum = k.iter().fold(T::zero(), |a, &b| a + b);
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, clamp-to-edge borders.
pub fn gaussian_blur<T: Real>(img: &DepthImage<T>, sigma: T) -> DepthImage<T> {
    if sigma == T::zero() {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let clamp = |i: isize, n: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![T::zero(); img.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &wk) in kernel.iter().enumerate() {
                let xx = clamp(x + k as isize - r, w);
                acc += wk * img.values[y as usize * img.width + xx];
            }
            tmp[y as usize * img.width + x as usize] = acc;
        }
    }
    let mut out = vec![T::zero(); img.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (k, &wk) in kernel.iter().enumerate() {
                let yy = clamp(y + k as isize - r, h);
                acc += wk * tmp[yy * img.width + x as usize];
            }
            out[y as usize * img.width + x as usize] = acc;
        }
    }
    img.with_values(out).clamped()
}

/// Sets exactly `round(fraction * W * H)` distinct, uniformly chosen pixels
/// to the maximum depth.
pub fn dropout_to_max<T: Real>(img: &DepthImage<T>, fraction: T, seed: u64) -> DepthImage<T> {
    let n = img.values.len();
    let count = (fraction.max(T::zero()).min(T::one()) * T::lit(n as f64))
        .round()
        .to_usize()
        .unwrap_or(0)
        .min(n);
    let mut values = img.values.clone();
    if count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in sample(&mut rng, n, count) {
            values[i] = img.max_depth;
        }
    }
    img.with_values(values)
}

/// `alpha * sim + (1 - alpha) * dataset`, per pixel.
pub fn mixup<T: Real>(sim: &DepthImage<T>, dataset: &DepthImage<T>, alpha: T) -> Result<DepthImage<T>, DepthError> {
    if sim.dims() != dataset.dims() {
        return Err(DepthError::DimensionMismatch { a: sim.dims(), b: dataset.dims() });
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(DepthError::InvalidConfig(format!("mixup alpha must lie in [0, 1], got {alpha}")));
    }
    let beta = T::one() - alpha;
    let values = sim
        .values
        .iter()
        .zip(&dataset.values)
        .map(|(&s, &d)| alpha * s + beta * d)
        .collect();
    let max_depth = sim.max_depth.max(dataset.max_depth);
    Ok(DepthImage { width: sim.width, height: sim.height, values, max_depth }.clamped())
}

/// Per-pixel inverse depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

pub fn to_disparity<T: Real>(img: &DepthImage<T>) -> Result<DisparityMap<T>, DepthError> {
    if let Some(index) = img.values.iter().position(|&v| v == T::zero()) {
        return Err(DepthError::ZeroDepth { index });
    }
    Ok(DisparityMap {
        width: img.width,
        height: img.height,
        values: img.values.iter().map(|&v| v.recip()).collect(),
    })
}

/// Inverts [`to_disparity`].
pub fn from_disparity<T: Real>(map: &DisparityMap<T>, max_depth: T) -> Result<DepthImage<T>, DepthError> {
    if let Some(index) = map.values.iter().position(|&v| v == T::zero()) {
        return Err(DepthError::ZeroDepth { index });
    }
    let values: Vec<T> = map.values.iter().map(|&v| v.recip()).collect();
    let max_depth = values.iter().fold(max_depth, |m, &v| m.max(v));
    DepthImage::new(map.width, map.height, values, max_depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig<T> {
    /// Clip distance `d`, meters.
    pub clip_distance: T,
    /// Accepted range for `clip_distance`.
    pub clip_range: (T, T),
    pub noise_sigma: T,
    pub blur_sigma: T,
    pub dropout_fraction: T,
    /// Mixup coefficient; `None` disables mixup even if a dataset image is supplied.
    pub mixup_alpha: Option<T>,
    pub seed: u64,
}

impl<T: Real> Default for AugmentConfig<T> {
    fn default() -> Self {
        Self {
            clip_distance: T::one(),
            clip_range: (T::lit(0.9), T::lit(1.1)),
            noise_sigma: T::lit(0.005),
            blur_sigma: T::one(),
            dropout_fraction: T::lit(0.005),
            mixup_alpha: None,
            seed: 0,
        }
    }
}

impl<T: Real> AugmentConfig<T> {
    pub fn validate(&self) -> Result<(), DepthError> {
        let bad = |m: String| Err(DepthError::InvalidConfig(m));
        let (lo, hi) = self.clip_range;
        if !(self.clip_distance > T::zero() && self.clip_distance >= lo && self.clip_distance <= hi) {
            return bad(format!("clip distance {} outside task range [{lo}, {hi}]", self.clip_distance));
        }
        if !(self.noise_sigma >= T::zero()) || !(self.blur_sigma >= T::zero()) {
            return bad("noise and blur sigmas must be non-negative".into());
        }
        if !(self.dropout_fraction >= T::zero() && self.dropout_fraction <= T::one()) {
            return bad(format!("dropout fraction {} outside [0, 1]", self.dropout_fraction));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a >= T::zero() && a <= T::one()) {
                return bad(format!("mixup alpha {a} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    crate::derive_seed(seed, stage)
}

/// Simulated-image augmentation. Mixup runs only when both a dataset image
/// and `mixup_alpha` are given.
pub fn sim_pipeline<T: Real>(
    img: &DepthImage<T>,
    cfg: &AugmentConfig<T>,
    dataset: Option<&DepthImage<T>>,
) -> Result<DepthImage<T>, DepthError> {
    cfg.validate()?;
    let d = cfg.clip_distance;
    let mut out = clip_depth(img, d);
    out = gaussian_blur(&out, cfg.blur_sigma);
    out = add_gaussian_noise(&out, cfg.noise_sigma, stage_seed(cfg.seed, 1));
    out = dropout_to_max(&out, cfg.dropout_fraction, stage_seed(cfg.seed, 2));
    if let (Some(ds), Some(alpha)) = (dataset, cfg.mixup_alpha) {
        out = mixup(&out, &clip_depth(ds, d), alpha)?;
    }
    Ok(out)
}

/// Real-image preprocessing: fill missing pixels, then clip at `d`.
pub fn real_pipeline<T: Real>(img: &DepthImage<T>, d: T) -> DepthImage<T> {
    clip_depth(&fill_missing(img), d)
}

/// Proportion of pixels in each of `bins` equal-width bins over
/// `[0, max_depth]`; values at `max_depth` land in the last bin.
pub fn histogram<T: Real>(img: &DepthImage<T>, bins: usize) -> Vec<T> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    let m = img.max_depth;
    for &v in &img.values {
        let idx = if m > T::zero() {
            (v / m * T::lit(bins as f64)).floor().to_usize().unwrap_or(0).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    let n = T::lit(img.values.len() as f64);
    counts.into_iter().map(|c| T::lit(c as f64) / n).collect()
}

pub fn bin_centers<T: Real>(max_depth: T, bins: usize) -> Vec<T> {
    let width = max_depth / T::lit(bins as f64);
    (0..bins).map(|i| (T::lit(i as f64) + T::lit(0.5)) * width).collect()
}

/// `KL(p || q)` with `eps` added to every bin of both distributions.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T], eps: T) -> T {
    let norm = |x: &[T]| {
        let s = x.iter().fold(T::zero(), |a, &b| a + b + eps);
        x.iter().map(|&v| (v + eps) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).fold(T::zero(), |acc, (&a, &b)| acc + a * (a / b).ln())
}

pub fn format_histogram_csv<T: Real>(img: &DepthImage<T>, bins: usize) -> String {
    let mut out = String::from("bin_center,proportion\n");
    for (c, p) in bin_centers(img.max_depth, bins).iter().zip(histogram(img, bins)) {
        out.push_str(&format!("{c},{p}\n"));
    }
    out
}

/// Default metric scale of 16-bit samples: 0.1 mm per unit.
pub const DEFAULT_PGM_SCALE: f64 = 1e-4;

/// Writes a binary 16-bit portable graymap with the metric scale (and the
/// maximum depth) declared in comment lines.
pub fn write_pgm<T: Real, W: Write>(img: &DepthImage<T>, scale: f64, mut w: W) -> Result<(), DepthError> {
    if !(scale > 0.0) {
        return Err(DepthError::Format(format!("scale must be positive, got {scale}")));
    }
    write!(
        w,
        "P5\n# scale meters-per-unit {scale}\n# max_depth {}\n{} {}\n65535\n",
        img.max_depth, img.width, img.height
    )?;
    let mut buf = Vec::with_capacity(img.values.len() * 2);
    for &v in &img.values {
        let units = (v.to_f64_lossy() / scale).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&units.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_pgm<T: Real>(img: &DepthImage<T>, scale: f64, path: impl AsRef<Path>) -> Result<(), DepthError> {
    let mut bytes = Vec::new();
    write_pgm(img, scale, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary portable graymap (8- or 16-bit). Without a scale comment
/// samples are taken as millimeters.
pub fn read_pgm<T: Real, R: Read>(r: R) -> Result<DepthImage<T>, DepthError> {
    let mut r = BufReader::new(r);
    let fmt = |m: &str| DepthError::Format(m.to_string());
    let mut scale = 1e-3;
    let mut max_depth: Option<f64> = None;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(fmt("truncated header"));
        }
        let (content, comment) = match line.find('#') {
            Some(i) => (&line[..i], Some(&line[i + 1..])),
            None => (line.as_str(), None),
        };
        tokens.extend(content.split_whitespace().map(String::from));
        if let Some(c) = comment {
            let parts: Vec<&str> = c.split_whitespace().collect();
            match parts.as_slice() {
                ["scale", "meters-per-unit", v] => scale = v.parse().map_err(|_| fmt("invalid scale comment"))?,
                ["max_depth", v] => max_depth = Some(v.parse().map_err(|_| fmt("invalid max_depth comment"))?),
                _ => {}
            }
        }
    }
    if tokens.len() > 4 {
        return Err(fmt("unexpected data after maxval on header line"));
    }
    if tokens[0] != "P5" {
        return Err(fmt("expected binary graymap magic P5"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt("invalid header number"));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(fmt("maxval must be in 1..=65535"));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let mut data = vec![0u8; width * height * bytes_per];
    r.read_exact(&mut data).map_err(|_| fmt("truncated pixel data"))?;
    let values: Vec<T> = data
        .chunks_exact(bytes_per)
        .map(|c| {
            let u = if bytes_per == 2 { u16::from_be_bytes([c[0], c[1]]) as f64 } else { c[0] as f64 };
            T::lit(u * scale)
        })
        .collect();
    let max_from_data = values.iter().fold(T::zero(), |m, &v| m.max(v));
    let max_depth = T::lit(max_depth.unwrap_or(maxval as f64 * scale)).max(max_from_data);
    DepthImage::new(width, height, values, max_depth)
}

pub fn load_pgm<T: Real>(path: impl AsRef<Path>) -> Result<DepthImage<T>, DepthError> {
    read_pgm(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, max: f64, seed: u64) -> DepthImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..w * h)
            .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.0..max) })
            .collect();
        DepthImage::new(w, h, v, max).unwrap()
    }

    fn in_bounds(img: &DepthImage<f64>) -> bool {
        img.values().iter().all(|&v| (0.0..=img.max_depth()).contains(&v))
    }

    #[test]
    fn clip_examples() {
        let img = DepthImage::new(2, 1, vec![0.3, 0.5], 2.0).unwrap();
        let c = clip_depth(&img, 1.0);
        assert_eq!(c.values(), img.values());
        assert_eq!(c.max_depth(), 1.0);
        let u = DepthImage::filled(3, 3, 2.0, 2.0).unwrap();
        assert!(clip_depth(&u, 1.0).values().iter().all(|&v| v == 1.0));
        let mixed = random_image(40, 30, 3.0, 1);
        let c = clip_depth(&mixed, 1.0);
        assert_eq!(c.values().iter().filter(|&&v| v > 1.0).count(), 0);
        let above = mixed.values().iter().filter(|&&v| v > 1.0).count();
        assert_eq!(c.values().iter().filter(|&&v| v == 1.0).count(), above);
    }

    #[test]
    fn fill_examples() {
        let img = DepthImage::new(2, 1, vec![0.3, 0.5], 2.0).unwrap();
        assert_eq!(fill_missing(&img), img);
        let z = DepthImage::filled(4, 4, 0.0, 1.5).unwrap();
        assert!(fill_missing(&z).values().iter().all(|&v| v == 1.5));
        let checker: Vec<f64> = (0..64).map(|i| if (i % 8 + i / 8) % 2 == 0 { 0.0 } else { 0.7 }).collect();
        let img = DepthImage::new(8, 8, checker.clone(), 1.2).unwrap();
        let f = fill_missing(&img);
        assert_eq!(f.values().iter().filter(|&&v| v == 1.2).count(), 32);
        for (a, b) in f.values().iter().zip(&checker) {
            if *b != 0.0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn noise_examples() {
        let img = random_image(30, 20, 2.0, 2);
        assert_eq!(add_gaussian_noise(&img, 0.0, 1), img);
        assert_eq!(add_gaussian_noise(&img, 0.01, 5), add_gaussian_noise(&img, 0.01, 5));
        let mid = DepthImage::filled(1000, 1000, 1.0, 2.0).unwrap();
        let out = add_gaussian_noise(&mid, 0.01, 11);
        let n = 1e6;
        let diffs: Vec<f64> = out.values().iter().map(|v| v - 1.0).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.01).abs() < 0.0002, "sd {sd}");
    }

    #[test]
    fn blur_examples() {
        let c = DepthImage::<f64>::filled(17, 11, 0.8, 1.0).unwrap();
        let b = gaussian_blur(&c, 1.7);
        assert!(b.values().iter().all(|v| (v - 0.8).abs() < 1e-9));
        let img = random_image(10, 10, 1.0, 3);
        assert_eq!(gaussian_blur(&img, 0.0), img);
        let mut v = vec![0.0; 31 * 31];
        v[15 * 31 + 15] = 1.0;
        let spike = DepthImage::new(31, 31, v, 1.0).unwrap();
        let out = gaussian_blur(&spike, 1.5);
        let mass: f64 = out.values().iter().sum();
        assert!((mass - 1.0).abs() < 1e-6);
        // kernel-sum oracle: separable weights recomputed independently
        let k: Vec<f64> = (-5..=5).map(|i: i32| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
        let s: f64 = k.iter().sum();
        assert!((out.get(15, 15) - (k[5] / s).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn dropout_examples() {
        let img = random_image(20, 20, 1.0, 4);
        assert_eq!(dropout_to_max(&img, 0.0, 1), img);
        let below = DepthImage::filled(300, 300, 0.5, 1.0).unwrap();
        let out = dropout_to_max(&below, 0.005, 9);
        assert_eq!(out.values().iter().filter(|&&v| v == 1.0).count(), 450);
        let all = dropout_to_max(&img, 1.0, 2);
        assert!(all.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mixup_examples() {
        let a = random_image(6, 5, 1.0, 5);
        let b = random_image(6, 5, 1.5, 6);
        assert_eq!(mixup(&a, &b, 1.0).unwrap().values(), a.values());
        assert_eq!(mixup(&a, &b, 0.0).unwrap().values(), b.values());
        let u = DepthImage::<f64>::filled(3, 3, 0.4, 1.0).unwrap();
        let v = DepthImage::filled(3, 3, 0.8, 1.0).unwrap();
        assert!(mixup(&u, &v, 0.5).unwrap().values().iter().all(|x| (x - 0.6).abs() < 1e-15));
        let small = DepthImage::filled(2, 2, 0.4, 1.0).unwrap();
        assert!(matches!(mixup(&u, &small, 0.5), Err(DepthError::DimensionMismatch { .. })));
    }

    #[test]
    fn disparity_examples() {
        let u = DepthImage::filled(4, 2, 2.0, 2.0).unwrap();
        assert!(to_disparity(&u).unwrap().values.iter().all(|&v| v == 0.5));
        let img = fill_missing(&random_image(9, 7, 2.0, 7));
        let back = from_disparity(&to_disparity(&img).unwrap(), img.max_depth()).unwrap();
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let row = DepthImage::new(4, 1, vec![2.0, 1.5, 1.0, 0.5], 2.0).unwrap();
        let d = to_disparity(&row).unwrap();
        assert!(d.values.windows(2).all(|w| w[0] < w[1]));
        let holes = DepthImage::new(2, 1, vec![1.0, 0.0], 2.0).unwrap();
        assert!(matches!(to_disparity(&holes), Err(DepthError::ZeroDepth { index: 1 })));
    }

    #[test]
    fn pipelines() {
        let img = random_image(32, 24, 3.0, 8);
        let plain = AugmentConfig {
            clip_distance: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            dropout_fraction: 0.0,
            mixup_alpha: Some(1.0),
            ..AugmentConfig::default()
        };
        assert_eq!(sim_pipeline(&img, &plain, Some(&img)).unwrap(), clip_depth(&img, 1.0));
        let cfg = AugmentConfig { seed: 42, ..AugmentConfig::default() };
        let a = sim_pipeline(&img, &cfg, None).unwrap();
        assert_eq!(a, sim_pipeline(&img, &cfg, None).unwrap());
        assert_eq!(a.values().iter().filter(|&&v| v > 1.0).count(), 0);
        assert!(sim_pipeline(&img, &AugmentConfig { clip_distance: 2.0, ..cfg }, None).is_err());

        let clean = DepthImage::new(3, 1, vec![0.2, 0.7, 0.9], 1.0).unwrap();
        assert_eq!(real_pipeline(&clean, 1.0).values(), clean.values());
        let missing = DepthImage::filled(4, 4, 0.0, 4.0).unwrap();
        assert!(real_pipeline(&missing, 1.1).values().iter().all(|&v| v == 1.1));
        let raw = random_image(16, 16, 3.0, 9);
        let out = real_pipeline(&raw, 0.9);
        for (o, r) in out.values().iter().zip(raw.values()) {
            if *r == 0.0 {
                assert_eq!(*o, 0.9);
            } else {
                assert_eq!(*o, r.min(0.9));
            }
        }
    }

    #[test]
    fn histogram_examples() {
        let u = DepthImage::filled(5, 5, 0.3, 1.0).unwrap();
        let h = histogram(&u, 10);
        assert_eq!(h.iter().filter(|&&p| p > 0.0).count(), 1);
        assert_eq!(h[3], 1.0);
        let two = DepthImage::new(2, 2, vec![0.1, 0.1, 0.9, 0.9], 1.0).unwrap();
        let h = histogram(&two, 4);
        assert_eq!(h, vec![0.5, 0.0, 0.0, 0.5]);
        let csv = format_histogram_csv(&two, 2);
        assert_eq!(csv, "bin_center,proportion\n0.25,0.5\n0.75,0.5\n");
    }

    #[test]
    fn pgm_round_trip_and_rejects_garbage() {
        let img = random_image(13, 7, 1.5, 10);
        let mut bytes = Vec::new();
        write_pgm(&img, DEFAULT_PGM_SCALE, &mut bytes).unwrap();
        let back: DepthImage<f64> = read_pgm(bytes.as_slice()).unwrap();
        assert_eq!(back.dims(), img.dims());
        assert_eq!(back.max_depth(), 1.5);
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() <= DEFAULT_PGM_SCALE / 2.0 + 1e-12);
        }
        let mut again = Vec::new();
        write_pgm(&back, DEFAULT_PGM_SCALE, &mut again).unwrap();
        assert_eq!(again, bytes);
        // big-endian sample order
        let one = DepthImage::new(1, 1, vec![0.0256], 1.0).unwrap();
        let mut b = Vec::new();
        write_pgm(&one, DEFAULT_PGM_SCALE, &mut b).unwrap();
        assert_eq!(&b[b.len() - 2..], &256u16.to_be_bytes());
        assert!(read_pgm::<f64, _>(&b"P2\n1 1\n255\n0"[..]).is_err());
        assert!(read_pgm::<f64, _>(&b"P5\n2 2\n65535\n\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn stages_preserve_shape_and_range(seed in 0u64..200, w in 1usize..20, h in 1usize..20,
                                           sigma in 0.0..3.0f64, frac in 0.0..1.0f64, bins in 1usize..40) {
            let img = random_image(w, h, 2.0, seed);
            let outs = [
                clip_depth(&img, 1.0),
                fill_missing(&img),
                add_gaussian_noise(&img, sigma * 0.1, seed),
                gaussian_blur(&img, sigma),
                dropout_to_max(&img, frac, seed),
                mixup(&img, &random_image(w, h, 1.0, seed + 1), frac).unwrap(),
                real_pipeline(&img, 1.0),
                sim_pipeline(&img, &AugmentConfig { seed, ..AugmentConfig::default() }, None).unwrap(),
            ];
            for o in &outs {
                prop_assert_eq!(o.dims(), img.dims());
                prop_assert!(in_bounds(o));
            }
            let total: f64 = histogram(&img, bins).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
