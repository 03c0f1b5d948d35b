//! Synthetic datasets, noise, quality metrics, blur kernels, and file I/O.
//!
//! Generation is deterministic under a seed and splittable per sample index,
//! so parallel generation is order-independent. Quality metrics follow the
//! formulas used throughout: note that the signal form puts the unsquared
//! range over the mean squared error, which is unusual (the common convention
//! squares the peak) but is kept verbatim; both forms are shift-invariant and
//! scale-variant, so absolute levels matter.

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;
use crate::serial;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Pwc1d,
    ImagePatches,
}

/// Per-sample shape: flat signal of length m, or a d1 x d2 image stored
/// row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleShape {
    Signal { m: usize },
    Image { d1: usize, d2: usize },
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match *self {
            SampleShape::Signal { m } => m,
            SampleShape::Image { d1, d2 } => d1 * d2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Paired clean/noisy samples with the noise realization kept for residual
/// training targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub shape: SampleShape,
    pub clean: Vec<Vec<f64>>,
    pub noisy: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub sigma: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// One piecewise-constant signal: between 2 and max{2, Poisson(5)} parts with
/// uniformly placed breakpoints, standard normal levels, sample mean removed.
fn pwc_signal(m: usize, rng: &mut Rng) -> Vec<f64> {
    let parts = rng.poisson(5.0).max(2) as usize;
    // breakpoints: sorted uniform positions in 1..m; duplicates merge parts
    let mut breaks: Vec<usize> = (0..parts - 1).map(|_| 1 + rng.below(m as u64 - 1) as usize).collect();
    breaks.sort_unstable();
    breaks.push(m);
    let mut x = vec![0.0; m];
    let mut start = 0;
    for &end in &breaks {
        let level = rng.normal();
        for v in &mut x[start..end] {
            *v = level;
        }
        start = end;
    }
    let mean = x.iter().sum::<f64>() / m as f64;
    for v in &mut x {
        *v -= mean;
    }
    x
}

/// Generates `count` clean piecewise-constant signals of length `m`.
pub fn gen_pwc(count: usize, m: usize, seed: u64) -> Result<Dataset> {
    ensure!(m >= 4, "signal length must be at least 4, got {m}");
    let base = Rng::new(seed);
    let clean: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let mut rng = base.stream(i as u64);
            pwc_signal(m, &mut rng)
        })
        .collect();
    Ok(Dataset {
        kind: DatasetKind::Pwc1d,
        shape: SampleShape::Signal { m },
        noisy: clean.clone(),
        noise: vec![vec![0.0; m]; count],
        clean,
        sigma: 0.0,
        seed,
    })
}

/// One piecewise-smooth test image in [0, 1]: a few constant rectangles over
/// a smooth bump, then min-max normalized.
fn smooth_image(d1: usize, d2: usize, rng: &mut Rng) -> Vec<f64> {
    let mut img = vec![0.0; d1 * d2];
    // smooth background bump
    let cx = rng.uniform() * d1 as f64;
    let cy = rng.uniform() * d2 as f64;
    let w = 0.25 * (d1.min(d2) as f64) * (1.0 + rng.uniform());
    for p in 0..d1 {
        for q in 0..d2 {
            let dx = p as f64 - cx;
            let dy = q as f64 - cy;
            img[p * d2 + q] = (-(dx * dx + dy * dy) / (2.0 * w * w)).exp();
        }
    }
    // constant rectangles with sharp edges
    let rects = 2 + rng.below(3) as usize;
    for _ in 0..rects {
        let p0 = rng.below(d1 as u64) as usize;
        let q0 = rng.below(d2 as u64) as usize;
        let p1 = (p0 + 2 + rng.below((d1 / 2) as u64) as usize).min(d1);
        let q1 = (q0 + 2 + rng.below((d2 / 2) as u64) as usize).min(d2);
        let level = rng.normal() * 0.5;
        for p in p0..p1 {
            for v in &mut img[p * d2 + q0..p * d2 + q1] {
                *v += level;
            }
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut img {
        *v = (*v - lo) / span;
    }
    img
}

/// Generates `count` piecewise-smooth images with values in [0, 1].
pub fn gen_images(count: usize, d1: usize, d2: usize, seed: u64) -> Result<Dataset> {
    ensure!(d1 >= 16 && d2 >= 16, "images must be at least 16 x 16, got {d1} x {d2}");
    let base = Rng::new(seed);
    let clean: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let mut rng = base.stream(i as u64);
            smooth_image(d1, d2, &mut rng)
        })
        .collect();
    Ok(Dataset {
        kind: DatasetKind::ImagePatches,
        shape: SampleShape::Image { d1, d2 },
        noisy: clean.clone(),
        noise: vec![vec![0.0; d1 * d2]; count],
        clean,
        sigma: 0.0,
        seed,
    })
}

/// Adds i.i.d. N(0, sigma^2) noise, recording the realization so residual
/// targets noise = noisy - clean stay available.
pub fn add_noise(dataset: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), "sigma must be nonnegative, got {sigma}");
    let base = Rng::new(seed);
    let mut out = dataset.clone();
    out.sigma = sigma;
    for (i, (noisy, noise)) in out.noisy.iter_mut().zip(out.noise.iter_mut()).enumerate() {
        let mut rng = base.stream(i as u64);
        for ((y, e), &c) in noisy.iter_mut().zip(noise.iter_mut()).zip(dataset.clean[i].iter()) {
            let draw = sigma * rng.normal();
            *e = draw;
            *y = c + draw;
        }
    }
    Ok(out)
}

/// 10 log10((max y - min y) / MSE), the signal quality metric. The range in
/// the numerator is deliberately unsquared. Identical inputs report +inf.
pub fn psnr_signal(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure!(x.len() == y.len(), "length mismatch: {} vs {}", x.len(), y.len());
    ensure!(!x.is_empty(), "empty signals have no quality metric");
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * ((hi - lo) / mse).log10())
}

/// 10 log10(1 / MSE), the image quality metric for values in [0, 1].
/// Identical inputs report +inf.
pub fn psnr_image(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure!(x.len() == y.len(), "length mismatch: {} vs {}", x.len(), y.len());
    ensure!(!x.is_empty(), "empty images have no quality metric");
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Clamps every entry into [0, 1]; applied to solver outputs before the image
/// metric, whose formula assumes that value range.
pub fn clamp01(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Normalized 9 x 9 Gaussian blur kernel, taps exp(-(i^2+j^2)/(2 tau^2)) for
/// i, j in {-4, ..., 4}.
#[derive(Debug, Clone)]
pub struct BlurKernel {
    tau: f64,
    taps: [f64; 81],
}

pub const BLUR_HALF: usize = 4;

impl BlurKernel {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn taps(&self) -> &[f64; 81] {
        &self.taps
    }

    pub fn at(&self, i: i64, j: i64) -> f64 {
        let h = BLUR_HALF as i64;
        debug_assert!(i.abs() <= h && j.abs() <= h);
        self.taps[((i + h) * 9 + (j + h)) as usize]
    }
}

pub fn gauss_kernel(tau: f64) -> Result<BlurKernel> {
    ensure!(tau > 0.0 && tau.is_finite(), "kernel width must be positive, got {tau}");
    let mut taps = [0.0; 81];
    let mut sum = 0.0;
    for i in -4i64..=4 {
        for j in -4i64..=4 {
            let v = (-((i * i + j * j) as f64) / (2.0 * tau * tau)).exp();
            taps[((i + 4) * 9 + (j + 4)) as usize] = v;
            sum += v;
        }
    }
    for t in &mut taps {
        *t /= sum;
    }
    Ok(BlurKernel { tau, taps })
}

/// Periodic Gaussian smoothing of a one-dimensional signal; the sampled
/// kernel covers three standard deviations each side and is normalized.
pub fn gauss_smooth_signal(x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    ensure!(
        sigma > 0.0 && sigma.is_finite(),
        "smoothing width must be positive, got {sigma}"
    );
    ensure!(!x.is_empty(), "signal must not be empty");
    let m = x.len();
    let half = ((3.0 * sigma).ceil() as usize).max(1).min(m / 2);
    let mut taps = vec![0.0; 2 * half + 1];
    let mut sum = 0.0;
    for (k, tap) in taps.iter_mut().enumerate() {
        let d = k as f64 - half as f64;
        *tap = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *tap;
    }
    for t in &mut taps {
        *t /= sum;
    }
    let mut out = vec![0.0; m];
    for (p, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &t) in taps.iter().enumerate() {
            let idx = (p + m + k - half) % m;
            acc += t * x[idx];
        }
        *o = acc;
    }
    Ok(out)
}

fn check_image_len(img: &[f64], d1: usize, d2: usize) -> Result<()> {
    ensure!(
        img.len() == d1 * d2,
        "image buffer holds {} values, expected {d1} x {d2} = {}",
        img.len(),
        d1 * d2
    );
    Ok(())
}

/// Circular convolution of a d1 x d2 image with the kernel:
/// out[p, q] = sum_{i,j} k[i, j] img[(p - i) mod d1, (q - j) mod d2].
pub fn blur_apply_periodic(kernel: &BlurKernel, img: &[f64], d1: usize, d2: usize) -> Result<Vec<f64>> {
    check_image_len(img, d1, d2)?;
    ensure!(d1 >= 9 && d2 >= 9, "image must be at least 9 x 9 for a 9 x 9 kernel");
    let h = BLUR_HALF as i64;
    let mut out = vec![0.0; d1 * d2];
    for p in 0..d1 as i64 {
        for q in 0..d2 as i64 {
            let mut acc = 0.0;
            for i in -h..=h {
                let row = (p - i).rem_euclid(d1 as i64) as usize;
                for j in -h..=h {
                    let col = (q - j).rem_euclid(d2 as i64) as usize;
                    acc += kernel.at(i, j) * img[row * d2 + col];
                }
            }
            out[(p as usize) * d2 + q as usize] = acc;
        }
    }
    Ok(out)
}

/// Adjoint of [`blur_apply_periodic`] (circular correlation).
pub fn blur_adjoint_periodic(kernel: &BlurKernel, img: &[f64], d1: usize, d2: usize) -> Result<Vec<f64>> {
    check_image_len(img, d1, d2)?;
    ensure!(d1 >= 9 && d2 >= 9, "image must be at least 9 x 9 for a 9 x 9 kernel");
    let h = BLUR_HALF as i64;
    let mut out = vec![0.0; d1 * d2];
    for p in 0..d1 as i64 {
        for q in 0..d2 as i64 {
            let mut acc = 0.0;
            for i in -h..=h {
                let row = (p + i).rem_euclid(d1 as i64) as usize;
                for j in -h..=h {
                    let col = (q + j).rem_euclid(d2 as i64) as usize;
                    acc += kernel.at(i, j) * img[row * d2 + col];
                }
            }
            out[(p as usize) * d2 + q as usize] = acc;
        }
    }
    Ok(out)
}

/// Convolution restricted to positions where the kernel fits entirely inside
/// the image; output is (d1 - 8) x (d2 - 8).
pub fn blur_apply_valid(kernel: &BlurKernel, img: &[f64], d1: usize, d2: usize) -> Result<Vec<f64>> {
    check_image_len(img, d1, d2)?;
    ensure!(d1 > 8 && d2 > 8, "image too small for valid-crop blur: {d1} x {d2}");
    let h = BLUR_HALF as i64;
    let (o1, o2) = (d1 - 8, d2 - 8);
    let mut out = vec![0.0; o1 * o2];
    for p in 0..o1 {
        for q in 0..o2 {
            let mut acc = 0.0;
            for i in -h..=h {
                let row = (p as i64 + h - i) as usize;
                for j in -h..=h {
                    let col = (q as i64 + h - j) as usize;
                    acc += kernel.at(i, j) * img[row * d2 + col];
                }
            }
            out[p * o2 + q] = acc;
        }
    }
    Ok(out)
}

/// Adjoint of [`blur_apply_valid`]: scatters a cropped image back to d1 x d2.
pub fn blur_adjoint_valid(kernel: &BlurKernel, img: &[f64], d1: usize, d2: usize) -> Result<Vec<f64>> {
    ensure!(d1 > 8 && d2 > 8, "image too small for valid-crop blur: {d1} x {d2}");
    let (o1, o2) = (d1 - 8, d2 - 8);
    check_image_len(img, o1, o2)?;
    let h = BLUR_HALF as i64;
    let mut out = vec![0.0; d1 * d2];
    for p in 0..o1 {
        for q in 0..o2 {
            let v = img[p * o2 + q];
            for i in -h..=h {
                let row = (p as i64 + h - i) as usize;
                for j in -h..=h {
                    let col = (q as i64 + h - j) as usize;
                    out[row * d2 + col] += kernel.at(i, j) * v;
                }
            }
        }
    }
    Ok(out)
}

/// Writes an image with values in [0, 1] as binary 8-bit PGM (P5). Values are
/// scaled by 255 and rounded to nearest with ties to even.
pub fn write_pgm(path: &Path, img: &[f64], d1: usize, d2: usize) -> Result<()> {
    check_image_len(img, d1, d2)?;
    let mut bytes = Vec::with_capacity(32 + img.len());
    bytes.extend_from_slice(format!("P5\n{d2} {d1}\n255\n").as_bytes());
    for &v in img {
        let scaled = (v.clamp(0.0, 1.0) * 255.0).round_ties_even();
        bytes.push(scaled as u8);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary 8-bit PGM (P5) into values in [0, 1], returning
/// (image, rows, cols). Malformed headers fail with the byte offset.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let mut pos;

    fn parse_err(message: impl Into<String>, offset: usize) -> Error {
        Error::Parse {
            message: message.into(),
            offset,
        }
    }

    // magic
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(parse_err("expected PGM magic \"P5\"", 0));
    }
    pos = 2;

    // header tokens: width, height, maxval; whitespace separated with
    // optional '#' comments
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(parse_err("truncated header", pos)),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(parse_err("expected a decimal header field", pos));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|e| parse_err(format!("bad header field: {e}"), start))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(format!("unsupported maxval {maxval} (need 255)"), pos));
    }
    // exactly one whitespace byte separates header and raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(parse_err("expected whitespace before raster", pos)),
        None => return Err(parse_err("truncated header", pos)),
    }
    let need = width * height;
    if bytes.len() - pos < need {
        return Err(parse_err(
            format!("raster holds {} bytes, expected {need}", bytes.len() - pos),
            pos,
        ));
    }
    let img = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((img, height, width))
}

/// Directory layout descriptor for a stored dataset.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: DatasetKind,
    count: usize,
    shape: SampleShape,
    sigma: f64,
    seed: u64,
    files: Vec<String>,
}

const DATASET_FILES: [&str; 3] = ["clean.csv", "noisy.csv", "noise.csv"];

/// Writes a dataset directory: manifest.json plus one CSV per role, one
/// sample per row.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        kind: dataset.kind,
        count: dataset.len(),
        shape: dataset.shape,
        sigma: dataset.sigma,
        seed: dataset.seed,
        files: DATASET_FILES.iter().map(|s| s.to_string()).collect(),
    };
    serial::write_json_file(&dir.join("manifest.json"), &manifest)?;
    serial::write_csv(&dir.join("clean.csv"), &dataset.clean)?;
    serial::write_csv(&dir.join("noisy.csv"), &dataset.noisy)?;
    serial::write_csv(&dir.join("noise.csv"), &dataset.noise)?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut tables: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3);
    for name in &manifest.files {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::Parse {
                message: format!("manifest names missing file {name:?}"),
                offset: 0,
            });
        }
    }
    for name in DATASET_FILES {
        ensure!(
            manifest.files.iter().any(|f| f == name),
            "manifest does not list required file {name:?}"
        );
        tables.push(serial::read_csv(&dir.join(name))?);
    }
    let noise = tables.pop().expect("three tables");
    let noisy = tables.pop().expect("two tables");
    let clean = tables.pop().expect("one table");
    ensure!(
        clean.len() == manifest.count && noisy.len() == manifest.count && noise.len() == manifest.count,
        "manifest count {} does not match table rows {}/{}/{}",
        manifest.count,
        clean.len(),
        noisy.len(),
        noise.len()
    );
    let len = manifest.shape.len();
    for row in clean.iter().chain(noisy.iter()).chain(noise.iter()) {
        ensure!(row.len() == len, "sample row holds {} values, expected {len}", row.len());
    }
    Ok(Dataset {
        kind: manifest.kind,
        shape: manifest.shape,
        clean,
        noisy,
        noise,
        sigma: manifest.sigma,
        seed: manifest.seed,
    })
}
