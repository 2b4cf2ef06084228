//! Seeded synthetic degradations, fidelity metrics, and the procedural
//! training corpus. Everything here is bit-identical across runs and
//! platforms: randomness comes from the counter-based [`CounterRng`] and
//! transcendentals from the fixed polynomials in [`pmath`].

pub mod pmath;
mod prng;

pub use prng::CounterRng;

use crate::error::{Result, VarError};
use ndarray::Array3;

/// RGB image, `(3, H, W)`, values in `[0, 1]`.
pub type ImageF = Array3<f64>;

/// Family-specific degradation parameters.
///
/// `PoissonGaussian` is the stand-in for the real-sensor-noise task slot:
/// signal-dependent shot noise plus Gaussian read noise.
#[derive(Debug, Clone, PartialEq)]
pub enum DegradationKind {
    /// i.i.d. additive noise; `sigma` quoted on the 0–255 scale.
    GaussianNoise { sigma: f64 },
    /// Shot noise `sqrt(I/peak)·g` plus read noise `sigma/255·g`.
    PoissonGaussian { peak: f64, sigma: f64 },
    /// Normalized linear kernel of `length` pixels at `angle_deg`.
    MotionBlur { length: usize, angle_deg: f64 },
    /// `I·t + A·(1−t)` with uniform transmission `t` and airlight `A`.
    Haze { transmission: f64, airlight: f64 },
    /// `I^gamma · brightness`.
    LowLight { gamma: f64, brightness: f64 },
    /// Additive bright streaks at a fixed 70° orientation.
    Rain { density: f64, intensity: f64, length: usize },
    Identity,
}

/// A fully specified degradation: family parameters plus its noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, seed: u64) -> Self {
        DegradationSpec { kind, seed }
    }

    /// Task-slot name used in manifests and weighting tables.
    pub fn family(&self) -> &'static str {
        match self.kind {
            DegradationKind::GaussianNoise { .. } => "gaussian_noise",
            DegradationKind::PoissonGaussian { .. } => "real_noise",
            DegradationKind::MotionBlur { .. } => "motion_blur",
            DegradationKind::Haze { .. } => "haze",
            DegradationKind::LowLight { .. } => "low_light",
            DegradationKind::Rain { .. } => "rain",
            DegradationKind::Identity => "identity",
        }
    }

    /// Compact `key=value;…` rendering for manifest CSVs.
    pub fn params_string(&self) -> String {
        match &self.kind {
            DegradationKind::GaussianNoise { sigma } => format!("sigma={sigma}"),
            DegradationKind::PoissonGaussian { peak, sigma } => {
                format!("peak={peak};sigma={sigma}")
            }
            DegradationKind::MotionBlur { length, angle_deg } => {
                format!("length={length};angle={angle_deg}")
            }
            DegradationKind::Haze {
                transmission,
                airlight,
            } => format!("t={transmission};A={airlight}"),
            DegradationKind::LowLight { gamma, brightness } => {
                format!("gamma={gamma};brightness={brightness}")
            }
            DegradationKind::Rain {
                density,
                intensity,
                length,
            } => format!("density={density};intensity={intensity};length={length}"),
            DegradationKind::Identity => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DegradationKind::GaussianNoise { sigma } => {
                if *sigma <= 0.0 {
                    return Err(VarError::domain(
                        "gaussian_noise sigma must be > 0 (0-255 scale)",
                    ));
                }
            }
            DegradationKind::PoissonGaussian { peak, sigma } => {
                if *peak <= 0.0 || *sigma < 0.0 {
                    return Err(VarError::domain(
                        "real_noise needs peak > 0 and sigma >= 0",
                    ));
                }
            }
            DegradationKind::MotionBlur { length, .. } => {
                if *length < 1 {
                    return Err(VarError::domain("motion_blur length must be >= 1"));
                }
            }
            DegradationKind::Haze { transmission, .. } => {
                if !(*transmission > 0.0 && *transmission <= 1.0) {
                    return Err(VarError::domain("haze transmission must be in (0, 1]"));
                }
            }
            DegradationKind::LowLight { gamma, brightness } => {
                if *gamma < 1.0 {
                    return Err(VarError::domain("low_light gamma must be >= 1"));
                }
                if !(*brightness > 0.0 && *brightness <= 1.0) {
                    return Err(VarError::domain("low_light brightness must be in (0, 1]"));
                }
            }
            DegradationKind::Rain { density, .. } => {
                if *density < 0.0 {
                    return Err(VarError::domain("rain density must be >= 0"));
                }
            }
            DegradationKind::Identity => {}
        }
        Ok(())
    }
}

fn clamp01(img: &mut ImageF) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Apply a degradation. Deterministic in `(spec, image)`; output in `[0, 1]`.
pub fn apply(spec: &DegradationSpec, image: &ImageF) -> Result<ImageF> {
    spec.validate()?;
    let (c, h, w) = image.dim();
    debug_assert_eq!(c, 3);
    let rng = CounterRng::new(spec.seed);
    let mut out = match &spec.kind {
        DegradationKind::Identity => image.clone(),
        DegradationKind::GaussianNoise { sigma } => {
            let s = sigma / 255.0;
            let mut out = image.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[ci, y, x]] += s * rng.gauss(ci as u64, (y * w + x) as u64);
                    }
                }
            }
            out
        }
        DegradationKind::PoissonGaussian { peak, sigma } => {
            let s = sigma / 255.0;
            let mut out = image.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = image[[ci, y, x]].max(0.0);
                        let px = (y * w + x) as u64;
                        let shot = (v / peak).sqrt() * rng.gauss(ci as u64, px);
                        let read = s * rng.gauss(3 + ci as u64, px);
                        out[[ci, y, x]] += shot + read;
                    }
                }
            }
            out
        }
        DegradationKind::MotionBlur { length, angle_deg } => {
            let kernel = motion_kernel(*length, *angle_deg);
            convolve_replicate(image, &kernel)
        }
        DegradationKind::Haze {
            transmission,
            airlight,
        } => image.mapv(|v| v * transmission + airlight * (1.0 - transmission)),
        DegradationKind::LowLight { gamma, brightness } => {
            image.mapv(|v| pmath::pow_p(v.max(0.0), *gamma) * brightness)
        }
        DegradationKind::Rain {
            density,
            intensity,
            length,
        } => {
            let mut out = image.clone();
            let n = (density * (h * w) as f64 / 1000.0).round() as u64;
            let angle = 70.0 * core::f64::consts::PI / 180.0;
            let (dx, dy) = (pmath::cos_p(angle), pmath::sin_p(angle));
            for s in 0..n {
                let x0 = rng.range(0, s, 0.0, w as f64);
                let y0 = rng.range(1, s, 0.0, h as f64);
                let gain = intensity * rng.range(2, s, 0.6, 1.4);
                for i in 0..*length {
                    let t = i as f64;
                    let fade = 1.0 - 0.5 * t / *length as f64;
                    splat_add(&mut out, x0 + dx * t, y0 + dy * t, gain * fade);
                }
            }
            out
        }
    };
    clamp01(&mut out);
    Ok(out)
}

/// Normalized linear blur kernel: `length` bilinear-splatted points along a
/// line through the kernel center at the given angle.
fn motion_kernel(length: usize, angle_deg: f64) -> ndarray::Array2<f64> {
    let side = length | 1; // odd side so the line is centered on a pixel
    let mut k = ndarray::Array2::<f64>::zeros((side, side));
    let angle = angle_deg * core::f64::consts::PI / 180.0;
    let (dx, dy) = (pmath::cos_p(angle), pmath::sin_p(angle));
    let center = (side / 2) as f64;
    for i in 0..length {
        let t = i as f64 - (length as f64 - 1.0) / 2.0;
        let (x, y) = (center + dx * t, center + dy * t);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as i64 + oy, x0 as i64 + ox);
                if yy >= 0 && yy < side as i64 && xx >= 0 && xx < side as i64 {
                    k[[yy as usize, xx as usize]] += wy * wx;
                }
            }
        }
    }
    let sum: f64 = k.iter().sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// Channelwise 2-D convolution with replicate (clamp-to-edge) padding.
fn convolve_replicate(image: &ImageF, kernel: &ndarray::Array2<f64>) -> ImageF {
    let (c, h, w) = image.dim();
    let (kh, kw) = kernel.dim();
    let (cy, cx) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let iy = (y as i64 + ky as i64 - cy).clamp(0, h as i64 - 1) as usize;
                    for kx in 0..kw {
                        let ix = (x as i64 + kx as i64 - cx).clamp(0, w as i64 - 1) as usize;
                        acc += image[[ci, iy, ix]] * kernel[[ky, kx]];
                    }
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

/// Bilinear additive splat of `v` at fractional position (x, y), all channels.
fn splat_add(img: &mut ImageF, x: f64, y: f64, v: f64) {
    let (c, h, w) = img.dim();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 as i64 + oy, x0 as i64 + ox);
            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                for ci in 0..c {
                    img[[ci, yy as usize, xx as usize]] += v * wy * wx;
                }
            }
        }
    }
}

/// Peak signal-to-noise ratio in dB on unit range, capped at 100.
pub fn psnr(a: &ImageF, b: &ImageF) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(VarError::shape(format!(
            "psnr: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok((10.0 * pmath::log10_p(1.0 / mse)).min(100.0))
}

const SSIM_WINDOW: usize = 11;

/// Mean structural similarity with an 11-tap Gaussian window (σ = 1.5),
/// valid-window positions only, averaged over channels.
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(VarError::shape(format!(
            "ssim: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(VarError::domain(format!(
            "ssim needs min side >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    for ci in 0..c {
        let ac = a.index_axis(ndarray::Axis(0), ci);
        let bc = b.index_axis(ndarray::Axis(0), ci);
        let mu_a = window_filter(&ac, &win);
        let mu_b = window_filter(&bc, &win);
        let aa = window_filter(&ac.mapv(|v| v * v).view(), &win);
        let bb = window_filter(&bc.mapv(|v| v * v).view(), &win);
        let ab = window_filter(&(&ac.to_owned() * &bc).view(), &win);
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..mu_a.nrows() {
            for x in 0..mu_a.ncols() {
                let (ma, mb) = (mu_a[[y, x]], mu_b[[y, x]]);
                let va = (aa[[y, x]] - ma * ma).max(0.0);
                let vb = (bb[[y, x]] - mb * mb).max(0.0);
                let cov = ab[[y, x]] - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                sum += s;
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5;
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *wi = pmath::exp_p(-d * d / (2.0 * sigma * sigma));
        sum += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= sum;
    }
    w
}

/// Separable valid-mode weighted filter.
fn window_filter(
    x: &ndarray::ArrayView2<f64>,
    win: &[f64; SSIM_WINDOW],
) -> ndarray::Array2<f64> {
    let (h, w) = x.dim();
    let hw = w - SSIM_WINDOW + 1;
    let mut horiz = ndarray::Array2::<f64>::zeros((h, hw));
    for y in 0..h {
        for ox in 0..hw {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += x[[y, ox + k]] * wk;
            }
            horiz[[y, ox]] = acc;
        }
    }
    let hh = h - SSIM_WINDOW + 1;
    let mut out = ndarray::Array2::<f64>::zeros((hh, hw));
    for oy in 0..hh {
        for x2 in 0..hw {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += horiz[[oy + k, x2]] * wk;
            }
            out[[oy, x2]] = acc;
        }
    }
    out
}

pub const CORPUS_SIZE: usize = 64;

/// One procedural 64×64 texture: linear gradients, two octaves of value
/// noise, and a handful of alpha-blended shapes. Pure function of
/// `(seed, index)`.
pub fn toy_image(seed: u64, index: u64) -> ImageF {
    let rng = CounterRng::new(seed.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15)));
    let n = CORPUS_SIZE;
    let mut img = Array3::<f64>::zeros((3, n, n));

    // linear gradient base per channel
    for c in 0..3u64 {
        let base = rng.range(c, 0, 0.15, 0.7);
        let gx = rng.range(c, 1, -0.3, 0.3);
        let gy = rng.range(c, 2, -0.3, 0.3);
        for y in 0..n {
            for x in 0..n {
                img[[c as usize, y, x]] =
                    base + gx * x as f64 / n as f64 + gy * y as f64 / n as f64;
            }
        }
    }

    // two octaves of bilinearly interpolated value noise, shared across
    // channels with per-channel gains
    let gains: Vec<f64> = (0..3).map(|c| rng.range(10 + c, 0, 0.5, 1.0)).collect();
    for (octave, (grid, amp)) in [(5usize, 0.12), (9, 0.06)].iter().enumerate() {
        let lane = 20 + octave as u64;
        for y in 0..n {
            for x in 0..n {
                let u = x as f64 / (n - 1) as f64 * (grid - 1) as f64;
                let v = y as f64 / (n - 1) as f64 * (grid - 1) as f64;
                let (u0, v0) = (u.floor() as usize, v.floor() as usize);
                let (u1, v1) = ((u0 + 1).min(grid - 1), (v0 + 1).min(grid - 1));
                let (fu, fv) = (u - u0 as f64, v - v0 as f64);
                let g = |gy: usize, gx: usize| -> f64 {
                    rng.range(lane, (gy * grid + gx) as u64, -1.0, 1.0)
                };
                let val = g(v0, u0) * (1.0 - fu) * (1.0 - fv)
                    + g(v0, u1) * fu * (1.0 - fv)
                    + g(v1, u0) * (1.0 - fu) * fv
                    + g(v1, u1) * fu * fv;
                for c in 0..3 {
                    img[[c, y, x]] += amp * gains[c] * val;
                }
            }
        }
    }

    // alpha-blended shapes: circles and axis-aligned rectangles
    let shapes = 3 + rng.below(30, 0, 4);
    for s in 0..shapes {
        let lane = 40 + s;
        let circle = rng.bits(lane, 0) & 1 == 0;
        let cx = rng.range(lane, 1, 8.0, (n - 8) as f64);
        let cy = rng.range(lane, 2, 8.0, (n - 8) as f64);
        let sx = rng.range(lane, 3, 4.0, 14.0);
        let sy = rng.range(lane, 4, 4.0, 14.0);
        let alpha = rng.range(lane, 5, 0.6, 1.0);
        let color: Vec<f64> = (0..3).map(|c| rng.range(lane, 6 + c, 0.05, 0.95)).collect();
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if circle {
                    dx * dx / (sx * sx) + dy * dy / (sy * sy) <= 1.0
                } else {
                    dx.abs() <= sx && dy.abs() <= sy
                };
                if inside {
                    for c in 0..3 {
                        let cur = img[[c, y, x]];
                        img[[c, y, x]] = cur * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    clamp01(&mut img);
    img
}

/// The full procedural corpus for a seed.
pub fn toy_corpus(seed: u64, count: usize) -> Vec<ImageF> {
    (0..count).map(|i| toy_image(seed, i as u64)).collect()
}

/// Save as an 8-bit RGB PNG.
pub fn save_png(path: &std::path::Path, img: &ImageF) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "save_png expects RGB");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(img[[0, y, x]]),
                quantize(img[[1, y, x]]),
                quantize(img[[2, y, x]]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| VarError::data(format!("writing {}: {e}", path.display())))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load an 8-bit RGB PNG into unit range.
pub fn load_png(path: &std::path::Path) -> Result<ImageF> {
    let img = image::open(path)
        .map_err(|e| VarError::data(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> ImageF {
        Array3::from_elem((3, CORPUS_SIZE, CORPUS_SIZE), v)
    }

    #[test]
    fn identity_is_exact() {
        let img = toy_image(1, 0);
        let spec = DegradationSpec::new(DegradationKind::Identity, 99);
        assert_eq!(apply(&spec, &img).unwrap(), img);
    }

    #[test]
    fn haze_with_full_transmission_is_exact() {
        let img = toy_image(1, 1);
        let spec = DegradationSpec::new(
            DegradationKind::Haze {
                transmission: 1.0,
                airlight: 0.9,
            },
            0,
        );
        assert_eq!(apply(&spec, &img).unwrap(), img);
    }

    #[test]
    fn gaussian_noise_variance_matches_sigma() {
        let img = flat(0.5);
        let spec = DegradationSpec::new(DegradationKind::GaussianNoise { sigma: 25.0 }, 7);
        let out = apply(&spec, &img).unwrap();
        let diffs: Vec<f64> = out
            .iter()
            .zip(img.iter())
            .map(|(&o, &i)| o - i)
            .collect();
        assert!(diffs.len() >= 10_000);
        let mean: f64 = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var: f64 =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let target = (25.0f64 / 255.0).powi(2);
        assert!(
            (var - target).abs() / target < 0.10,
            "var {var} vs target {target}"
        );
    }

    #[test]
    fn degradations_are_bit_deterministic() {
        let img = toy_image(3, 5);
        for kind in [
            DegradationKind::GaussianNoise { sigma: 25.0 },
            DegradationKind::PoissonGaussian {
                peak: 100.0,
                sigma: 10.0,
            },
            DegradationKind::MotionBlur {
                length: 7,
                angle_deg: 35.0,
            },
            DegradationKind::Haze {
                transmission: 0.6,
                airlight: 0.9,
            },
            DegradationKind::LowLight {
                gamma: 2.0,
                brightness: 0.6,
            },
            DegradationKind::Rain {
                density: 3.0,
                intensity: 0.35,
                length: 9,
            },
        ] {
            let spec = DegradationSpec::new(kind, 1234);
            let a = apply(&spec, &img).unwrap();
            let b = apply(&spec, &img).unwrap();
            assert_eq!(a, b, "{}", spec.family());
            assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn invalid_parameters_name_the_constraint() {
        let bad = [
            DegradationKind::GaussianNoise { sigma: 0.0 },
            DegradationKind::MotionBlur {
                length: 0,
                angle_deg: 0.0,
            },
            DegradationKind::Haze {
                transmission: 0.0,
                airlight: 0.9,
            },
            DegradationKind::LowLight {
                gamma: 0.5,
                brightness: 0.5,
            },
            DegradationKind::Rain {
                density: -1.0,
                intensity: 0.3,
                length: 9,
            },
        ];
        for kind in bad {
            let spec = DegradationSpec::new(kind, 0);
            let err = apply(&spec, &flat(0.5)).unwrap_err();
            assert!(matches!(err, VarError::Domain(_)), "{err}");
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = flat(0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = flat(0.4); // MSE 0.01
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = flat(0.31); // MSE 1e-4
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        let wrong = Array3::<f64>::zeros((3, 8, 8));
        assert!(matches!(psnr(&a, &wrong), Err(VarError::Shape(_))));
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let img = toy_image(4, 2);
        let mut last = f64::INFINITY;
        for sigma in [5.0, 15.0, 25.0, 50.0] {
            let spec = DegradationSpec::new(DegradationKind::GaussianNoise { sigma }, 5);
            let out = apply(&spec, &img).unwrap();
            let p = psnr(&img, &out).unwrap();
            assert!(p < last, "sigma {sigma}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_noise() {
        let a = toy_image(6, 0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let spec = DegradationSpec::new(DegradationKind::GaussianNoise { sigma: 30.0 }, 8);
        let b = apply(&spec, &a).unwrap();
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 < 1.0 && s1 > -1.0);
        // constant vs heavy noise: structure entirely absent
        let flat_img = flat(0.5);
        let heavy = apply(
            &DegradationSpec::new(DegradationKind::GaussianNoise { sigma: 80.0 }, 9),
            &flat_img,
        )
        .unwrap();
        assert!(ssim(&flat_img, &heavy).unwrap() < 0.5);
        // window domain guard
        let tiny = Array3::<f64>::zeros((3, 8, 8));
        assert!(matches!(ssim(&tiny, &tiny), Err(VarError::Domain(_))));
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let a = toy_corpus(42, 5);
        let b = toy_corpus(42, 5);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        let c = toy_corpus(43, 5);
        assert_ne!(a[0], c[0]);
        for img in &a {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // non-degenerate: some spatial variation
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let var = img.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                / img.len() as f64;
            assert!(var > 1e-4, "flat corpus image, var {var}");
        }
    }

    #[test]
    fn png_roundtrip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = toy_image(7, 3);
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        // second write/read of the quantized image is lossless
        save_png(&path, &back).unwrap();
        let again = load_png(&path).unwrap();
        assert_eq!(back, again);
        // and quantization error alone stays below half a step per channel
        let max_err = img
            .iter()
            .zip(back.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "max err {max_err}");
    }
}
