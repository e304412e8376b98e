//! Image metrics for unposed view synthesis.
//!
//! Besides plain PSNR/SSIM this module computes *aligned* variants: a single
//! affine image warp is fitted to minimize the pixel L2 error between a
//! prediction and its ground truth, and the metrics are evaluated on the
//! warped prediction. Aligned scores are never below the unaligned ones
//! because the identity warp is always a candidate.

use std::io::{Read, Write};

use image::Rgb32FImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

fn check_shapes(x: &Rgb32FImage, y: &Rgb32FImage) -> Result<()> {
    if x.dimensions() != y.dimensions() {
        return Err(Error::Shape(format!(
            "image sizes differ: {:?} vs {:?}",
            x.dimensions(),
            y.dimensions()
        )));
    }
    Ok(())
}

pub fn mse(x: &Rgb32FImage, y: &Rgb32FImage) -> Result<f64> {
    check_shapes(x, y)?;
    let n = x.as_raw().len();
    let sum: f64 = x
        .as_raw()
        .iter()
        .zip(y.as_raw())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(x: &Rgb32FImage, y: &Rgb32FImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn grayscale(img: &Rgb32FImage) -> Vec<f64> {
    img.pixels()
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect()
}

/// Separable Gaussian filter, "valid" region only.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let kw = k.len();
    let ow = w + 1 - kw;
    let oh = h + 1 - kw;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..kw).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..kw).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity on the channel-mean grayscale image, 11×11
/// Gaussian window (σ = 1.5), valid windows only.
pub fn ssim(x: &Rgb32FImage, y: &Rgb32FImage) -> Result<f64> {
    check_shapes(x, y)?;
    let (w, h) = (x.width() as usize, x.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (gx, gy) = (grayscale(x), grayscale(y));
    let k = gaussian_kernel();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, ow, oh) = filter_valid(&gx, w, h, &k);
    let (my, _, _) = filter_valid(&gy, w, h, &k);
    let (sxx, _, _) = filter_valid(&prod(&gx, &gx), w, h, &k);
    let (syy, _, _) = filter_valid(&prod(&gy, &gy), w, h, &k);
    let (sxy, _, _) = filter_valid(&prod(&gx, &gy), w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..ow * oh)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (ow * oh) as f64)
}

/// Affine warp on normalized image coordinates: output pixel at normalized
/// position `u` reads the source at `A·u + b`. Normalized coordinates put the
/// image center at 0 and the borders at ±1 on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineWarp {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Default for AffineWarp {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineWarp {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [0.0, 0.0],
        }
    }

    pub fn translation_px(dx: f64, dy: f64, width: u32, height: u32) -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [dx / (width as f64 / 2.0), dy / (height as f64 / 2.0)],
        }
    }

    fn params(&self) -> [f64; 6] {
        [
            self.a[0][0],
            self.a[0][1],
            self.a[1][0],
            self.a[1][1],
            self.b[0],
            self.b[1],
        ]
    }

    fn from_params(p: &[f64; 6]) -> Self {
        Self {
            a: [[p[0], p[1]], [p[2], p[3]]],
            b: [p[4], p[5]],
        }
    }

    /// Offset expressed in pixels.
    pub fn offset_px(&self, width: u32, height: u32) -> [f64; 2] {
        [self.b[0] * width as f64 / 2.0, self.b[1] * height as f64 / 2.0]
    }

    /// Distance from the identity, `‖A − I‖_F + ‖b‖`.
    pub fn deviation(&self) -> f64 {
        let p = self.params();
        let da = ((p[0] - 1.0).powi(2) + p[1].powi(2) + p[2].powi(2) + (p[3] - 1.0).powi(2)).sqrt();
        da + (p[4] * p[4] + p[5] * p[5]).sqrt()
    }

    pub fn apply(&self, img: &Rgb32FImage) -> Rgb32FImage {
        warp_image(img, self, None).0
    }
}

struct Sampler<'a> {
    img: &'a Rgb32FImage,
    w: i64,
    h: i64,
}

impl Sampler<'_> {
    /// Channel value with white outside the image.
    fn at(&self, x: i64, y: i64, c: usize) -> f64 {
        if x < 0 || y < 0 || x >= self.w || y >= self.h {
            1.0
        } else {
            self.img.get_pixel(x as u32, y as u32)[c] as f64
        }
    }

    /// Bilinear sample and its derivative with respect to `(px, py)`.
    fn sample(&self, px: f64, py: f64, c: usize) -> (f64, f64, f64) {
        let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        let (px, py) = (snap(px), snap(py));
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v00 = self.at(x0, y0, c);
        let v10 = self.at(x0 + 1, y0, c);
        let v01 = self.at(x0, y0 + 1, c);
        let v11 = self.at(x0 + 1, y0 + 1, c);
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        let val = top + (bottom - top) * fy;
        let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let dy = bottom - top;
        (val, dx, dy)
    }
}

/// Warps `img`; when `target` is given also returns the mean squared error
/// against it and its gradient with respect to the six warp parameters.
fn warp_image(img: &Rgb32FImage, warp: &AffineWarp, target: Option<&Rgb32FImage>) -> (Rgb32FImage, f64, [f64; 6]) {
    let (w, h) = img.dimensions();
    let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
    let s = Sampler {
        img,
        w: w as i64,
        h: h as i64,
    };
    let p = warp.params();
    let mut out = Rgb32FImage::new(w, h);
    let mut loss = 0.0;
    let mut grad = [0.0; 6];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5 - hw) / hw;
            let v = (y as f64 + 0.5 - hh) / hh;
            let su = p[0] * u + p[1] * v + p[4];
            let sv = p[2] * u + p[3] * v + p[5];
            let px = su * hw + hw - 0.5;
            let py = sv * hh + hh - 0.5;
            for c in 0..3 {
                let (val, dx, dy) = s.sample(px, py, c);
                out.get_pixel_mut(x, y)[c] = val as f32;
                if let Some(t) = target {
                    let r = val - t.get_pixel(x, y)[c] as f64;
                    loss += r * r;
                    let gu = 2.0 * r * dx * hw;
                    let gv = 2.0 * r * dy * hh;
                    grad[0] += gu * u;
                    grad[1] += gu * v;
                    grad[4] += gu;
                    grad[2] += gv * u;
                    grad[3] += gv * v;
                    grad[5] += gv;
                }
            }
        }
    }
    let n = (w * h * 3) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (out, loss / n, grad)
}

/// Mean squared error of the warped prediction against `gt`.
pub fn warp_loss(pred: &Rgb32FImage, gt: &Rgb32FImage, warp: &AffineWarp) -> f64 {
    warp_image(pred, warp, Some(gt)).1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpFitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Scale of the random perturbation of the linear part for restarts.
    pub jitter_linear: f64,
    /// Scale of the random perturbation of the offset for restarts.
    pub jitter_offset: f64,
    pub seed: u64,
}

impl Default for WarpFitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 1e-2,
            restarts: 5,
            jitter_linear: 0.03,
            jitter_offset: 0.08,
            seed: 0,
        }
    }
}

/// Fits the L2-optimal affine warp from `pred` to `gt` by Adam with a
/// cosine-decayed step size from several starts. The returned warp never has
/// a higher loss than the identity.
pub fn fit_affine_warp(pred: &Rgb32FImage, gt: &Rgb32FImage) -> Result<AffineWarp> {
    fit_affine_warp_with(pred, gt, &WarpFitConfig::default())
}

pub fn fit_affine_warp_with(pred: &Rgb32FImage, gt: &Rgb32FImage, cfg: &WarpFitConfig) -> Result<AffineWarp> {
    check_shapes(pred, gt)?;
    let identity = AffineWarp::identity();
    let mut best = (warp_loss(pred, gt, &identity), identity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for start in 0..cfg.restarts {
        let mut p = identity.params();
        if start > 0 {
            for (i, v) in p.iter_mut().enumerate() {
                let scale = if i < 4 { cfg.jitter_linear } else { cfg.jitter_offset };
                *v += rng.random_range(-scale..=scale);
            }
        }
        let (mut m, mut s) = ([0.0f64; 6], [0.0f64; 6]);
        let (b1, b2, eps) = (0.9, 0.999, 1e-12);
        for it in 0..cfg.iterations {
            let lr = cfg.step_size * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos());
            let warp = AffineWarp::from_params(&p);
            let (_, loss, g) = warp_image(pred, &warp, Some(gt));
            if loss < best.0 {
                best = (loss, warp);
            }
            for i in 0..6 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                s[i] = b2 * s[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(it as i32 + 1));
                let sh = s[i] / (1.0 - b2.powi(it as i32 + 1));
                p[i] -= lr * mh / (sh.sqrt() + eps);
            }
        }
        let warp = AffineWarp::from_params(&p);
        let loss = warp_loss(pred, gt, &warp);
        if loss < best.0 {
            best = (loss, warp);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_a: f64,
    pub ssim_a: f64,
    pub warp: AffineWarp,
}

/// Unaligned and aligned PSNR/SSIM. One warp is fitted by L2 and shared by
/// both aligned metrics; the identity warp remains a candidate, so SSIM-A is
/// the better of the fitted and identity alignments.
pub fn aligned_metrics(pred: &Rgb32FImage, gt: &Rgb32FImage) -> Result<MetricReport> {
    aligned_metrics_with(pred, gt, &WarpFitConfig::default())
}

pub fn aligned_metrics_with(pred: &Rgb32FImage, gt: &Rgb32FImage, cfg: &WarpFitConfig) -> Result<MetricReport> {
    let psnr_plain = psnr(pred, gt)?;
    let ssim_plain = ssim(pred, gt)?;
    let warp = fit_affine_warp_with(pred, gt, cfg)?;
    let warped = warp.apply(pred);
    let psnr_a = psnr(&warped, gt)?.max(psnr_plain);
    let ssim_a = ssim(&warped, gt)?.max(ssim_plain);
    Ok(MetricReport {
        psnr: psnr_plain,
        ssim: ssim_plain,
        psnr_a,
        ssim_a,
        warp,
    })
}

/// One CSV row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub instance: String,
    pub views: usize,
    pub view_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_a: f64,
    pub ssim_a: f64,
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub b1: f64,
    pub b2: f64,
}

/// Instance name used by summary rows.
pub const SUMMARY_INSTANCE: &str = "MEAN";

impl MetricRow {
    pub fn new(category: &str, instance: &str, views: usize, view_id: &str, r: &MetricReport) -> Self {
        Self {
            category: category.to_string(),
            instance: instance.to_string(),
            views,
            view_id: view_id.to_string(),
            psnr: r.psnr,
            ssim: r.ssim,
            psnr_a: r.psnr_a,
            ssim_a: r.ssim_a,
            a11: r.warp.a[0][0],
            a12: r.warp.a[0][1],
            a21: r.warp.a[1][0],
            a22: r.warp.a[1][1],
            b1: r.warp.b[0],
            b2: r.warp.b[1],
        }
    }

    pub fn is_summary(&self) -> bool {
        self.instance == SUMMARY_INSTANCE
    }
}

/// Per-(category, #views) means, emitted as summary rows.
pub fn summary_rows(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut groups: std::collections::BTreeMap<(String, usize), Vec<&MetricRow>> = Default::default();
    for r in rows.iter().filter(|r| !r.is_summary()) {
        groups.entry((r.category.clone(), r.views)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((category, views), g)| {
            let n = g.len() as f64;
            let mean = |f: fn(&MetricRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            MetricRow {
                category,
                instance: SUMMARY_INSTANCE.to_string(),
                views,
                view_id: "-".to_string(),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
                psnr_a: mean(|r| r.psnr_a),
                ssim_a: mean(|r| r.ssim_a),
                a11: mean(|r| r.a11),
                a12: mean(|r| r.a12),
                a21: mean(|r| r.a21),
                a22: mean(|r| r.a22),
                b1: mean(|r| r.b1),
                b2: mean(|r| r.b2),
            }
        })
        .collect()
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn smooth_image(w: u32, h: u32) -> Rgb32FImage {
        Rgb32FImage::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f32, y as f32);
            let blob = |cx: f32, cy: f32, s: f32| (-((fx - cx).powi(2) + (fy - cy).powi(2)) / (2.0 * s * s)).exp();
            let a = blob(20.0, 24.0, 7.0);
            let b = blob(42.0, 36.0, 9.0);
            Rgb([1.0 - 0.8 * a, 1.0 - 0.6 * b, 1.0 - 0.5 * a - 0.4 * b])
        })
    }

    fn noise_image(w: u32, h: u32, seed: u64) -> Rgb32FImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Rgb32FImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn psnr_examples() {
        let x = noise_image(16, 16, 1);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let y = Rgb32FImage::new(8, 16);
        assert!(matches!(psnr(&x, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_examples() {
        let x = noise_image(32, 32, 2);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bin = Rgb32FImage::from_fn(32, 32, |_, _| {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            Rgb([v, v, v])
        });
        let inv = Rgb32FImage::from_fn(32, 32, |x, y| {
            let p = bin.get_pixel(x, y);
            Rgb([1.0 - p[0], 1.0 - p[1], 1.0 - p[2]])
        });
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        let flat = Rgb32FImage::from_pixel(32, 32, Rgb([0.5, 0.5, 0.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = Rgb32FImage::from_fn(32, 32, |_, _| {
            let v = 0.5 + rng.random_range(-1e-3..1e-3f32);
            Rgb([v, v, v])
        });
        assert!(ssim(&flat, &noisy).unwrap() > 0.99);
        assert!(matches!(
            ssim(&Rgb32FImage::new(8, 8), &Rgb32FImage::new(8, 8)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identity_warp_is_exact() {
        for (w, h) in [(64, 64), (48, 30), (17, 23)] {
            let x = noise_image(w, h, 5);
            assert_eq!(AffineWarp::identity().apply(&x), x);
        }
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let pred = smooth_image(64, 64);
        let gt = AffineWarp::translation_px(2.0, -1.0, 64, 64).apply(&pred);
        let warp = AffineWarp {
            a: [[1.02, 0.01], [-0.02, 0.97]],
            b: [0.01, -0.02],
        };
        let (_, _, g) = warp_image(&pred, &warp, Some(&gt));
        let p = warp.params();
        for i in 0..6 {
            let h = 1e-6;
            let (mut pp, mut pm) = (p, p);
            pp[i] += h;
            pm[i] -= h;
            let fd = (warp_loss(&pred, &gt, &AffineWarp::from_params(&pp))
                - warp_loss(&pred, &gt, &AffineWarp::from_params(&pm)))
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-6),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn fit_on_equal_images_stays_at_identity() {
        let x = smooth_image(64, 64);
        let warp = fit_affine_warp(&x, &x).unwrap();
        assert_eq!(warp_loss(&x, &x, &warp), 0.0);
        assert!(warp.deviation() < 1e-2);
    }

    #[test]
    fn recovers_scale_about_center() {
        let pred = smooth_image(64, 64);
        let truth = AffineWarp {
            a: [[1.0 / 1.1, 0.0], [0.0, 1.0 / 1.1]],
            b: [0.0, 0.0],
        };
        let gt = truth.apply(&pred);
        let fit = fit_affine_warp(&pred, &gt).unwrap();
        assert!((fit.a[0][0] - truth.a[0][0]).abs() < 0.02, "{fit:?}");
        assert!((fit.a[1][1] - truth.a[1][1]).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn csv_round_trip_with_summary() {
        let r = MetricReport {
            psnr: 20.0,
            ssim: 0.8,
            psnr_a: 21.0,
            ssim_a: 0.85,
            warp: AffineWarp::identity(),
        };
        let mut rows = vec![
            MetricRow::new("sphere", "scene_1", 1, "6", &r),
            MetricRow::new("sphere", "scene_3", 1, "6", &MetricReport { psnr_a: 23.0, ..r }),
        ];
        rows.extend(summary_rows(&rows));
        assert_eq!(rows.len(), 3);
        assert!((rows[2].psnr_a - 22.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("category,instance,views,view_id,psnr,ssim,psnr_a,ssim_a,a11,a12,a21,a22,b1,b2"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
    }
}
