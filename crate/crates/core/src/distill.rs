//! Instance-specific neural field distilled from the conditional denoiser.
//!
//! The field is a multiresolution hash grid with small MLP heads for
//! density and color, rendered by stratified volume quadrature inside the
//! cube `[-1, 1]³`. Each optimization step renders a random query view,
//! noises it, runs multi-step DDIM to a clean estimate (held constant), and
//! regresses the render onto that estimate. The input views themselves
//! never enter the loss.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder};
use image::{GrayImage, Luma, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    condition_from_srt, ddim_denoise, q_sample, seeded_noise, CondMode, EpsilonModel, LatentCodec, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::geometry::{camera_rays, CameraPose, Intrinsics, Ray, Vec3};
use crate::imaging::rows_to_image;
use crate::nn::{self, ParamStore};
use crate::srt::{SetLatent, SrtModel};

/// Half side of the scene bound.
pub const BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features: usize,
    pub log2_table: u32,
    pub base_resolution: usize,
    pub scale: f64,
    pub mlp_width: usize,
    /// Density offset `a·exp(−‖x‖²/2r²)` that seeds a blob at the origin.
    pub blob_density: f64,
    pub blob_radius: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 12,
            features: 2,
            log2_table: 17,
            base_resolution: 16,
            scale: 1.5,
            mlp_width: 64,
            blob_density: 5.0,
            blob_radius: 0.3,
        }
    }
}

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];
const GEO_FEATURES: usize = 15;

/// Anything that maps points to density and color.
pub trait Field {
    /// Returns `(σ (N), rgb (N, 3))` for points in the bound.
    fn query(&self, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)>;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
}

pub struct NeuralField {
    cfg: HashGridConfig,
    table: Tensor,
    level_sizes: Vec<usize>,
    level_offsets: Vec<usize>,
    level_res: Vec<usize>,
    density1: Linear,
    density2: Linear,
    color1: Linear,
    color2: Linear,
    dtype: DType,
    device: Device,
}

impl NeuralField {
    pub fn new(cfg: &HashGridConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.levels == 0 || cfg.features == 0 || cfg.base_resolution == 0 || cfg.scale < 1.0 {
            return Err(Error::bad_config(
                "distill.grid",
                "levels, features and base resolution must be positive, scale ≥ 1",
            ));
        }
        let cap = 1usize << cfg.log2_table;
        let mut level_sizes = Vec::new();
        let mut level_offsets = Vec::new();
        let mut level_res = Vec::new();
        let mut total = 0;
        for l in 0..cfg.levels {
            let res = (cfg.base_resolution as f64 * cfg.scale.powi(l as i32)).floor() as usize;
            let size = (res + 1).pow(3).min(cap);
            level_res.push(res);
            level_sizes.push(size);
            level_offsets.push(total);
            total += size;
        }
        let table = vb.get_with_hints(
            (total, cfg.features),
            "hash.table",
            candle_nn::Init::Uniform { lo: -1e-4, up: 1e-4 },
        )?;
        let w = cfg.mlp_width;
        let input = cfg.levels * cfg.features;
        Ok(Self {
            table,
            level_sizes,
            level_offsets,
            level_res,
            density1: nn::linear(input, w, vb.pp("density.0"))?,
            density2: nn::linear(w, 1 + GEO_FEATURES, vb.pp("density.1"))?,
            color1: nn::linear(GEO_FEATURES, w, vb.pp("color.0"))?,
            color2: nn::linear(w, 3, vb.pp("color.1"))?,
            dtype: vb.dtype(),
            device: vb.device().clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.cfg
    }

    pub fn is_dense(&self, level: usize) -> bool {
        (self.level_res[level] + 1).pow(3) <= 1usize << self.cfg.log2_table
    }

    fn corner_index(&self, level: usize, c: [usize; 3]) -> usize {
        let res = self.level_res[level] + 1;
        let local = if self.is_dense(level) {
            c[0] + c[1] * res + c[2] * res * res
        } else {
            let h = (c[0] as u64 * PRIMES[0]) ^ (c[1] as u64 * PRIMES[1]) ^ (c[2] as u64 * PRIMES[2]);
            (h % self.level_sizes[level] as u64) as usize
        };
        self.level_offsets[level] + local
    }

    /// Table rows and trilinear weights, `(N·L·8)` each.
    fn corners(&self, points: &[[f64; 3]]) -> (Vec<u32>, Vec<f64>) {
        let n = points.len() * self.cfg.levels * 8;
        let mut idx = Vec::with_capacity(n);
        let mut wts = Vec::with_capacity(n);
        for p in points {
            for l in 0..self.cfg.levels {
                let res = self.level_res[l];
                let mut base = [0usize; 3];
                let mut frac = [0f64; 3];
                for a in 0..3 {
                    let x = ((p[a].clamp(-BOUND, BOUND) + BOUND) / (2.0 * BOUND)) * res as f64;
                    let i = (x.floor() as usize).min(res - 1);
                    base[a] = i;
                    frac[a] = x - i as f64;
                }
                for k in 0..8 {
                    let mut c = base;
                    let mut w = 1.0;
                    for a in 0..3 {
                        if k >> a & 1 == 1 {
                            c[a] += 1;
                            w *= frac[a];
                        } else {
                            w *= 1.0 - frac[a];
                        }
                    }
                    idx.push(self.corner_index(l, c) as u32);
                    wts.push(w);
                }
            }
        }
        (idx, wts)
    }

    /// Interpolated grid features, `(N, L·F)`.
    pub fn encode(&self, points: &[[f64; 3]]) -> Result<Tensor> {
        let (idx, wts) = self.corners(points);
        let (n, l, f) = (points.len(), self.cfg.levels, self.cfg.features);
        let idx = Tensor::from_vec(idx, n * l * 8, &self.device)?;
        let wts = Tensor::from_vec(wts, (n, l, 8, 1), &self.device)?.to_dtype(self.dtype)?;
        let gathered = self.table.index_select(&idx, 0)?.reshape((n, l, 8, f))?;
        Ok(gathered.broadcast_mul(&wts)?.sum(2)?.reshape((n, l * f))?)
    }

    fn blob(&self, points: &[[f64; 3]]) -> Result<Tensor> {
        let r2 = 2.0 * self.cfg.blob_radius * self.cfg.blob_radius;
        let v: Vec<f64> = points
            .iter()
            .map(|p| self.cfg.blob_density * (-(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / r2).exp())
            .collect();
        Ok(Tensor::from_vec(v, points.len(), &self.device)?.to_dtype(self.dtype)?)
    }
}

/// `ln(1 + eˣ)`, computed stably from differentiable primitives.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg_abs = x.abs()?.neg()?;
    Ok((pos + (neg_abs.exp()? + 1.0)?.log()?)?)
}

impl Field for NeuralField {
    fn query(&self, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)> {
        let h = self.encode(points)?;
        let h = self.density2.forward(&self.density1.forward(&h)?.silu()?)?;
        let raw = h.narrow(1, 0, 1)?.squeeze(1)?;
        let sigma = softplus(&(raw + self.blob(points)?)?)?;
        let geo = h.narrow(1, 1, GEO_FEATURES)?;
        let rgb = candle_nn::ops::sigmoid(&self.color2.forward(&self.color1.forward(&geo)?.silu()?)?)?;
        Ok((sigma, rgb))
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `(R, 3)` composited over white.
    pub rgb: Tensor,
    /// `(R)` accumulated alpha, `Σ Tᵢαᵢ`.
    pub opacity: Tensor,
    /// `(R)` expected termination distance (unnormalized by opacity).
    pub depth: Tensor,
    /// `(R)` transmittance past the last sample.
    pub background: Tensor,
    pub width: usize,
    pub height: usize,
}

impl RenderOutput {
    pub fn image(&self) -> Result<Rgb32FImage> {
        rows_to_image(&self.rgb, self.width, self.height)
    }

    pub fn opacity_image(&self) -> Result<GrayImage> {
        let o: Vec<f32> = self.opacity.to_dtype(DType::F32)?.to_vec1()?;
        Ok(GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = o[y as usize * self.width + x as usize];
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        }))
    }

    /// `(1, 3, H, W)` layout.
    pub fn chw(&self) -> Result<Tensor> {
        Ok(self.rgb.t()?.reshape((1, 3, self.height, self.width))?)
    }
}

/// Entry/exit distances of a ray through the bound, if it hits.
pub fn ray_box(ray: &Ray) -> Option<(f64, f64)> {
    let mut near = 0.0f64;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-12 {
            if o.abs() > BOUND {
                return None;
            }
            continue;
        }
        let t0 = (-BOUND - o) / d;
        let t1 = (BOUND - o) / d;
        near = near.max(t0.min(t1));
        far = far.min(t0.max(t1));
    }
    (far > near).then_some((near, far))
}

/// Stratified quadrature along the rays of `pose`. With `jitter` each
/// sample is drawn uniformly inside its interval, otherwise at the middle.
pub fn volume_render<F: Field + ?Sized>(
    field: &F,
    pose: &CameraPose,
    samples: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<RenderOutput> {
    let grid = camera_rays(pose);
    let out = render_rays(field, &grid.rays, samples, jitter)?;
    Ok(RenderOutput {
        width: grid.width,
        height: grid.height,
        ..out
    })
}

/// Renders an arbitrary ray list; `width`/`height` of the result are
/// `(len, 1)`.
pub fn render_rays<F: Field + ?Sized>(
    field: &F,
    rays: &[Ray],
    samples: usize,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<RenderOutput> {
    if samples == 0 {
        return Err(Error::bad_config("distill.samples_per_ray", "must be positive"));
    }
    let r = rays.len();
    let mut points = Vec::with_capacity(r * samples);
    let mut deltas = Vec::with_capacity(r * samples);
    let mut dists = Vec::with_capacity(r * samples);
    for ray in rays {
        match ray_box(ray) {
            Some((near, far)) => {
                let delta = (far - near) / samples as f64;
                for i in 0..samples {
                    let u = match jitter.as_deref_mut() {
                        Some(rng) => rng.random::<f64>(),
                        None => 0.5,
                    };
                    let t = near + (i as f64 + u) * delta;
                    let p = ray.at(t);
                    points.push([p.x, p.y, p.z]);
                    deltas.push(delta);
                    dists.push(t);
                }
            }
            None => {
                for _ in 0..samples {
                    points.push([0.0; 3]);
                    deltas.push(0.0);
                    dists.push(0.0);
                }
            }
        }
    }
    let dev = field.device().clone();
    let dt = field.dtype();
    let (sigma, color) = field.query(&points)?;
    let sigma = sigma.reshape((r, samples))?;
    let color = color.reshape((r, samples, 3))?;
    let delta = Tensor::from_vec(deltas, (r, samples), &dev)?.to_dtype(dt)?;
    let dist = Tensor::from_vec(dists, (r, samples), &dev)?.to_dtype(dt)?;

    let tau = (sigma * delta)?;
    let alpha = (1.0 - tau.neg()?.exp()?)?;
    let cum = tau.cumsum(1)?;
    let trans = (&cum - &tau)?.neg()?.exp()?;
    let weights = (trans * alpha)?;
    let opacity = weights.sum(1)?;
    let background = cum.narrow(1, samples - 1, 1)?.squeeze(1)?.neg()?.exp()?;
    let rgb = weights
        .unsqueeze(2)?
        .broadcast_mul(&color)?
        .sum(1)?
        .broadcast_add(&background.unsqueeze(1)?)?;
    let depth = (&weights * dist)?.sum(1)?;
    Ok(RenderOutput {
        rgb,
        opacity,
        depth,
        background,
        width: r,
        height: 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub ddim_steps: usize,
    pub guidance_weight: f64,
    pub views_per_iter: usize,
    pub samples_per_ray: usize,
    /// Render side length; renders are upsampled to the denoiser resolution.
    pub render_size: usize,
    pub lr: f64,
    pub lambda_binarize: f64,
    pub lambda_sparsity: f64,
    pub turntable_frames: usize,
    pub seed: u64,
    pub grid: HashGridConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            warmup_iters: 300,
            ddim_steps: 30,
            guidance_weight: 9.0,
            views_per_iter: 1,
            samples_per_ray: 48,
            render_size: 32,
            lr: 1e-2,
            lambda_binarize: 1e-3,
            lambda_sparsity: 1e-3,
            turntable_frames: 8,
            seed: 0,
            grid: HashGridConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.total_iters {
            return Err(Error::bad_config("distill.warmup_iters", "must be below total_iters"));
        }
        if self.ddim_steps == 0 || self.views_per_iter == 0 || self.render_size == 0 {
            return Err(Error::bad_config(
                "distill",
                "ddim_steps, views_per_iter and render_size must be positive",
            ));
        }
        Ok(())
    }
}

pub const HIGH_NOISE_BAND: (f64, f64) = (0.70, 0.98);
pub const FINAL_BAND: (f64, f64) = (0.02, 0.30);

/// Noise band `(t_min, t_max)` as fractions of the schedule length: a
/// high-noise phase during warmup, then a linear decay to the final band at
/// the last iteration.
pub fn anneal_t_range(iter: usize, cfg: &DistillConfig) -> (f64, f64) {
    if iter < cfg.warmup_iters {
        return HIGH_NOISE_BAND;
    }
    let span = (cfg.total_iters - 1).saturating_sub(cfg.warmup_iters).max(1) as f64;
    let f = ((iter - cfg.warmup_iters) as f64 / span).min(1.0);
    let lerp = |a: f64, b: f64| a + (b - a) * f;
    (
        lerp(HIGH_NOISE_BAND.0, FINAL_BAND.0),
        lerp(HIGH_NOISE_BAND.1, FINAL_BAND.1),
    )
}

/// Random query camera: azimuth in `[0, 2π)`, elevation in `[−15°, 45°]`,
/// radius log-uniform in `[0.8, 1.5]`, looking at the origin. The anchored
/// frame's up direction is −Y.
pub fn sample_query_pose(rng: &mut impl Rng, intrinsics: Intrinsics, width: u32, height: u32) -> Result<CameraPose> {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-15.0f64..=45.0).to_radians();
    let r = (rng.random_range(0.8f64.ln()..=1.5f64.ln())).exp();
    orbit_pose(az, el, r, intrinsics, width, height)
}

/// Camera on a sphere around the origin; azimuth 0 is the anchor side (−Z).
pub fn orbit_pose(az: f64, el: f64, r: f64, intrinsics: Intrinsics, width: u32, height: u32) -> Result<CameraPose> {
    let eye = Vec3::new(r * el.cos() * az.sin(), -r * el.sin(), -r * el.cos() * az.cos());
    CameraPose::look_at(eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), intrinsics, width, height)
}

/// Names of every loss term that contributed to an update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub terms: BTreeSet<String>,
    pub steps: usize,
}

pub const TERM_DENOISE: &str = "denoised_target";
pub const TERM_BINARIZE: &str = "opacity_binarization";
pub const TERM_SPARSITY: &str = "opacity_sparsity";

impl AuditLog {
    /// True if only denoiser-derived targets and opacity regularizers were
    /// ever optimized.
    pub fn uses_no_input_view_loss(&self) -> bool {
        self.terms
            .iter()
            .all(|t| [TERM_DENOISE, TERM_BINARIZE, TERM_SPARSITY].contains(&t.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: usize,
    pub t: usize,
    pub loss: f64,
    pub data: f64,
}

/// Mean binary entropy of clamped opacities.
pub fn binarization_loss(opacity: &Tensor) -> Result<Tensor> {
    let o = opacity.clamp(1e-5, 1.0 - 1e-5)?;
    let one_minus = (1.0 - &o)?;
    let h = ((&o * o.log()?)? + (&one_minus * one_minus.log()?)?)?.neg()?;
    Ok(h.mean_all()?)
}

/// Regression of a render onto a detached target plus opacity
/// regularizers. Returns `(total, data term)`.
pub fn distill_objective(render: &RenderOutput, target: &Tensor, cfg: &DistillConfig) -> Result<(Tensor, Tensor)> {
    let data = nn::mse(&render.chw()?, &target.detach())?;
    let total = ((&data + (binarization_loss(&render.opacity)? * cfg.lambda_binarize)?)?
        + (render.opacity.mean_all()? * cfg.lambda_sparsity)?)?;
    Ok((total, data))
}

/// Frozen conditioning sources for one instance.
pub struct Teacher<'a, M: EpsilonModel + ?Sized> {
    pub srt: &'a SrtModel,
    pub denoiser: &'a M,
    pub sched: &'a NoiseSchedule,
    pub latent: SetLatent,
    /// Intrinsics at the denoiser resolution.
    pub intrinsics: Intrinsics,
    pub image_size: u32,
    /// Branches kept when conditioning the denoiser.
    pub mode: CondMode,
}

pub struct Distiller<'a, M: EpsilonModel + ?Sized> {
    pub store: ParamStore,
    pub field: NeuralField,
    pub audit: AuditLog,
    pub history: Vec<StepStats>,
    teacher: Teacher<'a, M>,
    cfg: DistillConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
}

impl<'a, M: EpsilonModel + ?Sized> Distiller<'a, M> {
    pub fn new(teacher: Teacher<'a, M>, cfg: DistillConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if !(teacher.image_size as usize).is_multiple_of(cfg.render_size) {
            return Err(Error::bad_config(
                "distill.render_size",
                "must divide the denoiser resolution",
            ));
        }
        let store = ParamStore::new(cfg.seed);
        let field = NeuralField::new(&cfg.grid, store.var_builder(DType::F32, device))?;
        let opt = AdamW::new(
            store.all_vars(),
            ParamsAdamW {
                lr: cfg.lr,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-15,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            store,
            field,
            audit: AuditLog::default(),
            history: Vec::new(),
            teacher,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15_7111),
            cfg,
            opt,
        })
    }

    fn render_pose(&self, pose: &CameraPose) -> Result<CameraPose> {
        let s = self.cfg.render_size as u32;
        pose.with_resolution(s, s)
    }

    /// One optimization step over `views_per_iter` random query views.
    pub fn sds_step(&mut self, iter: usize) -> Result<StepStats> {
        let size = self.teacher.image_size;
        let up = size as usize / self.cfg.render_size;
        let (lo, hi) = anneal_t_range(iter, &self.cfg);
        let big_t = self.teacher.sched.steps;
        let mut total = None;
        let mut data_sum = 0.0;
        let mut last_t = 0;
        for _ in 0..self.cfg.views_per_iter {
            let pose = sample_query_pose(&mut self.rng, self.teacher.intrinsics, size, size)?;
            let small = self.render_pose(&pose)?;
            let render = volume_render(&self.field, &small, self.cfg.samples_per_ray, Some(&mut self.rng))?;
            let mut full = render.clone();
            if up > 1 {
                let img = render.chw()?.upsample_nearest2d(size as usize, size as usize)?;
                full.rgb = img.reshape((3, (size * size) as usize))?.t()?;
                full.width = size as usize;
                full.height = size as usize;
            }
            let t_lo = ((lo * big_t as f64).round() as usize).max(1);
            let t_hi = ((hi * big_t as f64).round() as usize).clamp(t_lo, big_t);
            let t = self.rng.random_range(t_lo..=t_hi);
            let cond =
                condition_from_srt(self.teacher.srt, &self.teacher.latent, &pose)?.with_mode(self.teacher.mode)?;
            let x0 = LatentCodec.encode(&full.chw()?.detach());
            let eps = seeded_noise(x0.dims(), self.rng.random(), x0.dtype(), x0.device())?;
            let x_t = q_sample(self.teacher.sched, &x0, &[t], &eps)?;
            // same stride as a full-length trajectory of `ddim_steps`
            let steps = ((self.cfg.ddim_steps * t) as f64 / big_t as f64).ceil().max(1.0) as usize;
            let x0_hat = ddim_denoise(
                self.teacher.denoiser,
                self.teacher.sched,
                &x_t,
                t,
                steps,
                self.cfg.guidance_weight,
                &cond,
            )?;
            let target = LatentCodec.decode(&x0_hat)?.detach();
            let (loss, data) = distill_objective(&full, &target, &self.cfg)?;
            data_sum += data.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            last_t = t;
            total = Some(match total {
                None => loss,
                Some(acc) => (acc + loss)?,
            });
        }
        let loss = (total.expect("at least one view") / self.cfg.views_per_iter as f64)?;
        for term in [TERM_DENOISE, TERM_BINARIZE, TERM_SPARSITY] {
            self.audit.terms.insert(term.to_string());
        }
        self.audit.steps += 1;
        self.opt.backward_step(&loss)?;
        let stats = StepStats {
            iter,
            t: last_t,
            loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            data: data_sum / self.cfg.views_per_iter as f64,
        };
        self.history.push(stats);
        Ok(stats)
    }

    /// Runs all iterations; `progress` is called after each step.
    pub fn run(&mut self, mut progress: impl FnMut(&StepStats)) -> Result<()> {
        for iter in 0..self.cfg.total_iters {
            let s = self.sds_step(iter)?;
            progress(&s);
        }
        Ok(())
    }

    /// Deterministic renders on a circle at the anchor's distance and
    /// elevation 15°.
    pub fn turntable(&self) -> Result<Vec<RenderOutput>> {
        let size = self.teacher.image_size;
        (0..self.cfg.turntable_frames)
            .map(|k| {
                let az = std::f64::consts::TAU * k as f64 / self.cfg.turntable_frames as f64;
                let pose = orbit_pose(az, 15f64.to_radians(), 1.0, self.teacher.intrinsics, size, size)?;
                volume_render(&self.field, &pose, self.cfg.samples_per_ray, None)
            })
            .collect()
    }

    /// Render from an arbitrary anchored-frame pose at its own resolution.
    pub fn render(&self, pose: &CameraPose) -> Result<RenderOutput> {
        volume_render(&self.field, pose, self.cfg.samples_per_ray, None)
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }
}

/// Moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
