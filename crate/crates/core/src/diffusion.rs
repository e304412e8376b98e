//! Conditional pixel-space diffusion over query-view images.
//!
//! The denoiser is a small UNet. Dense view-aligned features `c_d` (decoder
//! features concatenated with the query rays' Plücker coordinates) enter
//! through a control branch whose zero-initialized convolutions add
//! residuals to every encoder level; the set latent `c_s` is attended to by
//! cross-attention blocks whose queries carry the pooled Plücker rays.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{AdamW, Conv2d, Linear, Optimizer, ParamsAdamW, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_rays, CameraPose};
use crate::nn::{self, Attention, GroupNorm, ParamStore};
use crate::srt::{plucker_tensor, SetLatent, SrtModel};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear-beta DDPM schedule. `alphas_cumprod[t]` for `t ∈ 0..=T`, with
/// `alphas_cumprod[0] = 1` (no noise).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::bad_config("diffusion.timesteps", "need at least 2 steps"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alphas_cumprod = Vec::with_capacity(steps + 1);
    alphas_cumprod.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_cumprod.push(acc);
    }
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas_cumprod,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t.min(self.steps)]
    }
}

/// Per-sample coefficients shaped `(B, 1, 1, ..)` to broadcast against `like`.
fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = like.dim(0)?;
    if values.len() != b && values.len() != 1 {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", values.len())));
    }
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`; `t` holds one step per sample (or one
/// for all).
pub fn q_sample(sched: &NoiseSchedule, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    let a: Vec<f64> = t.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let s: Vec<f64> = t.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    Ok((x0.broadcast_mul(&per_sample(&a, x0)?)? + eps.broadcast_mul(&per_sample(&s, eps)?)?)?)
}

/// Unclipped inverse of [`q_sample`].
pub fn predict_x0_unclipped(sched: &NoiseSchedule, x_t: &Tensor, t: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
    let s: Vec<f64> = t.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    let a: Vec<f64> = t.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    Ok(x_t
        .broadcast_sub(&eps_hat.broadcast_mul(&per_sample(&s, eps_hat)?)?)?
        .broadcast_div(&per_sample(&a, x_t)?)?)
}

/// Denoised estimate clipped to the working range `[-1, 1]`.
pub fn predict_x0(sched: &NoiseSchedule, x_t: &Tensor, t: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
    Ok(predict_x0_unclipped(sched, x_t, t, eps_hat)?.clamp(-1.0, 1.0)?)
}

/// Maps between images and the diffusion working space. Identity: the
/// model diffuses `[0, 1]` pixels directly.
#[derive(Debug, Clone, Copy, Default)]
pub struct LatentCodec;

impl LatentCodec {
    pub fn encode(&self, images: &Tensor) -> Tensor {
        images.clone()
    }

    pub fn decode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clamp(0.0, 1.0)?)
    }
}

/// Which conditioning branches a model is trained and sampled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Dense features only; `c_s` is always null.
    DfOnly,
    /// Set latent only; `c_d` is always null.
    SltOnly,
    #[default]
    Both,
}

impl std::str::FromStr for CondMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "df_only" => Ok(Self::DfOnly),
            "slt_only" => Ok(Self::SltOnly),
            "both" => Ok(Self::Both),
            other => Err(Error::bad_config("cond", format!("unknown mode {other:?}"))),
        }
    }
}

/// Denoiser conditioning for a batch.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(B, D+6, H, W)` decoder features with Plücker rays, or zeros.
    pub c_d: Tensor,
    /// `(B, T, D)` set-latent tokens, or zeros.
    pub c_s: Tensor,
    /// `(B, 6, H, W)` Plücker rays of the query view, appended to the
    /// cross-attention queries regardless of nulling.
    pub rays: Tensor,
    pub null_d: bool,
    pub null_s: bool,
}

impl Conditioning {
    pub fn new(c_d: Tensor, c_s: Tensor, rays: Tensor) -> Result<Self> {
        let b = c_d.dim(0)?;
        if c_s.dim(0)? != b || rays.dim(0)? != b {
            return Err(Error::Shape("conditioning batch sizes differ".into()));
        }
        if c_d.dims()[2..] != rays.dims()[2..] || rays.dim(1)? != 6 {
            return Err(Error::Shape("c_d and rays must share a spatial grid".into()));
        }
        Ok(Self {
            c_d,
            c_s,
            rays,
            null_d: false,
            null_s: false,
        })
    }

    pub fn batch(&self) -> usize {
        self.c_d.dim(0).unwrap_or(0)
    }

    pub fn without_d(&self) -> Result<Self> {
        Ok(Self {
            c_d: self.c_d.zeros_like()?,
            null_d: true,
            ..self.clone()
        })
    }

    pub fn without_s(&self) -> Result<Self> {
        Ok(Self {
            c_s: self.c_s.zeros_like()?,
            null_s: true,
            ..self.clone()
        })
    }

    pub fn null(&self) -> Result<Self> {
        self.without_d()?.without_s()
    }

    pub fn with_mode(&self, mode: CondMode) -> Result<Self> {
        match mode {
            CondMode::Both => Ok(self.clone()),
            CondMode::DfOnly => self.without_s(),
            CondMode::SltOnly => self.without_d(),
        }
    }

    /// Zeroes branches per sample.
    pub fn with_dropout(&self, drops: &[Dropout]) -> Result<Self> {
        if drops.len() != self.batch() {
            return Err(Error::Shape("one dropout decision per sample".into()));
        }
        let keep_d: Vec<f64> = drops.iter().map(|d| f64::from(!d.drops_d())).collect();
        let keep_s: Vec<f64> = drops.iter().map(|d| f64::from(!d.drops_s())).collect();
        Ok(Self {
            c_d: self.c_d.broadcast_mul(&per_sample(&keep_d, &self.c_d)?)?,
            c_s: self.c_s.broadcast_mul(&per_sample(&keep_s, &self.c_s)?)?,
            rays: self.rays.clone(),
            null_d: self.null_d || drops.iter().all(Dropout::drops_d),
            null_s: self.null_s || drops.iter().all(Dropout::drops_s),
        })
    }

    /// Concatenates along the batch axis.
    pub fn cat(parts: &[&Conditioning]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("no conditioning to concatenate".into()))?;
        let c_d: Vec<&Tensor> = parts.iter().map(|c| &c.c_d).collect();
        let c_s: Vec<&Tensor> = parts.iter().map(|c| &c.c_s).collect();
        let rays: Vec<&Tensor> = parts.iter().map(|c| &c.rays).collect();
        Ok(Self {
            c_d: Tensor::cat(&c_d, 0)?,
            c_s: Tensor::cat(&c_s, 0)?,
            rays: Tensor::cat(&rays, 0)?,
            null_d: parts.iter().all(|c| c.null_d) && first.null_d,
            null_s: parts.iter().all(|c| c.null_s) && first.null_s,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            c_d: self.c_d.detach(),
            c_s: self.c_s.detach(),
            rays: self.rays.detach(),
            ..self.clone()
        }
    }
}

/// Conditioning for one query camera from a frozen SRT and a set latent.
/// The query grid is the pose's full pixel grid.
pub fn condition_from_srt(srt: &SrtModel, latent: &SetLatent, pose: &CameraPose) -> Result<Conditioning> {
    let grid = camera_rays(pose);
    let (h, w) = (grid.height, grid.width);
    let feats = srt.decode(&[&grid], latent)?.spatial()?;
    let rays = plucker_tensor(&[&grid], feats.dtype(), feats.device())?
        .transpose(1, 2)?
        .reshape((1, 6, h, w))?;
    let c_d = Tensor::cat(&[&feats, &rays], 1)?;
    Ok(Conditioning::new(c_d, latent.tokens.clone(), rays)?.detach())
}

/// Per-sample condition dropout outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dropout {
    Keep,
    DropD,
    DropS,
    DropBoth,
}

impl Dropout {
    pub fn drops_d(&self) -> bool {
        matches!(self, Self::DropD | Self::DropBoth)
    }

    pub fn drops_s(&self) -> bool {
        matches!(self, Self::DropS | Self::DropBoth)
    }
}

/// Probability of each of the three dropout outcomes.
pub const DROPOUT_P: f64 = 0.05;

pub fn sample_dropout(rng: &mut impl Rng) -> Dropout {
    let u: f64 = rng.random();
    if u < DROPOUT_P {
        Dropout::DropD
    } else if u < 2.0 * DROPOUT_P {
        Dropout::DropS
    } else if u < 3.0 * DROPOUT_P {
        Dropout::DropBoth
    } else {
        Dropout::Keep
    }
}

/// `eps_uncond + w·(eps_cond − eps_uncond)`; `w = 0` and `w = 1` return the
/// corresponding input exactly.
pub fn cfg_epsilon(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::Shape("guidance inputs differ in shape".into()));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * w)?)?)
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsilonModel {
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub heads: usize,
    /// Channels of `c_d` (decoder width + 6 Plücker channels).
    pub cond_channels: usize,
    /// Width of the `c_s` tokens.
    pub context_dim: usize,
    pub image_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_mult: vec![1, 2, 4],
            heads: 4,
            cond_channels: 256 + 6,
            context_dim: 256,
            image_size: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() {
            return Err(Error::bad_config("diffusion.channel_mult", "need at least one level"));
        }
        let down = 1 << (self.channel_mult.len() - 1);
        if !self.image_size.is_multiple_of(down) {
            return Err(Error::bad_config(
                "diffusion.image_size",
                "must be divisible by 2^(levels-1)",
            ));
        }
        for m in &self.channel_mult {
            if !(self.base_channels * m).is_multiple_of(self.heads) {
                return Err(Error::bad_config("diffusion.heads", "must divide every level width"));
            }
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        self.base_channels * 4
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, time_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(cin, vb.pp("norm1"))?,
            conv1: nn::conv2d(cin, cout, 3, 1, vb.pp("conv1"))?,
            time: nn::linear(time_dim, 2 * cout, vb.pp("time"))?,
            norm2: GroupNorm::new(cout, vb.pp("norm2"))?,
            conv2: nn::conv2d(cout, cout, 3, 1, vb.pp("conv2"))?,
            skip: (cin != cout)
                .then(|| nn::conv2d(cin, cout, 1, 1, vb.pp("skip")))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let c = h.dim(1)?;
        let ss = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let scale = ss.narrow(1, 0, c)?;
        let shift = ss.narrow(1, c, c)?;
        let h = self
            .norm2
            .forward(&h)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Spatial cross-attention: normalized features with appended Plücker rays
/// query the set latent.
struct SpatialCrossAttention {
    norm: GroupNorm,
    attn: Attention,
}

impl SpatialCrossAttention {
    fn new(channels: usize, context_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(channels, vb.pp("norm"))?,
            attn: Attention::new(channels + 6, context_dim, channels, heads, vb.pp("attn"))?,
        })
    }

    fn forward(&self, x: &Tensor, rays: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let q = Tensor::cat(&[&self.norm.forward(x)?, rays], 1)?
            .reshape((b, c + 6, h * w))?
            .transpose(1, 2)?;
        let o = self.attn.forward(&q, context)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<SpatialCrossAttention>,
    down: Option<Conv2d>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, rays: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let mut h = self.res.forward(x, temb)?;
        if let Some(a) = &self.attn {
            h = a.forward(&h, rays, ctx)?;
        }
        Ok(h)
    }
}

struct Mid {
    res1: ResBlock,
    attn: SpatialCrossAttention,
    res2: ResBlock,
}

impl Mid {
    fn forward(&self, x: &Tensor, temb: &Tensor, rays: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.res1.forward(x, temb)?;
        let h = self.attn.forward(&h, rays, ctx)?;
        self.res2.forward(&h, temb)
    }
}

fn encoder_levels(cfg: &DenoiserConfig, vb: &VarBuilder) -> Result<Vec<Level>> {
    let levels = cfg.channel_mult.len();
    let mut cin = cfg.base_channels;
    let mut out = Vec::with_capacity(levels);
    for (l, m) in cfg.channel_mult.iter().enumerate() {
        let ch = cfg.base_channels * m;
        let vb = vb.pp(format!("down.{l}"));
        out.push(Level {
            res: ResBlock::new(cin, ch, cfg.time_dim(), vb.pp("res"))?,
            attn: (l >= 1)
                .then(|| SpatialCrossAttention::new(ch, cfg.context_dim, cfg.heads, vb.pp("attn")))
                .transpose()?,
            down: (l + 1 < levels)
                .then(|| nn::conv2d(ch, ch, 3, 2, vb.pp("downsample")))
                .transpose()?,
        });
        cin = ch;
    }
    Ok(out)
}

fn mid_block(cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Mid> {
    let ch = cfg.base_channels * cfg.channel_mult.last().copied().unwrap_or(1);
    Ok(Mid {
        res1: ResBlock::new(ch, ch, cfg.time_dim(), vb.pp("res1"))?,
        attn: SpatialCrossAttention::new(ch, cfg.context_dim, cfg.heads, vb.pp("attn"))?,
        res2: ResBlock::new(ch, ch, cfg.time_dim(), vb.pp("res2"))?,
    })
}

/// Trainable copy of the encoder that reads `c_d` and emits zero-initialized
/// residuals for every skip connection and the middle block.
struct ControlBranch {
    hint: Vec<Conv2d>,
    hint_out: Conv2d,
    conv_in: Conv2d,
    levels: Vec<Level>,
    mid: Mid,
    /// One per encoder skip (levels and downsamples), then the middle block.
    zero: Vec<Conv2d>,
}

struct UpLevel {
    res: ResBlock,
    attn: Option<SpatialCrossAttention>,
    up: Option<Conv2d>,
}

pub struct DenoiserNet {
    cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    levels: Vec<Level>,
    mid: Mid,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    control: ControlBranch,
    dtype: DType,
    device: Device,
}

impl DenoiserNet {
    pub fn new(cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_channels;
        let td = cfg.time_dim();
        let levels = encoder_levels(cfg, &vb)?;
        let mid = mid_block(cfg, vb.pp("mid"))?;

        // skip channels in push order: after each level, after each downsample
        let mut skips = Vec::new();
        for (l, m) in cfg.channel_mult.iter().enumerate() {
            skips.push(base * m);
            if l + 1 < cfg.channel_mult.len() {
                skips.push(base * m);
            }
        }
        let mut up = Vec::new();
        let mut cin = base * cfg.channel_mult.last().copied().unwrap_or(1);
        let mut skip_iter = skips.iter().rev();
        for (l, m) in cfg.channel_mult.iter().enumerate().rev() {
            let ch = base * m;
            // each level consumes the level skip; levels above 0 also take the
            // downsample skip of the level below
            let takes = if l > 0 { 2 } else { 1 };
            for j in 0..takes {
                let skip_ch = *skip_iter.next().expect("skip channel");
                let vb = vb.pp(format!("up.{l}.{j}"));
                let last = j + 1 == takes;
                up.push(UpLevel {
                    res: ResBlock::new(cin + skip_ch, ch, td, vb.pp("res"))?,
                    attn: (l >= 1)
                        .then(|| SpatialCrossAttention::new(ch, cfg.context_dim, cfg.heads, vb.pp("attn")))
                        .transpose()?,
                    up: (last && l > 0)
                        .then(|| nn::conv2d(ch, ch, 3, 1, vb.pp("upsample")))
                        .transpose()?,
                });
                cin = ch;
            }
        }

        let cvb = vb.pp("control");
        let hint = vec![
            nn::conv2d(cfg.cond_channels, base, 3, 1, cvb.pp("hint.0"))?,
            nn::conv2d(base, base, 3, 1, cvb.pp("hint.1"))?,
        ];
        let mut zero = Vec::new();
        for (i, &c) in skips.iter().enumerate() {
            zero.push(nn::zero_conv(c, c, cvb.pp(format!("zero.{i}")))?);
        }
        let mid_ch = base * cfg.channel_mult.last().copied().unwrap_or(1);
        zero.push(nn::zero_conv(mid_ch, mid_ch, cvb.pp("zero.mid"))?);
        let control = ControlBranch {
            hint,
            hint_out: nn::zero_conv(base, base, cvb.pp("hint.out"))?,
            conv_in: nn::conv2d(3, base, 3, 1, cvb.pp("conv_in"))?,
            levels: encoder_levels(cfg, &cvb)?,
            mid: mid_block(cfg, cvb.pp("mid"))?,
            zero,
        };

        let w_out = vb
            .pp("conv_out")
            .get_with_hints((3, base, 3, 3), "weight", candle_nn::Init::Const(0.0))?;
        let b_out = vb
            .pp("conv_out")
            .get_with_hints(3, "bias", candle_nn::Init::Const(0.0))?;
        Ok(Self {
            time1: nn::linear(base, td, vb.pp("time.0"))?,
            time2: nn::linear(td, td, vb.pp("time.1"))?,
            conv_in: nn::conv2d(3, base, 3, 1, vb.pp("conv_in"))?,
            levels,
            mid,
            up,
            norm_out: GroupNorm::new(base, vb.pp("norm_out"))?,
            conv_out: Conv2d::new(
                w_out,
                Some(b_out),
                candle_nn::Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
            ),
            control,
            dtype: vb.dtype(),
            device: vb.device().clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn time_embedding(&self, t: &[usize], batch: usize) -> Result<Tensor> {
        let pos: Vec<f64> = if t.len() == 1 {
            vec![t[0] as f64; batch]
        } else {
            t.iter().map(|&t| t as f64).collect()
        };
        let emb = Tensor::from_vec(
            nn::timestep_embedding(&pos, self.cfg.base_channels),
            (batch, self.cfg.base_channels),
            &self.device,
        )?
        .to_dtype(self.dtype)?;
        Ok(self.time2.forward(&self.time1.forward(&emb)?.silu()?)?)
    }

    /// Plücker rays average-pooled to each level's resolution.
    fn pooled_rays(&self, rays: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![rays.clone()];
        for l in 1..self.cfg.channel_mult.len() {
            let k = 1 << l;
            out.push(rays.avg_pool2d(k)?);
        }
        Ok(out)
    }

    fn control_residuals(
        &self,
        x: &Tensor,
        temb: &Tensor,
        cond: &Conditioning,
        rays: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        let c = &self.control;
        let mut hint = cond.c_d.clone();
        for conv in &c.hint {
            hint = conv.forward(&hint)?.silu()?;
        }
        let mut h = (c.conv_in.forward(x)? + c.hint_out.forward(&hint)?)?;
        let mut outs = Vec::new();
        let mut zi = 0;
        for (l, level) in c.levels.iter().enumerate() {
            h = level.forward(&h, temb, &rays[l], &cond.c_s)?;
            outs.push(c.zero[zi].forward(&h)?);
            zi += 1;
            if let Some(d) = &level.down {
                h = d.forward(&h)?;
                outs.push(c.zero[zi].forward(&h)?);
                zi += 1;
            }
        }
        let h = c.mid.forward(&h, temb, rays.last().expect("rays"), &cond.c_s)?;
        outs.push(c.zero[zi].forward(&h)?);
        Ok(outs)
    }

    pub fn forward(&self, x_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let (b, _, h, w) = x_t.dims4()?;
        if cond.batch() != b || cond.rays.dims()[2..] != [h, w] {
            return Err(Error::Shape(format!(
                "conditioning {:?} does not match input {:?}",
                cond.rays.dims(),
                x_t.dims()
            )));
        }
        let temb = self.time_embedding(t, b)?;
        let rays = self.pooled_rays(&cond.rays)?;
        let mut ctrl = self.control_residuals(x_t, &temb, cond, &rays)?.into_iter();

        let mut h = self.conv_in.forward(x_t)?;
        let mut skips = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            h = level.forward(&h, &temb, &rays[l], &cond.c_s)?;
            skips.push((&h + ctrl.next().expect("control residual"))?);
            if let Some(d) = &level.down {
                h = d.forward(&h)?;
                skips.push((&h + ctrl.next().expect("control residual"))?);
            }
        }
        h = self.mid.forward(&h, &temb, rays.last().expect("rays"), &cond.c_s)?;
        h = (h + ctrl.next().expect("control residual"))?;

        let levels = self.cfg.channel_mult.len();
        let mut level_of = Vec::new();
        for l in (0..levels).rev() {
            for _ in 0..if l > 0 { 2 } else { 1 } {
                level_of.push(l);
            }
        }
        for (blk, &l) in self.up.iter().zip(&level_of) {
            let skip = skips.pop().expect("skip");
            h = blk.res.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            if let Some(a) = &blk.attn {
                h = a.forward(&h, &rays[l], &cond.c_s)?;
            }
            if let Some(u) = &blk.up {
                let (_, _, hh, ww) = h.dims4()?;
                h = u.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}

impl EpsilonModel for DenoiserNet {
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}

/// Guided noise estimate; the unconditional pass nulls both branches and is
/// batched with the conditional one.
pub fn guided_eps<M: EpsilonModel + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    cond: &Conditioning,
    w: f64,
) -> Result<Tensor> {
    if w == 1.0 {
        return model.predict_eps(x_t, &[t], cond);
    }
    let b = x_t.dim(0)?;
    let null = cond.null()?;
    let both = Conditioning::cat(&[cond, &null])?;
    let x2 = Tensor::cat(&[x_t, x_t], 0)?;
    let eps = model.predict_eps(&x2, &[t], &both)?;
    cfg_epsilon(&eps.narrow(0, 0, b)?, &eps.narrow(0, b, b)?, w)
}

/// Evenly spaced DDIM timesteps from `t_start` down to (excluding) 0.
pub fn ddim_timesteps(t_start: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(t_start).max(1);
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((k as f64 * t_start as f64 / steps as f64).round() as usize).max(1))
        .collect();
    ts.dedup();
    ts
}

/// Deterministic (η = 0) DDIM from `x_t` at step `t_start` down to a clean
/// estimate in the working space.
pub fn ddim_denoise<M: EpsilonModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t_start: usize,
    steps: usize,
    w: f64,
    cond: &Conditioning,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::bad_config("ddim.steps", "must be at least 1"));
    }
    if steps > sched.steps || t_start > sched.steps {
        return Err(Error::bad_config(
            "ddim.steps",
            format!("exceeds schedule length {}", sched.steps),
        ));
    }
    if t_start == 0 {
        return Ok(x_t.clone());
    }
    let ts = ddim_timesteps(t_start, steps);
    let mut x = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &x, t, cond, w)?;
        let x0 = predict_x0(sched, &x, &[t], &eps)?;
        let ab = sched.alpha_bar(t_prev);
        x = if t_prev == 0 {
            x0
        } else {
            ((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?
        };
    }
    Ok(x)
}

/// Standard-normal tensor from a seeded host RNG.
pub fn seeded_noise(shape: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Samples images `(B, 3, H, W)` in `[0, 1]` from pure noise.
pub fn ddim_sample<M: EpsilonModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    steps: usize,
    w: f64,
    seed: u64,
) -> Result<Tensor> {
    let (b, _, h, wd) = cond.rays.dims4()?;
    let x_t = seeded_noise(&[b, 3, h, wd], seed, cond.rays.dtype(), cond.rays.device())?;
    let x0 = ddim_denoise(model, sched, &x_t, sched.steps, steps, w, cond)?;
    LatentCodec.decode(&x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub timesteps: usize,
    pub cond_mode: CondMode,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 2e-4,
            warmup: 100,
            timesteps: 1000,
            cond_mode: CondMode::Both,
            seed: 0,
        }
    }
}

pub struct DiffusionTrainer {
    pub store: ParamStore,
    pub net: DenoiserNet,
    pub sched: NoiseSchedule,
    cfg: DiffusionTrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl DiffusionTrainer {
    pub fn new(net_cfg: &DenoiserConfig, cfg: DiffusionTrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(cfg.seed);
        let net = DenoiserNet::new(net_cfg, store.var_builder(dtype, device))?;
        let opt = AdamW::new(
            store.all_vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            store,
            net,
            sched: make_schedule(cfg.timesteps)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff_0510),
            cfg,
            opt,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Noise-prediction loss on a batch without updating weights. Returns
    /// the loss tensor and the drawn dropout decisions.
    pub fn loss(&mut self, targets: &Tensor, cond: &Conditioning) -> Result<(Tensor, Vec<Dropout>)> {
        let b = targets.dim(0)?;
        let t: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=self.sched.steps)).collect();
        let eps = seeded_noise(targets.dims(), self.rng.random(), targets.dtype(), targets.device())?;
        let drops: Vec<Dropout> = (0..b).map(|_| sample_dropout(&mut self.rng)).collect();
        let cond = cond.with_mode(self.cfg.cond_mode)?.with_dropout(&drops)?;
        let x0 = LatentCodec.encode(targets);
        let x_t = q_sample(&self.sched, &x0, &t, &eps)?;
        let pred = self.net.forward(&x_t, &t, &cond)?;
        Ok((nn::mse(&pred, &eps)?, drops))
    }

    /// One optimizer update; returns the loss before the update.
    pub fn train_step(&mut self, targets: &Tensor, cond: &Conditioning) -> Result<f32> {
        let (loss, _) = self.loss(targets, cond)?;
        let warm = ((self.step + 1) as f64 / self.cfg.warmup.max(1) as f64).min(1.0);
        self.opt.set_learning_rate(self.cfg.lr * warm);
        self.opt.backward_step(&loss)?;
        self.step += 1;
        Ok(loss.to_dtype(DType::F32)?.to_scalar::<f32>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, randomize};

    fn tiny_net_cfg() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            channel_mult: vec![1, 2, 4],
            heads: 2,
            cond_channels: 10,
            context_dim: 12,
            image_size: 8,
        }
    }

    fn random_cond(b: usize, cfg: &DenoiserConfig, dtype: DType, seed: u64) -> Conditioning {
        let s = cfg.image_size;
        let dev = Device::Cpu;
        let c_d = seeded_noise(&[b, cfg.cond_channels, s, s], seed, dtype, &dev).unwrap();
        let c_s = seeded_noise(&[b, 5, cfg.context_dim], seed + 1, dtype, &dev).unwrap();
        let rays = seeded_noise(&[b, 6, s, s], seed + 2, dtype, &dev).unwrap();
        Conditioning::new(c_d, c_s, rays).unwrap()
    }

    fn vec(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert!(matches!(make_schedule(1), Err(Error::BadConfig { .. })));
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        let mut acc = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0;
            acc *= 1.0 - beta;
        }
        assert!((s.alpha_bar(1000) - acc).abs() < 1e-10);
        for t in [2, 3, 17] {
            let s = make_schedule(t).unwrap();
            assert!(s.alphas_cumprod.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn q_sample_examples_and_moments() {
        let s = make_schedule(1000).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[0.3f64, -0.7]], &dev).unwrap();
        let eps = Tensor::new(&[[1.5f64, 0.2]], &dev).unwrap();
        assert_eq!(vec(&q_sample(&s, &x0, &[0], &eps).unwrap()), vec(&x0));
        let z = x0.zeros_like().unwrap();
        let out = vec(&q_sample(&s, &z, &[500], &eps).unwrap());
        let k = (1.0 - s.alpha_bar(500)).sqrt();
        assert!((out[0] - 1.5 * k).abs() < 1e-15 && (out[1] - 0.2 * k).abs() < 1e-15);

        // Monte-Carlo moments at t = 300
        let n = 100_000;
        let t = 300;
        let x0 = Tensor::full(0.4f64, n, &dev).unwrap();
        let eps = seeded_noise(&[n], 9, DType::F64, &dev).unwrap();
        let xt = vec(&q_sample(&s, &x0.unsqueeze(0).unwrap(), &[t], &eps.unsqueeze(0).unwrap()).unwrap());
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let (m_exp, v_exp) = (ab.sqrt() * 0.4, 1.0 - ab);
        let se_mean = (v_exp / n as f64).sqrt();
        let se_var = v_exp * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - m_exp).abs() < 3.0 * se_mean, "mean {mean} vs {m_exp}");
        assert!((var - v_exp).abs() < 3.0 * se_var, "var {var} vs {v_exp}");
    }

    #[test]
    fn predict_x0_examples() {
        let s = make_schedule(1000).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[0.25f64, -0.5, 0.9]], &dev).unwrap();
        let eps = Tensor::new(&[[0.3f64, -1.1, 2.0]], &dev).unwrap();
        for t in [1, 10, 500, 1000] {
            let xt = q_sample(&s, &x0, &[t], &eps).unwrap();
            let back = vec(&predict_x0_unclipped(&s, &xt, &[t], &eps).unwrap());
            for (a, b) in back.iter().zip(vec(&x0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let z = Tensor::zeros((1, 3), DType::F64, &dev).unwrap();
        assert_eq!(vec(&predict_x0(&s, &z, &[7], &z).unwrap()), vec![0.0; 3]);
        let xt = Tensor::new(&[[0.8f64, -3.0, 0.1]], &dev).unwrap();
        let got = vec(&predict_x0(&s, &xt, &[600], &eps).unwrap());
        let ab = s.alpha_bar(600);
        for ((g, x), e) in got.iter().zip([0.8, -3.0, 0.1]).zip([0.3, -1.1, 2.0]) {
            let oracle = ((x - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
            assert!((g - oracle).abs() < 1e-7);
        }
    }

    #[test]
    fn codec_is_identity() {
        let x = Tensor::rand(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let y = LatentCodec.decode(&LatentCodec.encode(&x)).unwrap();
        assert_eq!(vec(&x), vec(&y));
    }

    #[test]
    fn cfg_examples() {
        let dev = Device::Cpu;
        let c = Tensor::new(&[0.3f64, -1.7, 2.2], &dev).unwrap();
        let u = Tensor::new(&[-0.4f64, 0.9, 0.01], &dev).unwrap();
        assert_eq!(vec(&cfg_epsilon(&c, &u, 1.0).unwrap()), vec(&c));
        assert_eq!(vec(&cfg_epsilon(&c, &u, 0.0).unwrap()), vec(&u));
        let one = Tensor::ones(1, DType::F64, &dev).unwrap();
        let zero = Tensor::zeros(1, DType::F64, &dev).unwrap();
        assert_eq!(vec(&cfg_epsilon(&one, &zero, 9.0).unwrap()), vec![9.0]);
        assert!(cfg_epsilon(&one, &c, 2.0).is_err());
    }

    #[test]
    fn dropout_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_dropout(&mut rng) {
                Dropout::DropD => counts[0] += 1,
                Dropout::DropS => counts[1] += 1,
                Dropout::DropBoth => counts[2] += 1,
                Dropout::Keep => {}
            }
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.05).abs() <= 0.007, "frequency {f}");
        }
    }

    #[test]
    fn dropout_zeroes_per_sample() {
        let cfg = tiny_net_cfg();
        let c = random_cond(3, &cfg, DType::F64, 0);
        let d = c
            .with_dropout(&[Dropout::DropD, Dropout::Keep, Dropout::DropBoth])
            .unwrap();
        let norm = |t: &Tensor, i: usize| vec(&t.get(i).unwrap()).iter().map(|v| v.abs()).sum::<f64>();
        assert_eq!(norm(&d.c_d, 0), 0.0);
        assert!(norm(&d.c_s, 0) > 0.0);
        assert!(norm(&d.c_d, 1) > 0.0 && norm(&d.c_s, 1) > 0.0);
        assert_eq!(norm(&d.c_d, 2) + norm(&d.c_s, 2), 0.0);
        assert_eq!(vec(&d.rays), vec(&c.rays));
        let n = c.null().unwrap();
        assert!(n.null_d && n.null_s);
        assert_eq!(vec(&n.c_d).iter().map(|v| v.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn ddim_timesteps_are_even_and_descending() {
        assert_eq!(ddim_timesteps(1000, 4), vec![1000, 750, 500, 250]);
        assert_eq!(ddim_timesteps(10, 30), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(700, 1), vec![700]);
    }

    /// Returns the exact noise for a planted clean image.
    struct Planted {
        x0: Tensor,
        sched: NoiseSchedule,
    }

    impl EpsilonModel for Planted {
        fn predict_eps(&self, x_t: &Tensor, t: &[usize], _cond: &Conditioning) -> Result<Tensor> {
            let ab = self.sched.alpha_bar(t[0]);
            let x0 = self.x0.broadcast_as(x_t.shape())?;
            Ok(((x_t - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        }
    }

    #[test]
    fn planted_oracle_is_recovered() {
        let sched = make_schedule(1000).unwrap();
        let cfg = tiny_net_cfg();
        let x0 = Tensor::rand(0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let oracle = Planted {
            x0: x0.clone(),
            sched: sched.clone(),
        };
        let cond = random_cond(1, &cfg, DType::F64, 4);
        for steps in [1, 5, 30, 1000] {
            let out = vec(&ddim_sample(&oracle, &sched, &cond, steps, 9.0, 1).unwrap());
            for (a, b) in out.iter().zip(vec(&x0)) {
                assert!((a - b).abs() < 1e-4, "steps {steps}");
            }
        }
        assert!(matches!(
            ddim_sample(&oracle, &sched, &cond, 1001, 9.0, 1),
            Err(Error::BadConfig { .. })
        ));
    }

    #[test]
    fn net_shapes_zero_init_and_determinism() {
        let cfg = tiny_net_cfg();
        let store = ParamStore::new(0);
        let net = DenoiserNet::new(&cfg, store.var_builder(DType::F32, &Device::Cpu)).unwrap();
        let cond = random_cond(2, &cfg, DType::F32, 0);
        let x = seeded_noise(&[2, 3, 8, 8], 5, DType::F32, &Device::Cpu).unwrap();
        let out = net.forward(&x, &[10, 500], &cond).unwrap();
        assert_eq!(out.dims(), x.dims());
        assert!(vec(&out).iter().all(|v| *v == 0.0));

        randomize(&store, 0.1, 1).unwrap();
        let sched = make_schedule(50).unwrap();
        let a = vec(&ddim_sample(&net, &sched, &cond, 5, 9.0, 7).unwrap());
        let b = vec(&ddim_sample(&net, &sched, &cond, 5, 9.0, 7).unwrap());
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        // the zero-initialized control branch makes c_d irrelevant at init
        let fresh = ParamStore::new(0);
        let net = DenoiserNet::new(&cfg, fresh.var_builder(DType::F32, &Device::Cpu)).unwrap();
        for (name, var) in fresh.vars() {
            if !name.starts_with("control.") && !name.starts_with("conv_out") {
                continue;
            }
            if name.starts_with("conv_out") {
                var.set(&Tensor::rand(-0.1f32, 0.1, var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
            }
        }
        let with = vec(&net.forward(&x, &[10, 500], &cond).unwrap());
        let without = vec(&net.forward(&x, &[10, 500], &cond.without_d().unwrap()).unwrap());
        assert_eq!(with, without);
    }

    #[test]
    fn loss_at_init_is_about_one() {
        let cfg = DenoiserConfig {
            image_size: 16,
            ..tiny_net_cfg()
        };
        let mut trainer = DiffusionTrainer::new(
            &cfg,
            DiffusionTrainConfig {
                timesteps: 100,
                ..Default::default()
            },
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        let targets = Tensor::rand(0f32, 1.0, (4, 3, 16, 16), &Device::Cpu).unwrap();
        let cond = random_cond(4, &cfg, DType::F32, 2);
        let l = trainer.train_step(&targets, &cond).unwrap();
        assert!((l - 1.0).abs() < 0.1, "loss {l}");
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = DenoiserConfig {
            image_size: 8,
            ..tiny_net_cfg()
        };
        let mut trainer = DiffusionTrainer::new(
            &cfg,
            DiffusionTrainConfig {
                timesteps: 100,
                lr: 3e-3,
                warmup: 1,
                ..Default::default()
            },
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        // a fixed smooth target is easy to learn
        let img = Tensor::ones((8, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let cond = random_cond(8, &cfg, DType::F32, 2);
        let losses: Vec<f32> = (0..80).map(|_| trainer.train_step(&img, &cond).unwrap()).collect();
        let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = losses[70..].iter().sum::<f32>() / 10.0;
        assert!(tail < 0.9 * head, "head {head} tail {tail}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_net_cfg();
        let store = ParamStore::new(2);
        let net = DenoiserNet::new(&cfg, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        randomize(&store, 0.2, 3).unwrap();
        let cond = random_cond(1, &cfg, DType::F64, 8);
        let x = seeded_noise(&[1, 3, 8, 8], 5, DType::F64, &Device::Cpu).unwrap();
        let eps = seeded_noise(&[1, 3, 8, 8], 6, DType::F64, &Device::Cpu).unwrap();
        let loss = || -> Result<Tensor> { Ok(nn::mse(&net.forward(&x, &[40], &cond)?, &eps)?) };
        let report = check_gradients(&store, loss, 50, 1e-3, 4, |_| true).unwrap();
        assert!(report.max_rel_error() < 1e-2, "{:?}", report.worst());
    }
}
