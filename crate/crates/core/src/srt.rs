//! Set-latent scene transformer for unposed inputs.
//!
//! Images are cut into patch tokens by a strided convolution stack, tagged
//! with fixed sinusoidal encodings (patch position, intrinsics, and for the
//! anchor image only, the Plücker coordinates of its patch rays), and mixed
//! by a self-attention encoder into the set latent. Query rays cross-attend
//! into the set latent to produce per-ray decoder features, which an MLP
//! head maps to RGB.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Conv2d, Embedding, Linear, Optimizer, ParamsAdamW, VarBuilder};
use image::{GrayImage, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SceneRecord, ViewRecord};
use crate::error::{Error, Result};
use crate::geometry::{anchor_frame, camera_rays, plucker_encode, CameraPose, Intrinsics, RayGrid, Vec3};
use crate::imaging::{composite_white, downsample, rows_to_image, to_chw, to_float};
use crate::nn::{self, CrossAttentionBlock, Mlp, ParamStore, SelfAttentionBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrtConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    /// Patch side in pixels; a power of two, one stride-2 conv per factor 2.
    pub patch_size: usize,
    pub image_size: usize,
    /// Octaves of the sinusoidal encodings.
    pub num_freqs: usize,
}

impl Default for SrtConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            heads: 8,
            encoder_depth: 8,
            decoder_depth: 4,
            mlp_ratio: 4,
            patch_size: 8,
            image_size: 64,
            num_freqs: 6,
        }
    }
}

impl SrtConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return Err(Error::bad_config("srt.patch_size", "must be a power of two ≥ 2"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::bad_config("srt.image_size", "must be divisible by patch_size"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::bad_config("srt.heads", "must divide dim"));
        }
        if self.dim < 4 || !self.dim.is_multiple_of(4) {
            return Err(Error::bad_config("srt.dim", "must be a positive multiple of 4"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// A set of context images; image 0 is the anchor that defines the frame.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<Rgb32FImage>,
    pub intrinsics: Vec<Intrinsics>,
    /// Pose of the anchor image in the anchored frame.
    pub anchor_pose: CameraPose,
}

impl ImageSet {
    /// Builds a set, compositing each image over white where its mask is 0.
    pub fn new(
        images: Vec<Rgb32FImage>,
        masks: Option<Vec<GrayImage>>,
        intrinsics: Vec<Intrinsics>,
        anchor_pose: CameraPose,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyInput("an image set needs at least one image".into()));
        }
        if intrinsics.len() != images.len() {
            return Err(Error::Shape("one intrinsics record per image required".into()));
        }
        let dims = images[0].dimensions();
        for img in &images {
            if img.dimensions() != dims {
                return Err(Error::Shape("all images must share a size".into()));
            }
            if img.as_raw().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Shape("image values must lie in [0, 1]".into()));
            }
        }
        let images = match masks {
            None => images,
            Some(masks) => {
                if masks.len() != images.len() {
                    return Err(Error::Shape("one mask per image required".into()));
                }
                images
                    .iter()
                    .zip(&masks)
                    .map(|(i, m)| composite_white(i, m))
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            images,
            intrinsics,
            anchor_pose,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn anchor_index(&self) -> usize {
        0
    }

    pub fn size(&self) -> (u32, u32) {
        self.images[0].dimensions()
    }
}

/// The canonical anchor camera: identity rotation, one unit behind the
/// origin on −Z. Used when the anchor's anchored-frame pose is otherwise
/// unknown.
pub fn canonical_anchor_pose(intrinsics: Intrinsics, width: u32, height: u32) -> Result<CameraPose> {
    CameraPose::look_at(
        Vec3::new(0.0, 0.0, -1.0),
        Vec3::zeros(),
        Vec3::new(0.0, -1.0, 0.0),
        intrinsics,
        width,
        height,
    )
}

/// Per-token provenance: (image index, patch row, patch column).
pub type Provenance = (usize, usize, usize);

#[derive(Debug, Clone)]
pub struct SetLatent {
    /// `(B, T, D)` tokens.
    pub tokens: Tensor,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone)]
pub struct DecoderFeatures {
    /// `(B, R, D)`, one row per query ray in row-major pixel order.
    pub features: Tensor,
    pub height: usize,
    pub width: usize,
}

impl DecoderFeatures {
    /// `(B, D, H, W)` layout.
    pub fn spatial(&self) -> Result<Tensor> {
        let (b, _, d) = self.features.dims3()?;
        Ok(self
            .features
            .transpose(1, 2)?
            .reshape((b, d, self.height, self.width))?)
    }
}

/// Host-side inputs for a batch of image sets with equal size and count.
#[derive(Debug, Clone)]
pub struct SrtInputs {
    /// `(B·N, 3, H, W)`
    pub images: Tensor,
    /// `(B, T, 6·2·F)` anchor-only camera encodings, zero for other images.
    pub camera: Tensor,
    /// `(B, N, 4·2·F)` intrinsics encodings.
    pub intrinsics: Tensor,
    pub batch: usize,
    pub views: usize,
}

/// `(B, R, 6)` Plücker coordinates of query ray grids.
pub fn plucker_tensor(grids: &[&RayGrid], dtype: DType, device: &Device) -> Result<Tensor> {
    let r = grids
        .first()
        .map(|g| g.rays.len())
        .ok_or_else(|| Error::EmptyInput("no ray grids".into()))?;
    let mut data = Vec::with_capacity(grids.len() * r * 6);
    for g in grids {
        if g.rays.len() != r {
            return Err(Error::Shape("ray grids in a batch must share a size".into()));
        }
        data.extend(g.plucker_flat());
    }
    Ok(Tensor::from_vec(data, (grids.len(), r, 6), device)?.to_dtype(dtype)?)
}

/// Plücker coordinates of an arbitrary ray subset, `(1, R, 6)`.
pub fn plucker_rows(rays: &[crate::geometry::Ray], dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = rays
        .iter()
        .flat_map(|r| plucker_encode(r).to_array())
        .map(|v| v as f32)
        .collect();
    Ok(Tensor::from_vec(data, (1, rays.len(), 6), device)?.to_dtype(dtype)?)
}

pub struct SrtModel {
    cfg: SrtConfig,
    patch_convs: Vec<Conv2d>,
    pos_proj: Linear,
    camera_proj: Linear,
    intrinsics_proj: Linear,
    view_id: Embedding,
    encoder: Vec<SelfAttentionBlock>,
    ray_proj: Linear,
    decoder: Vec<CrossAttentionBlock>,
    rgb_head: Mlp,
    dtype: DType,
    device: Device,
}

impl SrtModel {
    pub fn new(cfg: &SrtConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg.patch_size.trailing_zeros() as usize;
        let mut patch_convs = Vec::with_capacity(layers);
        let mut cin = 3;
        for i in 0..layers {
            let cout = cfg.dim >> (layers - 1 - i).min(2);
            patch_convs.push(nn::conv2d(cin, cout, 3, 2, vb.pp(format!("patchify.{i}")))?);
            cin = cout;
        }
        let f = cfg.num_freqs;
        let d = cfg.dim;
        let camera_proj = {
            let w = vb.pp("camera_proj").get_with_hints(
                (d, 6 * 2 * f),
                "weight",
                candle_nn::init::DEFAULT_KAIMING_NORMAL,
            )?;
            Linear::new(w, None)
        };
        Ok(Self {
            patch_convs,
            pos_proj: nn::linear(2 * 2 * f, d, vb.pp("pos_proj"))?,
            camera_proj,
            intrinsics_proj: nn::linear(4 * 2 * f, d, vb.pp("intrinsics_proj"))?,
            view_id: candle_nn::embedding(2, d, vb.pp("view_id"))?,
            encoder: (0..cfg.encoder_depth)
                .map(|i| SelfAttentionBlock::new(d, cfg.heads, cfg.mlp_ratio, vb.pp(format!("encoder.{i}"))))
                .collect::<candle_core::Result<_>>()?,
            ray_proj: nn::linear(6 * 2 * f, d, vb.pp("ray_proj"))?,
            decoder: (0..cfg.decoder_depth)
                .map(|i| CrossAttentionBlock::new(d, d, cfg.heads, cfg.mlp_ratio, vb.pp(format!("decoder.{i}"))))
                .collect::<candle_core::Result<_>>()?,
            rgb_head: Mlp::new(d, d / 2, 3, vb.pp("rgb_head"))?,
            dtype: vb.dtype(),
            device: vb.device().clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SrtConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Assembles model inputs for a batch of image sets of equal size and
    /// count.
    pub fn prepare(&self, sets: &[&ImageSet]) -> Result<SrtInputs> {
        let first = sets.first().ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
        let n = first.len();
        let (w, h) = first.size();
        let p = self.cfg.patch_size;
        if !(w as usize).is_multiple_of(p) || !(h as usize).is_multiple_of(p) {
            return Err(Error::Shape(format!("image {w}x{h} not divisible by patch size {p}")));
        }
        let (hp, wp) = (h as usize / p, w as usize / p);
        let f = self.cfg.num_freqs;
        let mut pixels = Vec::with_capacity(sets.len() * n * (3 * w * h) as usize);
        let mut camera = vec![0f32; sets.len() * n * hp * wp * 12 * f];
        let mut intr = Vec::with_capacity(sets.len() * n * 8 * f);
        for (b, set) in sets.iter().enumerate() {
            if set.len() != n || set.size() != (w, h) {
                return Err(Error::Shape("image sets in a batch must share count and size".into()));
            }
            for img in &set.images {
                pixels.extend(to_chw(img));
            }
            for k in &set.intrinsics {
                let vals = [
                    (k.fx / w as f64) as f32,
                    (k.fy / h as f64) as f32,
                    (k.cx / w as f64) as f32,
                    (k.cy / h as f64) as f32,
                ];
                intr.extend(nn::sinusoidal_features(&vals, 4, f));
            }
            // anchor tokens come first in token order
            let pose = &set.anchor_pose;
            let (sx, sy) = (pose.width() as f64 / w as f64, pose.height() as f64 / h as f64);
            let mut plucker = Vec::with_capacity(hp * wp * 6);
            for row in 0..hp {
                for col in 0..wp {
                    let x = ((col as f64 + 0.5) * p as f64) * sx;
                    let y = ((row as f64 + 0.5) * p as f64) * sy;
                    plucker.extend(plucker_encode(&pose.ray_through(x, y)).to_array().map(|v| v as f32));
                }
            }
            let enc = nn::sinusoidal_features(&plucker, 6, f);
            let base = b * n * hp * wp * 12 * f;
            camera[base..base + enc.len()].copy_from_slice(&enc);
        }
        let dev = &self.device;
        Ok(SrtInputs {
            images: Tensor::from_vec(pixels, (sets.len() * n, 3, h as usize, w as usize), dev)?.to_dtype(self.dtype)?,
            camera: Tensor::from_vec(camera, (sets.len(), n * hp * wp, 12 * f), dev)?.to_dtype(self.dtype)?,
            intrinsics: Tensor::from_vec(intr, (sets.len(), n, 8 * f), dev)?.to_dtype(self.dtype)?,
            batch: sets.len(),
            views: n,
        })
    }

    /// Patch tokens with all encodings added, `(B, N·hp·wp, D)`.
    pub fn patchify(&self, inputs: &SrtInputs) -> Result<SetLatent> {
        let mut x = inputs.images.clone();
        for (i, conv) in self.patch_convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.patch_convs.len() {
                x = x.gelu()?;
            }
        }
        let (bn, d, hp, wp) = x.dims4()?;
        let (b, n) = (inputs.batch, inputs.views);
        debug_assert_eq!(bn, b * n);
        let per_image = hp * wp;
        let tokens = x
            .reshape((b, n, d, per_image))?
            .permute((0, 1, 3, 2))?
            .reshape((b, n * per_image, d))?;

        let f = self.cfg.num_freqs;
        let mut pos = Vec::with_capacity(per_image * 2);
        for row in 0..hp {
            for col in 0..wp {
                pos.push(((row as f64 + 0.5) / hp as f64 * 2.0 - 1.0) as f32);
                pos.push(((col as f64 + 0.5) / wp as f64 * 2.0 - 1.0) as f32);
            }
        }
        let pos = Tensor::from_vec(nn::sinusoidal_features(&pos, 2, f), (1, per_image, 4 * f), &self.device)?
            .to_dtype(self.dtype)?;
        let pos = self.pos_proj.forward(&pos)?.repeat((1, n, 1))?;

        let ids: Vec<u32> = (0..n)
            .flat_map(|i| std::iter::repeat_n(u32::from(i > 0), per_image))
            .collect();
        let ids = Tensor::from_vec(ids, n * per_image, &self.device)?;
        let id_emb = self.view_id.forward(&ids)?.unsqueeze(0)?;

        let cam = self.camera_proj.forward(&inputs.camera)?;
        let intr = self
            .intrinsics_proj
            .forward(&inputs.intrinsics)?
            .unsqueeze(2)?
            .broadcast_as((b, n, per_image, d))?
            .reshape((b, n * per_image, d))?;

        let tokens = tokens
            .broadcast_add(&pos)?
            .broadcast_add(&id_emb)?
            .add(&cam)?
            .add(&intr)?;
        let provenance = (0..n)
            .flat_map(|i| (0..hp).flat_map(move |r| (0..wp).map(move |c| (i, r, c))))
            .collect();
        Ok(SetLatent { tokens, provenance })
    }

    /// Token-wise transformer encoder; no pooling.
    pub fn encode(&self, tokens: &SetLatent) -> Result<SetLatent> {
        let mut x = tokens.tokens.clone();
        for blk in &self.encoder {
            x = blk.forward(&x)?;
        }
        Ok(SetLatent {
            tokens: x,
            provenance: tokens.provenance.clone(),
        })
    }

    /// Embeds `(B, R, 6)` Plücker query rays.
    fn embed_rays(&self, plucker: &Tensor) -> Result<Tensor> {
        let (b, r, _) = plucker.dims3()?;
        let vals: Vec<f32> = plucker.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let f = self.cfg.num_freqs;
        let enc = Tensor::from_vec(nn::sinusoidal_features(&vals, 6, f), (b, r, 12 * f), &self.device)?
            .to_dtype(self.dtype)?;
        Ok(self.ray_proj.forward(&enc)?)
    }

    /// Per-ray decoder features for `(B, R, 6)` Plücker query rays.
    pub fn decode_rays(&self, plucker: &Tensor, c_s: &SetLatent) -> Result<Tensor> {
        let mut x = self.embed_rays(plucker)?;
        for blk in &self.decoder {
            x = blk.forward(&x, &c_s.tokens)?;
        }
        Ok(x)
    }

    /// Decoder features aligned with full query ray grids.
    pub fn decode(&self, queries: &[&RayGrid], c_s: &SetLatent) -> Result<DecoderFeatures> {
        let first = queries
            .first()
            .ok_or_else(|| Error::EmptyInput("no query grids".into()))?;
        let plucker = plucker_tensor(queries, self.dtype, &self.device)?;
        Ok(DecoderFeatures {
            features: self.decode_rays(&plucker, c_s)?,
            height: first.height,
            width: first.width,
        })
    }

    /// RGB in `[0, 1]` from `(.., D)` decoder features.
    pub fn render_rgb(&self, features: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.rgb_head.forward(features)?)?)
    }

    /// Set latent for a batch of image sets.
    pub fn set_latent(&self, sets: &[&ImageSet]) -> Result<SetLatent> {
        let inputs = self.prepare(sets)?;
        self.encode(&self.patchify(&inputs)?)
    }
}

/// Mean squared error against the white-composited target. `mask`, when
/// given, has the shape of `gt` minus its last (channel) axis.
pub fn srt_loss(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let target = match mask {
        None => gt.clone(),
        Some(m) => {
            let m = m.unsqueeze(D::Minus1)?.to_dtype(gt.dtype())?;
            if m.dims()[..m.rank() - 1] != gt.dims()[..gt.rank() - 1] {
                return Err(Error::Shape("mask shape does not match target".into()));
            }
            let m = m.broadcast_as(gt.shape())?;
            (gt.mul(&m)? + (1.0 - &m)?)?
        }
    };
    Ok(nn::mse(pred, &target)?)
}

/// One training or evaluation example in the anchored frame.
#[derive(Debug, Clone)]
pub struct SrtExample {
    pub set: ImageSet,
    /// White-composited target view.
    pub target: Rgb32FImage,
    /// Target camera in the anchored frame, at the working resolution.
    pub target_pose: CameraPose,
}

/// Maximum number of poses used to locate the anchor point.
pub const ANCHOR_POSES: usize = 8;

fn working_image(view: &ViewRecord, size: u32) -> Result<Rgb32FImage> {
    let img = composite_white(&to_float(&view.image), &view.mask)?;
    let w = img.width();
    if w == size {
        return Ok(img);
    }
    if w % size != 0 || img.height() != w {
        return Err(Error::Shape(format!("cannot resample {w}px view to {size}px")));
    }
    Ok(downsample(&img, w / size))
}

/// Builds an example from a posed scene. `context[0]` is the anchor; the
/// anchor point is solved from the anchor's axis together with up to
/// [`ANCHOR_POSES`] of the scene's views.
pub fn make_example(scene: &SceneRecord, context: &[usize], target: usize, size: u32) -> Result<SrtExample> {
    let &anchor = context
        .first()
        .ok_or_else(|| Error::EmptyInput("example needs a context view".into()))?;
    let n = scene.views.len();
    if context.iter().chain([&target]).any(|&i| i >= n) {
        return Err(Error::Shape(format!("view index out of range for {n} views")));
    }
    let mut poses = vec![scene.views[anchor].pose.clone()];
    poses.extend(
        (0..n)
            .filter(|&i| i != anchor)
            .take(ANCHOR_POSES - 1)
            .map(|i| scene.views[i].pose.clone()),
    );
    let (sim, _) = anchor_frame(&poses)?;
    let images = context
        .iter()
        .map(|&i| working_image(&scene.views[i], size))
        .collect::<Result<Vec<_>>>()?;
    let intrinsics = context
        .iter()
        .map(|&i| Ok(*scene.views[i].pose.with_resolution(size, size)?.intrinsics()))
        .collect::<Result<Vec<_>>>()?;
    let anchor_pose = scene.views[anchor].pose.transformed(&sim).with_resolution(size, size)?;
    Ok(SrtExample {
        set: ImageSet::new(images, None, intrinsics, anchor_pose)?,
        target: working_image(&scene.views[target], size)?,
        target_pose: scene.views[target].pose.transformed(&sim).with_resolution(size, size)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrtTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Context views per example are drawn from `1..=max_views`.
    pub max_views: usize,
    /// Random target pixels supervised per example.
    pub rays_per_view: usize,
    pub seed: u64,
}

impl Default for SrtTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 0.0,
            warmup: 100,
            max_views: 3,
            rays_per_view: 512,
            seed: 0,
        }
    }
}

pub struct SrtTrainer {
    pub store: ParamStore,
    pub model: SrtModel,
    cfg: SrtTrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl SrtTrainer {
    pub fn new(model_cfg: &SrtConfig, cfg: SrtTrainConfig, device: &Device) -> Result<Self> {
        let store = ParamStore::new(cfg.seed);
        let model = SrtModel::new(model_cfg, store.var_builder(DType::F32, device))?;
        Self::from_parts(store, model, cfg)
    }

    pub fn from_parts(store: ParamStore, model: SrtModel, cfg: SrtTrainConfig) -> Result<Self> {
        if cfg.max_views == 0 || cfg.batch_size == 0 || cfg.rays_per_view == 0 {
            return Err(Error::bad_config(
                "srt_train",
                "max_views, batch_size and rays_per_view must be positive",
            ));
        }
        let opt = AdamW::new(
            store.all_vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a7_7a1e);
        Ok(Self {
            store,
            model,
            cfg,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Draws a random example: view count, anchor, context and target.
    pub fn sample_example(&mut self, scenes: &[&SceneRecord], views: usize) -> Result<SrtExample> {
        let scene = scenes[self.rng.random_range(0..scenes.len())];
        let n = scene.views.len();
        if n < 2 {
            return Err(Error::CorruptDataset(format!(
                "scene {} has fewer than 2 views",
                scene.spec.seed
            )));
        }
        let views = views.min(n - 1);
        let chosen = rand::seq::index::sample(&mut self.rng, n, views + 1).into_vec();
        let size = self.model.config().image_size as u32;
        make_example(scene, &chosen[..views], chosen[views], size)
    }

    /// One optimizer update on a random batch; returns the loss.
    pub fn train_step(&mut self, scenes: &[&SceneRecord]) -> Result<f32> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput("no training scenes".into()));
        }
        let views = self.rng.random_range(1..=self.cfg.max_views);
        let examples = (0..self.cfg.batch_size)
            .map(|_| self.sample_example(scenes, views))
            .collect::<Result<Vec<_>>>()?;
        let size = self.model.config().image_size;
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for ex in &examples {
            let idx = rand::seq::index::sample(&mut self.rng, size * size, self.cfg.rays_per_view.min(size * size));
            for i in idx {
                let (u, v) = ((i % size) as u32, (i / size) as u32);
                rays.extend(
                    plucker_encode(&ex.target_pose.pixel_ray(u, v))
                        .to_array()
                        .map(|x| x as f32),
                );
                colors.extend(ex.target.get_pixel(u, v).0);
            }
        }
        let dev = self.model.device().clone();
        let (b, r) = (examples.len(), rays.len() / 6 / examples.len());
        let plucker = Tensor::from_vec(rays, (b, r, 6), &dev)?;
        let gt = Tensor::from_vec(colors, (b, r, 3), &dev)?;
        let sets: Vec<&ImageSet> = examples.iter().map(|e| &e.set).collect();
        let latent = self.model.set_latent(&sets)?;
        let pred = self.model.render_rgb(&self.model.decode_rays(&plucker, &latent)?)?;
        let loss = srt_loss(&pred, &gt, None)?;
        let warm = ((self.step + 1) as f64 / self.cfg.warmup.max(1) as f64).min(1.0);
        self.opt.set_learning_rate(self.cfg.lr * warm);
        self.opt.backward_step(&loss)?;
        self.step += 1;
        Ok(loss.to_scalar::<f32>()?)
    }
}

/// Decoder features for a full query camera.
pub fn features_for_pose(model: &SrtModel, latent: &SetLatent, pose: &CameraPose) -> Result<DecoderFeatures> {
    model.decode(&[&camera_rays(pose)], latent)
}

/// Renders `pose` from the set latent of `set`.
pub fn render_view(model: &SrtModel, set: &ImageSet, pose: &CameraPose) -> Result<Rgb32FImage> {
    let latent = model.set_latent(&[set])?;
    let feats = features_for_pose(model, &latent, pose)?;
    let rgb = model.render_rgb(&feats.features)?.squeeze(0)?;
    rows_to_image(&rgb, feats.width, feats.height)
}

/// Mean pixel MSE of full-view renders against the targets.
pub fn heldout_mse(model: &SrtModel, examples: &[SrtExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no evaluation examples".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total += crate::eval::mse(&render_view(model, &ex.set, &ex.target_pose)?, &ex.target)?;
    }
    Ok(total / examples.len() as f64)
}
