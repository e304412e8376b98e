//! Shared fixtures for the benchmarks.

use candle_core::{DType, Device, Tensor};
use image::Rgb32FImage;
use nvs_core::data::{default_focal, generate_scene, SceneRecord};
use nvs_core::diffusion::{Conditioning, DenoiserConfig, DenoiserNet};
use nvs_core::distill::{orbit_pose, HashGridConfig, NeuralField};
use nvs_core::imaging::{composite_white, to_float};
use nvs_core::nn::ParamStore;
use nvs_core::{CameraPose, Intrinsics, Result};

pub fn orbit(size: u32, az: f64) -> Result<CameraPose> {
    let k = Intrinsics::centered(default_focal(size), size, size);
    orbit_pose(az, 0.3, 1.0, k, size, size)
}

/// Ground truth and a shifted copy of one rendered view.
pub fn image_pair(size: u32) -> Result<(Rgb32FImage, Rgb32FImage)> {
    let scene = SceneRecord::render(generate_scene(1), 2, 1, size)?;
    let img = |i: usize| composite_white(&to_float(&scene.views[i].image), &scene.views[i].mask);
    Ok((img(0)?, img(1)?))
}

pub fn field(cfg: &HashGridConfig) -> Result<(ParamStore, NeuralField)> {
    let store = ParamStore::new(0);
    let f = NeuralField::new(cfg, store.var_builder(DType::F32, &Device::Cpu))?;
    Ok((store, f))
}

/// A denoiser with random conditioning of the matching shape.
pub fn denoiser(cfg: &DenoiserConfig, batch: usize) -> Result<(ParamStore, DenoiserNet, Tensor, Conditioning)> {
    let dev = Device::Cpu;
    let store = ParamStore::new(0);
    let net = DenoiserNet::new(cfg, store.var_builder(DType::F32, &dev))?;
    let s = cfg.image_size;
    let x = Tensor::randn(0f32, 1.0, (batch, 3, s, s), &dev)?;
    let c_d = Tensor::randn(0f32, 1.0, (batch, cfg.cond_channels, s, s), &dev)?;
    let rays = Tensor::randn(0f32, 1.0, (batch, 6, s, s), &dev)?;
    let c_s = Tensor::randn(0f32, 1.0, (batch, 16, cfg.context_dim), &dev)?;
    Ok((store, net, x, Conditioning::new(c_d, c_s, rays)?))
}
