//! Stage orchestration: configuration, checkpoints, predictions, metrics
//! and reports. Stages communicate only through files under the run's
//! output directory:
//!
//! ```text
//! <out>/data/                     dataset
//! <out>/srt/, <out>/diffusion/    checkpoints (weights + manifest)
//! <out>/distill/scene_<s>/v<V>/   turntables, field weights, audit
//! <out>/predictions/<method>/scene_<s>/v<V>/view_<k>.png
//! <out>/eval/                     metrics.csv, baseline.csv, grid.png
//! <out>/report/                   report.md, report.json
//! ```
//!
//! Every stage writes `resolved_config.toml` and `stage.json` next to its
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use image::{Rgb, Rgb32FImage};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, read_dataset, write_dataset, Dataset, SceneRecord};
use crate::diffusion::{
    condition_from_srt, ddim_sample, make_schedule, CondMode, Conditioning, DenoiserConfig, DenoiserNet,
    DiffusionTrainConfig, DiffusionTrainer,
};
use crate::distill::{orbit_pose, DistillConfig, Distiller, Teacher};
use crate::error::{Error, Result};
use crate::eval::{aligned_metrics_with, read_csv, summary_rows, write_csv, MetricRow, WarpFitConfig};
use crate::geometry::CameraPose;
use crate::imaging::{composite_white, grid, images_to_tensor, save_png, to_float};
use crate::nn::ParamStore;
use crate::srt::{
    canonical_anchor_pose, make_example, render_view, ImageSet, SrtConfig, SrtExample, SrtModel, SrtTrainConfig,
    SrtTrainer,
};

pub const DETERMINISTIC_ENV: &str = "NVS_DETERMINISTIC";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainSrt,
    TrainDiffusion,
    Distill,
    Render,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainSrt,
        Stage::TrainDiffusion,
        Stage::Distill,
        Stage::Render,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainSrt => "train-srt",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::Distill => "distill",
            Stage::Render => "render",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::bad_config("stage", format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_scenes: usize,
    pub views: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            views: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_weight: f64,
    /// Only the deterministic sampler (0) is supported.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance_weight: 9.0,
            eta: 0.0,
        }
    }
}

/// Source of the images scored by `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMethod {
    /// Renders of the distilled field.
    Distill,
    /// Direct guided samples of the denoiser.
    Sample,
    /// Regression renders of the scene transformer.
    Srt,
}

impl PredictMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PredictMethod::Distill => "distill",
            PredictMethod::Sample => "sample",
            PredictMethod::Srt => "srt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub context_views: Vec<usize>,
    pub instances_per_bucket: usize,
    /// Optional cap on the total number of held-out instances.
    pub max_instances: Option<usize>,
    /// Held-out query views per instance, taken after the largest context.
    pub queries_per_instance: usize,
    pub method: PredictMethod,
    pub warp: WarpFitConfig,
    /// Instances shown in the comparison grid.
    pub grid_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_views: vec![1, 3, 6],
            instances_per_bucket: 5,
            max_instances: None,
            queries_per_instance: 2,
            method: PredictMethod::Distill,
            warp: WarpFitConfig::default(),
            grid_rows: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub srt_checkpoint: Option<PathBuf>,
    pub diffusion_checkpoint: Option<PathBuf>,
    pub image_size: u32,
    pub cond: CondMode,
    pub data: DataConfig,
    pub srt: SrtConfig,
    pub srt_train: SrtTrainConfig,
    pub diffusion: DenoiserConfig,
    pub diffusion_train: DiffusionTrainConfig,
    pub sampler: SamplerConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs/default"),
            dataset: None,
            srt_checkpoint: None,
            diffusion_checkpoint: None,
            image_size: 64,
            cond: CondMode::Both,
            data: DataConfig::default(),
            srt: SrtConfig::default(),
            srt_train: SrtTrainConfig::default(),
            diffusion: DenoiserConfig::default(),
            diffusion_train: DiffusionTrainConfig::default(),
            sampler: SamplerConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// A tiny configuration that runs every stage in seconds on a CPU.
    pub fn smoke(out: impl Into<PathBuf>) -> Self {
        let mut cfg = Self {
            out: out.into(),
            image_size: 16,
            data: DataConfig {
                num_scenes: 6,
                views: 5,
            },
            srt: SrtConfig {
                dim: 32,
                heads: 4,
                encoder_depth: 1,
                decoder_depth: 1,
                mlp_ratio: 2,
                patch_size: 4,
                image_size: 16,
                num_freqs: 4,
            },
            srt_train: SrtTrainConfig {
                steps: 20,
                batch_size: 2,
                rays_per_view: 64,
                warmup: 5,
                ..Default::default()
            },
            diffusion: DenoiserConfig {
                base_channels: 8,
                heads: 2,
                ..Default::default()
            },
            diffusion_train: DiffusionTrainConfig {
                steps: 10,
                batch_size: 2,
                timesteps: 100,
                warmup: 5,
                ..Default::default()
            },
            sampler: SamplerConfig {
                steps: 4,
                ..Default::default()
            },
            distill: DistillConfig {
                total_iters: 4,
                warmup_iters: 2,
                ddim_steps: 3,
                samples_per_ray: 16,
                render_size: 8,
                turntable_frames: 4,
                grid: crate::distill::HashGridConfig {
                    levels: 4,
                    log2_table: 12,
                    mlp_width: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            eval: EvalConfig {
                context_views: vec![1, 2, 3],
                instances_per_bucket: 1,
                queries_per_instance: 1,
                warp: WarpFitConfig {
                    iterations: 30,
                    restarts: 1,
                    ..Default::default()
                },
                grid_rows: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.resolve();
        cfg
    }

    /// Propagates the shared keys (seed, image size, SRT width, conditioning
    /// mode) into the stage sections.
    pub fn resolve(&mut self) {
        self.srt.image_size = self.image_size as usize;
        self.diffusion.image_size = self.image_size as usize;
        self.diffusion.context_dim = self.srt.dim;
        self.diffusion.cond_channels = self.srt.dim + 6;
        self.srt_train.seed = self.seed;
        self.diffusion_train.seed = self.seed;
        self.diffusion_train.cond_mode = self.cond;
        self.distill.seed = self.seed;
        self.distill.guidance_weight = self.sampler.guidance_weight;
        self.eval.warp.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.srt.validate()?;
        self.diffusion.validate()?;
        self.distill.validate()?;
        if self.sampler.eta != 0.0 {
            return Err(Error::bad_config(
                "sampler.eta",
                "only the deterministic sampler (eta = 0) is supported",
            ));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.diffusion_train.timesteps {
            return Err(Error::bad_config(
                "sampler.steps",
                "must lie in 1..=diffusion_train.timesteps",
            ));
        }
        if !(self.image_size as usize).is_multiple_of(self.distill.render_size) {
            return Err(Error::bad_config("distill.render_size", "must divide image_size"));
        }
        let max_v = self.eval.context_views.iter().copied().max().unwrap_or(0);
        if self.eval.context_views.contains(&0) || max_v == 0 {
            return Err(Error::bad_config("eval.context_views", "need positive view counts"));
        }
        if max_v + self.eval.queries_per_instance > self.data.views {
            return Err(Error::bad_config(
                "eval.queries_per_instance",
                "largest context plus queries exceeds data.views",
            ));
        }
        if self.data.views < 2 || self.data.num_scenes == 0 {
            return Err(Error::bad_config("data", "need at least one scene and two views"));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn srt_dir(&self) -> PathBuf {
        self.srt_checkpoint.clone().unwrap_or_else(|| self.out.join("srt"))
    }

    pub fn diffusion_dir(&self) -> PathBuf {
        self.diffusion_checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("diffusion"))
    }

    pub fn predictions_dir(&self, method: PredictMethod) -> PathBuf {
        self.out.join("predictions").join(method.name())
    }
}

/// True when `NVS_DETERMINISTIC=1`.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// In deterministic mode pins CPU kernels to one thread so reductions run
/// in a fixed order. Must run before the first tensor operation.
pub fn configure_determinism() -> bool {
    let on = deterministic_requested();
    if on {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    on
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// SHA-256 of `"blob <len>\0" ‖ content`, the git object hash construction.
pub fn git_blob_sha256(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

/// Order-independent digest of every parameter value in a store.
pub fn store_digest(store: &ParamStore) -> Result<String> {
    let mut h = Sha256::new();
    for (name, var) in store.vars() {
        h.update(name.as_bytes());
        let v: Vec<f64> = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub sha256: String,
    pub seed: u64,
    pub steps: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    architecture: &impl Serialize,
    store: &ParamStore,
    seed: u64,
    steps: usize,
) -> Result<CheckpointManifest> {
    mkdir(dir)?;
    let weights = dir.join(WEIGHTS_FILE);
    store.save(&weights)?;
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        architecture: serde_json::to_value(architecture)?,
        sha256: git_blob_sha256(&read_file(&weights)?),
        seed,
        steps,
    };
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads and verifies a checkpoint manifest. A missing checkpoint is a
/// [`Error::MissingDependency`] naming `kind`.
pub fn load_manifest(dir: &Path, kind: &str) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() || !dir.join(WEIGHTS_FILE).exists() {
        return Err(Error::MissingDependency(kind.to_string()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&read_file(&path)?)?;
    if manifest.kind != kind {
        return Err(Error::CorruptCheckpoint(format!(
            "{} holds a {} checkpoint, expected {kind}",
            dir.display(),
            manifest.kind
        )));
    }
    let actual = git_blob_sha256(&read_file(&dir.join(WEIGHTS_FILE))?);
    if actual != manifest.sha256 {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: weights hash {actual} does not match manifest {}",
            dir.display(),
            manifest.sha256
        )));
    }
    Ok(manifest)
}

pub fn load_srt(dir: &Path, device: &Device) -> Result<(ParamStore, SrtModel, CheckpointManifest)> {
    let manifest = load_manifest(dir, "srt")?;
    let cfg: SrtConfig = serde_json::from_value(manifest.architecture.clone())?;
    let store = ParamStore::new(manifest.seed);
    let model = SrtModel::new(&cfg, store.var_builder(DType::F32, device))?;
    store.load(dir.join(WEIGHTS_FILE))?;
    Ok((store, model, manifest))
}

pub fn load_denoiser(dir: &Path, device: &Device) -> Result<(ParamStore, DenoiserNet, CheckpointManifest)> {
    let manifest = load_manifest(dir, "diffusion")?;
    let cfg: DenoiserConfig = serde_json::from_value(manifest.architecture.clone())?;
    let store = ParamStore::new(manifest.seed);
    let net = DenoiserNet::new(&cfg, store.var_builder(DType::F32, device))?;
    store.load(dir.join(WEIGHTS_FILE))?;
    Ok((store, net, manifest))
}

/// Evidence that a frozen model was not modified by a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenAudit {
    pub kind: String,
    pub file_sha256_before: String,
    pub file_sha256_after: String,
    pub weights_digest_before: String,
    pub weights_digest_after: String,
}

impl FrozenAudit {
    pub fn unchanged(&self) -> bool {
        self.file_sha256_before == self.file_sha256_after && self.weights_digest_before == self.weights_digest_after
    }
}

struct FrozenWatch {
    kind: String,
    dir: PathBuf,
    file_before: String,
    digest_before: String,
}

impl FrozenWatch {
    fn start(kind: &str, dir: &Path, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            dir: dir.to_path_buf(),
            file_before: git_blob_sha256(&read_file(&dir.join(WEIGHTS_FILE))?),
            digest_before: store_digest(store)?,
        })
    }

    fn finish(self, store: &ParamStore) -> Result<FrozenAudit> {
        Ok(FrozenAudit {
            kind: self.kind,
            file_sha256_before: self.file_before,
            file_sha256_after: git_blob_sha256(&read_file(&self.dir.join(WEIGHTS_FILE))?),
            weights_digest_before: self.digest_before,
            weights_digest_after: store_digest(store)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub seed: u64,
    pub deterministic: bool,
    pub frozen: Vec<FrozenAudit>,
    pub details: serde_json::Value,
}

fn finish_stage(
    cfg: &RunConfig,
    stage: Stage,
    dir: &Path,
    frozen: Vec<FrozenAudit>,
    details: serde_json::Value,
) -> Result<StageReport> {
    mkdir(dir)?;
    write_file(&dir.join(SNAPSHOT_FILE), cfg.to_toml()?)?;
    let report = StageReport {
        stage: stage.name().to_string(),
        seed: cfg.seed,
        deterministic: deterministic_requested(),
        frozen,
        details,
    };
    write_file(&dir.join(STAGE_FILE), serde_json::to_string_pretty(&report)?)?;
    if let Some(bad) = report.frozen.iter().find(|a| !a.unchanged()) {
        return Err(Error::CorruptCheckpoint(format!(
            "frozen {} weights changed during {}",
            bad.kind,
            stage.name()
        )));
    }
    Ok(report)
}

/// Runs one stage.
pub fn run(cfg: &RunConfig, stage: Stage) -> Result<StageReport> {
    let mut cfg = cfg.clone();
    cfg.resolve();
    cfg.validate()?;
    info!("stage {} → {}", stage.name(), cfg.out.display());
    let device = Device::Cpu;
    match stage {
        Stage::GenData => gen_data(&cfg),
        Stage::TrainSrt => train_srt(&cfg, &device),
        Stage::TrainDiffusion => train_diffusion(&cfg, &device),
        Stage::Distill => distill_stage(&cfg, &device),
        Stage::Render => render_stage(&cfg, &device),
        Stage::Eval => eval_stage(&cfg),
        Stage::Report => report_stage(&cfg),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<StageReport> {
    let scenes = generate_dataset(cfg.seed, cfg.data.num_scenes, cfg.data.views, cfg.image_size)?;
    let root = cfg.dataset_dir();
    let index = write_dataset(&root, &scenes, cfg.image_size)?;
    let train = index.scenes.iter().filter(|s| s.split == "train").count();
    finish_stage(
        cfg,
        Stage::GenData,
        &root,
        vec![],
        serde_json::json!({ "scenes": index.scenes.len(), "train": train, "val": index.scenes.len() - train }),
    )
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.dataset_dir();
    if !root.join("index.json").exists() {
        return Err(Error::MissingDependency("dataset".into()));
    }
    let ds = read_dataset(&root)?;
    if ds.index.image_size != cfg.image_size {
        return Err(Error::bad_config(
            "image_size",
            format!("dataset was generated at {}px", ds.index.image_size),
        ));
    }
    Ok(ds)
}

fn write_losses(path: &Path, losses: &[f32]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    write_file(path, s)
}

fn train_srt(cfg: &RunConfig, device: &Device) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let train: Vec<&SceneRecord> = ds.train().collect();
    let mut trainer = SrtTrainer::new(&cfg.srt, cfg.srt_train.clone(), device)?;
    let mut losses = Vec::with_capacity(cfg.srt_train.steps);
    for step in 0..cfg.srt_train.steps {
        let l = trainer.train_step(&train)?;
        if step % 100 == 0 {
            info!("train-srt step {step} loss {l:.5}");
        }
        losses.push(l);
    }
    let dir = cfg.srt_dir();
    let manifest = save_checkpoint(&dir, "srt", &cfg.srt, &trainer.store, cfg.seed, cfg.srt_train.steps)?;
    write_losses(&dir.join("losses.csv"), &losses)?;
    finish_stage(
        cfg,
        Stage::TrainSrt,
        &dir,
        vec![],
        serde_json::json!({ "sha256": manifest.sha256, "final_loss": losses.last() }),
    )
}

/// Stacks conditioning and targets for examples that share a view count.
fn diffusion_batch(srt: &SrtModel, examples: &[SrtExample]) -> Result<(candle_core::Tensor, Conditioning)> {
    let conds = examples
        .iter()
        .map(|ex| {
            let latent = srt.set_latent(&[&ex.set])?;
            condition_from_srt(srt, &latent, &ex.target_pose)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Conditioning> = conds.iter().collect();
    let targets: Vec<&Rgb32FImage> = examples.iter().map(|e| &e.target).collect();
    Ok((
        images_to_tensor(&targets, DType::F32, srt.device())?,
        Conditioning::cat(&refs)?,
    ))
}

fn train_diffusion(cfg: &RunConfig, device: &Device) -> Result<StageReport> {
    let (srt_store, srt, _) = load_srt(&cfg.srt_dir(), device)?;
    let watch = FrozenWatch::start("srt", &cfg.srt_dir(), &srt_store)?;
    let ds = load_dataset(cfg)?;
    let train: Vec<&SceneRecord> = ds.train().collect();
    let mut trainer = DiffusionTrainer::new(&cfg.diffusion, cfg.diffusion_train.clone(), DType::F32, device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff);
    let size = cfg.image_size;
    let mut losses = Vec::with_capacity(cfg.diffusion_train.steps);
    for step in 0..cfg.diffusion_train.steps {
        let views = rng.random_range(1..=cfg.srt_train.max_views);
        let examples = (0..cfg.diffusion_train.batch_size)
            .map(|_| {
                let scene = train[rng.random_range(0..train.len())];
                let n = scene.views.len();
                let v = views.min(n - 1);
                let chosen = rand::seq::index::sample(&mut rng, n, v + 1).into_vec();
                make_example(scene, &chosen[..v], chosen[v], size)
            })
            .collect::<Result<Vec<_>>>()?;
        let (targets, cond) = diffusion_batch(&srt, &examples)?;
        let l = trainer.train_step(&targets, &cond)?;
        if step % 100 == 0 {
            info!("train-diffusion step {step} loss {l:.5}");
        }
        losses.push(l);
    }
    let dir = cfg.diffusion_dir();
    let manifest = save_checkpoint(
        &dir,
        "diffusion",
        &cfg.diffusion,
        &trainer.store,
        cfg.seed,
        cfg.diffusion_train.steps,
    )?;
    write_losses(&dir.join("losses.csv"), &losses)?;
    let audit = watch.finish(&srt_store)?;
    finish_stage(
        cfg,
        Stage::TrainDiffusion,
        &dir,
        vec![audit],
        serde_json::json!({ "sha256": manifest.sha256, "cond": cfg.cond, "final_loss": losses.last() }),
    )
}

/// One evaluation case: an instance, its context views and held-out
/// queries.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub scene_index: usize,
    pub seed: u64,
    pub bucket: String,
    pub context: Vec<usize>,
    pub queries: Vec<usize>,
}

impl EvalCase {
    pub fn dir_name(&self) -> PathBuf {
        PathBuf::from(format!("scene_{}", self.seed)).join(format!("v{}", self.context.len()))
    }
}

/// Held-out instances (up to `instances_per_bucket` per primitive bucket)
/// crossed with every context-view count. Context views are the first `V`
/// views; queries follow the largest context.
pub fn eval_cases(cfg: &RunConfig, ds: &Dataset) -> Vec<EvalCase> {
    let max_v = cfg.eval.context_views.iter().copied().max().unwrap_or(1);
    let mut per_bucket: BTreeMap<String, usize> = BTreeMap::new();
    let mut cases = Vec::new();
    let mut instances = 0;
    for (i, scene) in ds.scenes.iter().enumerate() {
        if scene.spec.is_train() || cfg.eval.max_instances.is_some_and(|m| instances >= m) {
            continue;
        }
        let bucket = scene.spec.bucket().to_string();
        let count = per_bucket.entry(bucket.clone()).or_default();
        if *count >= cfg.eval.instances_per_bucket {
            continue;
        }
        *count += 1;
        instances += 1;
        let queries: Vec<usize> = (max_v..max_v + cfg.eval.queries_per_instance).collect();
        for &v in &cfg.eval.context_views {
            cases.push(EvalCase {
                scene_index: i,
                seed: scene.spec.seed,
                bucket: bucket.clone(),
                context: (0..v).collect(),
                queries: queries.clone(),
            });
        }
    }
    cases
}

/// The context as the model sees it at inference: images and intrinsics
/// only, with the anchor at the canonical anchored-frame pose.
pub fn unposed_set(scene: &SceneRecord, context: &[usize], size: u32) -> Result<ImageSet> {
    let images = context
        .iter()
        .map(|&i| composite_white(&to_float(&scene.views[i].image), &scene.views[i].mask))
        .collect::<Result<Vec<_>>>()?;
    let intrinsics = context
        .iter()
        .map(|&i| Ok(*scene.views[i].pose.with_resolution(size, size)?.intrinsics()))
        .collect::<Result<Vec<_>>>()?;
    let anchor = canonical_anchor_pose(intrinsics[0], size, size)?;
    ImageSet::new(images, None, intrinsics, anchor)
}

/// Query camera in the anchored frame of `context`.
pub fn query_pose(scene: &SceneRecord, context: &[usize], query: usize, size: u32) -> Result<CameraPose> {
    Ok(make_example(scene, context, query, size)?.target_pose)
}

fn prediction_path(cfg: &RunConfig, method: PredictMethod, case: &EvalCase, query: usize) -> PathBuf {
    cfg.predictions_dir(method)
        .join(case.dir_name())
        .join(format!("view_{query}.png"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TurntableFrame {
    file: String,
    opacity_file: String,
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
    opacity_fraction: f64,
}

fn distill_stage(cfg: &RunConfig, device: &Device) -> Result<StageReport> {
    let (srt_store, srt, _) = load_srt(&cfg.srt_dir(), device)?;
    let (den_store, den, _) = load_denoiser(&cfg.diffusion_dir(), device)?;
    let srt_watch = FrozenWatch::start("srt", &cfg.srt_dir(), &srt_store)?;
    let den_watch = FrozenWatch::start("diffusion", &cfg.diffusion_dir(), &den_store)?;
    let ds = load_dataset(cfg)?;
    let sched = make_schedule(cfg.diffusion_train.timesteps)?;
    let size = cfg.image_size;
    let mut summaries = Vec::new();
    for case in eval_cases(cfg, &ds) {
        let scene = &ds.scenes[case.scene_index];
        let set = unposed_set(scene, &case.context, size)?;
        let latent = srt.set_latent(&[&set])?;
        let intrinsics = set.intrinsics[0];
        let teacher = Teacher {
            srt: &srt,
            denoiser: &den,
            sched: &sched,
            latent,
            intrinsics,
            image_size: size,
            mode: cfg.cond,
        };
        let mut dcfg = cfg.distill.clone();
        dcfg.seed = cfg.seed ^ case.seed.rotate_left(20) ^ case.context.len() as u64;
        let mut distiller = Distiller::new(teacher, dcfg, device)?;
        distiller.run(|s| {
            if s.iter % 100 == 0 {
                info!(
                    "distill scene {} {}V iter {} loss {:.5}",
                    case.seed,
                    case.context.len(),
                    s.iter,
                    s.loss
                );
            }
        })?;
        if !distiller.audit.uses_no_input_view_loss() {
            return Err(Error::bad_config("distill", "an input-view loss term was used"));
        }
        let dir = cfg.out.join("distill").join(case.dir_name());
        mkdir(&dir)?;
        let mut frames = Vec::new();
        let n = cfg.distill.turntable_frames;
        for (k, out) in distiller.turntable()?.iter().enumerate() {
            let file = format!("turntable_{k:03}.png");
            let opacity_file = format!("opacity_{k:03}.png");
            save_png(&out.image()?, dir.join(&file))?;
            let op = out.opacity_image()?;
            op.save(dir.join(&opacity_file))?;
            let nonzero = op.pixels().filter(|p| p[0] > 0).count() as f64 / op.len() as f64;
            frames.push(TurntableFrame {
                file,
                opacity_file,
                azimuth_deg: 360.0 * k as f64 / n as f64,
                elevation_deg: 15.0,
                radius: 1.0,
                opacity_fraction: nonzero,
            });
        }
        let anchor = orbit_pose(0.0, 0.0, 1.0, intrinsics, size, size)?;
        save_png(&distiller.render(&anchor)?.image()?, dir.join("anchor.png"))?;
        for &q in &case.queries {
            let pose = query_pose(scene, &case.context, q, size)?;
            let path = prediction_path(cfg, PredictMethod::Distill, &case, q);
            mkdir(path.parent().expect("prediction dir"))?;
            save_png(&distiller.render(&pose)?.image()?, path)?;
        }
        distiller.store.save(dir.join("field.safetensors"))?;
        let losses: Vec<f64> = distiller.history.iter().map(|s| s.loss).collect();
        write_file(
            &dir.join("turntable.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "frames": frames,
                "losses": losses,
                "audit": distiller.audit,
            }))?,
        )?;
        summaries.push(serde_json::json!({
            "scene": case.seed,
            "views": case.context.len(),
            "final_loss": losses.last(),
            "min_opacity_fraction": frames.iter().map(|f| f.opacity_fraction).fold(f64::INFINITY, f64::min),
        }));
    }
    let audits = vec![srt_watch.finish(&srt_store)?, den_watch.finish(&den_store)?];
    finish_stage(
        cfg,
        Stage::Distill,
        &cfg.out.join("distill"),
        audits,
        serde_json::json!({ "instances": summaries }),
    )
}

fn render_stage(cfg: &RunConfig, device: &Device) -> Result<StageReport> {
    let (srt_store, srt, _) = load_srt(&cfg.srt_dir(), device)?;
    let (den_store, den, _) = load_denoiser(&cfg.diffusion_dir(), device)?;
    let srt_watch = FrozenWatch::start("srt", &cfg.srt_dir(), &srt_store)?;
    let den_watch = FrozenWatch::start("diffusion", &cfg.diffusion_dir(), &den_store)?;
    let ds = load_dataset(cfg)?;
    let sched = make_schedule(cfg.diffusion_train.timesteps)?;
    let size = cfg.image_size;
    let mut written = 0;
    for case in eval_cases(cfg, &ds) {
        let scene = &ds.scenes[case.scene_index];
        let set = unposed_set(scene, &case.context, size)?;
        let latent = srt.set_latent(&[&set])?;
        for &q in &case.queries {
            let pose = query_pose(scene, &case.context, q, size)?;
            let cond = condition_from_srt(&srt, &latent, &pose)?.with_mode(cfg.cond)?;
            let seed = cfg.seed ^ case.seed.rotate_left(20) ^ ((case.context.len() as u64) << 8) ^ q as u64;
            let sample = ddim_sample(
                &den,
                &sched,
                &cond,
                cfg.sampler.steps,
                cfg.sampler.guidance_weight,
                seed,
            )?;
            let img = crate::imaging::tensor_to_image(&sample.squeeze(0)?)?;
            let path = prediction_path(cfg, PredictMethod::Sample, &case, q);
            mkdir(path.parent().expect("prediction dir"))?;
            save_png(&img, path)?;
            let path = prediction_path(cfg, PredictMethod::Srt, &case, q);
            mkdir(path.parent().expect("prediction dir"))?;
            save_png(&render_view(&srt, &set, &pose)?, path)?;
            written += 2;
        }
    }
    let audits = vec![srt_watch.finish(&srt_store)?, den_watch.finish(&den_store)?];
    finish_stage(
        cfg,
        Stage::Render,
        &cfg.out.join("predictions"),
        audits,
        serde_json::json!({ "images": written }),
    )
}

fn load_png(path: &Path) -> Result<Rgb32FImage> {
    if !path.exists() {
        return Err(Error::MissingDependency(format!("prediction {}", path.display())));
    }
    Ok(to_float(&image::open(path)?.to_rgb8()))
}

fn eval_stage(cfg: &RunConfig) -> Result<StageReport> {
    let ds = load_dataset(cfg)?;
    let size = cfg.image_size;
    let method = cfg.eval.method;
    let mut rows = Vec::new();
    let mut baseline = Vec::new();
    let mut grid_cells: BTreeMap<u64, Vec<(usize, Rgb32FImage)>> = BTreeMap::new();
    let mut grid_inputs: BTreeMap<u64, (Rgb32FImage, Rgb32FImage)> = BTreeMap::new();
    let white = Rgb32FImage::from_pixel(size, size, Rgb([1.0, 1.0, 1.0]));
    for case in eval_cases(cfg, &ds) {
        let scene = &ds.scenes[case.scene_index];
        let instance = format!("scene_{}", case.seed);
        for &q in &case.queries {
            let view = &scene.views[q];
            let gt = composite_white(&to_float(&view.image), &view.mask)?;
            let pred = load_png(&prediction_path(cfg, method, &case, q))?;
            let view_id = format!("view_{q}");
            let r = aligned_metrics_with(&pred, &gt, &cfg.eval.warp)?;
            rows.push(MetricRow::new(
                &case.bucket,
                &instance,
                case.context.len(),
                &view_id,
                &r,
            ));
            let b = aligned_metrics_with(&white, &gt, &cfg.eval.warp)?;
            baseline.push(MetricRow::new(
                &case.bucket,
                &instance,
                case.context.len(),
                &view_id,
                &b,
            ));
            if q == case.queries[0] {
                grid_cells
                    .entry(case.seed)
                    .or_default()
                    .push((case.context.len(), pred));
                let anchor = composite_white(&to_float(&scene.views[0].image), &scene.views[0].mask)?;
                grid_inputs.entry(case.seed).or_insert((anchor, gt));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no evaluation cases".into()));
    }
    let dir = cfg.out.join("eval");
    mkdir(&dir)?;
    let mut all = rows.clone();
    all.extend(summary_rows(&rows));
    let mut buf = Vec::new();
    write_csv(&mut buf, &all)?;
    write_file(&dir.join("metrics.csv"), &buf)?;
    let mut bl = baseline.clone();
    bl.extend(summary_rows(&baseline));
    let mut buf = Vec::new();
    write_csv(&mut buf, &bl)?;
    write_file(&dir.join("baseline.csv"), &buf)?;

    // rows: anchor input, ground truth, then one prediction per view count
    let mut cells = Vec::new();
    let cols = 2 + cfg.eval.context_views.len();
    for (seed, preds) in grid_cells.iter().take(cfg.eval.grid_rows) {
        let (anchor, gt) = &grid_inputs[seed];
        cells.push(anchor.clone());
        cells.push(gt.clone());
        let mut preds = preds.clone();
        preds.sort_by_key(|(v, _)| *v);
        cells.extend(preds.into_iter().map(|(_, p)| p));
    }
    save_png(&grid(&cells, cols, 2)?, dir.join("grid.png"))?;
    let mean = |r: &[MetricRow]| r.iter().map(|x| x.psnr_a).sum::<f64>() / r.len() as f64;
    finish_stage(
        cfg,
        Stage::Eval,
        &dir,
        vec![],
        serde_json::json!({
            "method": method,
            "rows": rows.len(),
            "mean_psnr_a": mean(&rows),
            "white_mean_psnr_a": mean(&baseline),
        }),
    )
}

/// Per-view-count means and the trend flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    /// `(#views, mean PSNR-A, mean SSIM-A)` sorted by view count.
    pub by_views: Vec<(usize, f64, f64)>,
    pub flag: String,
    pub white_psnr_a: Option<f64>,
}

pub const FLAG_FLAT: &str = "flat";
pub const FLAG_MONOTONE_UP: &str = "monotone-up";
pub const FLAG_NON_MONOTONE: &str = "non-monotone";

/// Tolerance below which two means count as equal.
const FLAT_TOL: f64 = 1e-9;

/// Summarizes an evaluation CSV: mean PSNR-A / SSIM-A per view count, and
/// whether quality rises with more context views.
pub fn render_report(rows: &[MetricRow]) -> Result<ViewReport> {
    let mut groups: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_summary()) {
        groups.entry(r.views).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("metrics CSV has no per-view rows".into()));
    }
    let by_views: Vec<(usize, f64, f64)> = groups
        .iter()
        .map(|(v, g)| {
            let n = g.len() as f64;
            (
                *v,
                g.iter().map(|r| r.psnr_a).sum::<f64>() / n,
                g.iter().map(|r| r.ssim_a).sum::<f64>() / n,
            )
        })
        .collect();
    let psnr: Vec<f64> = by_views.iter().map(|x| x.1).collect();
    let flag = if psnr.windows(2).all(|w| (w[1] - w[0]).abs() <= FLAT_TOL) {
        FLAG_FLAT
    } else if psnr.windows(2).all(|w| w[1] > w[0]) {
        FLAG_MONOTONE_UP
    } else {
        FLAG_NON_MONOTONE
    };
    Ok(ViewReport {
        by_views,
        flag: flag.to_string(),
        white_psnr_a: None,
    })
}

impl ViewReport {
    pub fn columns(&self) -> Vec<String> {
        self.by_views
            .iter()
            .flat_map(|(v, _, _)| [format!("{v}V PSNR-A"), format!("{v}V SSIM-A")])
            .collect()
    }

    pub fn markdown(&self) -> String {
        let cols = self.columns();
        let mut s = format!("| | {} |\n", cols.join(" | "));
        s.push_str(&format!("|---|{}\n", "---|".repeat(cols.len())));
        let vals: Vec<String> = self
            .by_views
            .iter()
            .flat_map(|(_, p, q)| [format!("{p:.2}"), format!("{q:.3}")])
            .collect();
        s.push_str(&format!("| mean | {} |\n", vals.join(" | ")));
        s.push_str(&format!("\ntrend: {}\n", self.flag));
        if let Some(w) = self.white_psnr_a {
            s.push_str(&format!("white-image baseline PSNR-A: {w:.2}\n"));
        }
        s
    }
}

fn report_stage(cfg: &RunConfig) -> Result<StageReport> {
    let eval_dir = cfg.out.join("eval");
    let path = eval_dir.join("metrics.csv");
    if !path.exists() {
        return Err(Error::MissingDependency("eval metrics".into()));
    }
    let rows = read_csv(&read_file(&path)?[..])?;
    let mut report = render_report(&rows)?;
    let baseline = eval_dir.join("baseline.csv");
    if baseline.exists() {
        let b = read_csv(&read_file(&baseline)?[..])?;
        let b: Vec<&MetricRow> = b.iter().filter(|r| !r.is_summary()).collect();
        if !b.is_empty() {
            report.white_psnr_a = Some(b.iter().map(|r| r.psnr_a).sum::<f64>() / b.len() as f64);
        }
    }
    let dir = cfg.out.join("report");
    write_file(&dir.join("report.md"), report.markdown())?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    finish_stage(cfg, Stage::Report, &dir, vec![], serde_json::to_value(&report)?)
}
