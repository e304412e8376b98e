//! Procedural multi-view dataset: random analytic primitive scenes rendered
//! by exact ray casting over a white background.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, PoseRecord, Ray, Vec3};

/// Every primitive lies inside this radius around the origin.
pub const SCENE_RADIUS: f64 = 0.7;
/// Half field of view of the generated cameras.
pub const HALF_FOV_DEG: f64 = 30.0;
const AMBIENT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        half_extents: [f64; 3],
    },
    /// Capped cylinder with its axis along world Y.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
        }
    }

    /// Radius of the smallest origin-centered ball containing the shape.
    pub fn extent(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h } => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
            Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Stripes { frequency: f64 },
    Checker { frequency: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
    pub texture: Option<Texture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            primitives: Vec::new(),
        }
    }

    /// Evaluation bucket: the shape type of the first primitive.
    pub fn bucket(&self) -> &'static str {
        self.primitives.first().map(|p| p.shape.name()).unwrap_or("empty")
    }

    pub fn is_train(&self) -> bool {
        is_train_seed(self.seed)
    }
}

/// Train/validation split by seed parity: even seeds train.
pub fn is_train_seed(seed: u64) -> bool {
    seed.is_multiple_of(2)
}

pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=4usize);
    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        // the first primitive is the largest and sits near the center
        let max_size = if i == 0 { 0.45 } else { 0.3 };
        let shape = match rng.random_range(0..3) {
            0 => Shape::Sphere {
                radius: rng.random_range(0.12..max_size),
            },
            1 => Shape::Box {
                half_extents: [
                    rng.random_range(0.08..max_size * 0.75),
                    rng.random_range(0.08..max_size * 0.75),
                    rng.random_range(0.08..max_size * 0.75),
                ],
            },
            _ => Shape::Cylinder {
                radius: rng.random_range(0.08..max_size * 0.75),
                half_height: rng.random_range(0.1..max_size * 0.75),
            },
        };
        let room = (SCENE_RADIUS - shape.extent()).max(0.0);
        let reach = if i == 0 { room.min(0.15) } else { room };
        let center = sample_in_ball(&mut rng, reach);
        let albedo = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let texture = match rng.random_range(0..3) {
            0 => None,
            1 => Some(Texture::Stripes {
                frequency: rng.random_range(3.0..10.0),
            }),
            _ => Some(Texture::Checker {
                frequency: rng.random_range(3.0..10.0),
            }),
        };
        primitives.push(Primitive {
            shape,
            center,
            albedo,
            texture,
        });
    }
    SceneSpec { seed, primitives }
}

fn sample_in_ball(rng: &mut impl Rng, radius: f64) -> [f64; 3] {
    loop {
        let p = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            return [p[0] * radius, p[1] * radius, p[2] * radius];
        }
    }
}

/// Focal length (pixels) for the dataset's field of view.
pub fn default_focal(size: u32) -> f64 {
    size as f64 / 2.0 / HALF_FOV_DEG.to_radians().tan()
}

/// Look-at-origin cameras with stratified azimuths: each azimuth lies in the
/// middle half of its stratum, so neighbours are at least half a stratum
/// apart.
pub fn sample_views(spec: &SceneSpec, n: usize, seed: u64, image_size: u32) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Err(Error::bad_config("views", "need at least one view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.seed.rotate_left(17) ^ 0x5E_ED0F_71E5);
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    let intr = Intrinsics::centered(default_focal(image_size), image_size, image_size);
    (0..n)
        .map(|k| {
            let stratum = std::f64::consts::TAU / n as f64;
            let az = offset + stratum * (k as f64 + 0.25 + 0.5 * rng.random::<f64>());
            let el = rng.random_range(-10.0f64..=50.0).to_radians();
            let r = rng.random_range(1.5..=2.5);
            let eye = Vec3::new(r * el.cos() * az.sin(), r * el.sin(), r * el.cos() * az.cos());
            CameraPose::look_at(eye, Vec3::zeros(), Vec3::y(), intr, image_size, image_size)
        })
        .collect()
}

/// Ray/primitive intersection: distance along the ray and outward normal.
pub fn intersect(prim: &Primitive, ray: &Ray) -> Option<(f64, Vec3)> {
    let c = Vec3::from_column_slice(&prim.center);
    let o = ray.origin - c;
    let d = ray.direction;
    match prim.shape {
        Shape::Sphere { radius } => {
            let b = o.dot(&d);
            let disc = b * b - (o.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > 1e-9 { -b - s } else { -b + s };
            (t > 1e-9).then(|| (t, (o + d * t) / radius))
        }
        Shape::Box { half_extents: h } => {
            let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis_min = 0;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > h[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-h[a] - o[a]) / d[a];
                let t2 = (h[a] - o[a]) / d[a];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > tmin {
                    tmin = lo;
                    axis_min = a;
                }
                tmax = tmax.min(hi);
            }
            if tmin > tmax || tmin <= 1e-9 {
                return None;
            }
            let mut n = Vec3::zeros();
            n[axis_min] = -d[axis_min].signum();
            Some((tmin, n))
        }
        Shape::Cylinder { radius, half_height } => {
            let mut best: Option<(f64, Vec3)> = None;
            let a = d.x * d.x + d.z * d.z;
            if a > 1e-15 {
                let b = o.x * d.x + o.z * d.z;
                let cc = o.x * o.x + o.z * o.z - radius * radius;
                let disc = b * b - a * cc;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let y = o.y + t * d.y;
                    if t > 1e-9 && y.abs() <= half_height {
                        let p = o + d * t;
                        best = Some((t, Vec3::new(p.x, 0.0, p.z) / radius));
                    }
                }
            }
            if d.y.abs() > 1e-15 {
                for cap in [-half_height, half_height] {
                    let t = (cap - o.y) / d.y;
                    let p = o + d * t;
                    if t > 1e-9 && p.x * p.x + p.z * p.z <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, Vec3::new(0.0, cap.signum(), 0.0)));
                    }
                }
            }
            best
        }
    }
}

fn texture_factor(prim: &Primitive, p: &Vec3) -> f64 {
    let local = p - Vec3::from_column_slice(&prim.center);
    match prim.texture {
        None => 1.0,
        Some(Texture::Stripes { frequency }) => {
            if (local.y * frequency).floor() as i64 % 2 == 0 {
                1.0
            } else {
                0.55
            }
        }
        Some(Texture::Checker { frequency }) => {
            let s = (local.x * frequency).floor() + (local.y * frequency).floor() + (local.z * frequency).floor();
            if s as i64 % 2 == 0 {
                1.0
            } else {
                0.55
            }
        }
    }
}

/// Nearest primitive hit along `ray`.
pub fn trace<'a>(spec: &'a SceneSpec, ray: &Ray) -> Option<(f64, Vec3, &'a Primitive)> {
    spec.primitives
        .iter()
        .filter_map(|p| intersect(p, ray).map(|(t, n)| (t, n, p)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Shaded color of a ray; `None` for background.
pub fn shade(spec: &SceneSpec, ray: &Ray) -> Option<[f64; 3]> {
    let light = Vec3::new(0.4, 0.8, 0.45).normalize();
    trace(spec, ray).map(|(t, n, prim)| {
        let p = ray.at(t);
        let lambert = n.dot(&light).max(0.0);
        let k = (AMBIENT + (1.0 - AMBIENT) * lambert) * texture_factor(prim, &p);
        [
            (prim.albedo[0] * k).min(1.0),
            (prim.albedo[1] * k).min(1.0),
            (prim.albedo[2] * k).min(1.0),
        ]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub pose: CameraPose,
    pub scene_id: u64,
    pub view_id: usize,
}

pub fn render_scene(spec: &SceneSpec, pose: &CameraPose, view_id: usize) -> ViewRecord {
    let (w, h) = (pose.width(), pose.height());
    let mut image = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut mask = GrayImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            if let Some(c) = shade(spec, &pose.pixel_ray(u, v)) {
                let q = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
                image.put_pixel(u, v, Rgb([q(c[0]), q(c[1]), q(c[2])]));
                mask.put_pixel(u, v, Luma([255]));
            }
        }
    }
    ViewRecord {
        image,
        mask,
        pose: pose.clone(),
        scene_id: spec.seed,
        view_id,
    }
}

/// One scene with all of its rendered views.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    pub fn render(spec: SceneSpec, views: usize, view_seed: u64, image_size: u32) -> Result<Self> {
        let poses = sample_views(&spec, views, view_seed, image_size)?;
        let views = poses
            .iter()
            .enumerate()
            .map(|(k, p)| render_scene(&spec, p, k))
            .collect();
        Ok(Self { spec, views })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneIndexEntry {
    pub seed: u64,
    pub dir: String,
    pub views: usize,
    pub bucket: String,
    pub split: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub image_size: u32,
    pub scenes: Vec<SceneIndexEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub scenes: Vec<SceneRecord>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(|s| s.spec.is_train())
    }

    pub fn val(&self) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(|s| !s.spec.is_train())
    }
}

fn scene_dir_name(seed: u64) -> String {
    format!("scene_{seed}")
}

fn scene_files(views: usize) -> Vec<String> {
    let mut files = vec!["scene.json".to_string()];
    for k in 0..views {
        files.push(format!("view_{k}.png"));
        files.push(format!("mask_{k}.png"));
        files.push(format!("pose_{k}.json"));
    }
    files
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png<P: image::PixelWithColorType, C: std::ops::Deref<Target = [P::Subpixel]>>(
    img: &image::ImageBuffer<P, C>,
) -> Result<Vec<u8>>
where
    P::Subpixel: image::Primitive,
    [P::Subpixel]: image::EncodableLayout,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_dataset(root: impl AsRef<Path>, scenes: &[SceneRecord], image_size: u32) -> Result<DatasetIndex> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let dir_name = scene_dir_name(scene.spec.seed);
        let dir = root.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        files.insert("scene.json".into(), serde_json::to_vec_pretty(&scene.spec)?);
        for view in &scene.views {
            let k = view.view_id;
            files.insert(format!("view_{k}.png"), encode_png(&view.image)?);
            files.insert(format!("mask_{k}.png"), encode_png(&view.mask)?);
            files.insert(
                format!("pose_{k}.json"),
                serde_json::to_vec_pretty(&view.pose.to_record())?,
            );
        }
        let mut hasher = Sha256::new();
        for name in scene_files(scene.views.len()) {
            let bytes = &files[&name];
            hasher.update(bytes);
            write(&dir.join(&name), bytes)?;
        }
        entries.push(SceneIndexEntry {
            seed: scene.spec.seed,
            dir: dir_name,
            views: scene.views.len(),
            bucket: scene.spec.bucket().to_string(),
            split: if scene.spec.is_train() { "train" } else { "val" }.to_string(),
            sha256: hex::encode(hasher.finalize()),
        });
    }
    let index = DatasetIndex {
        image_size,
        scenes: entries,
    };
    write(&root.join("index.json"), &serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let index_path = root.join("index.json");
    let index: DatasetIndex = serde_json::from_slice(
        &read(&index_path).map_err(|_| Error::CorruptDataset(format!("missing {}", index_path.display())))?,
    )?;
    let mut scenes = Vec::with_capacity(index.scenes.len());
    for entry in &index.scenes {
        let dir = root.join(&entry.dir);
        let mut hasher = Sha256::new();
        let mut files = BTreeMap::new();
        for name in scene_files(entry.views) {
            let path = dir.join(&name);
            let bytes =
                fs::read(&path).map_err(|_| Error::CorruptDataset(format!("missing file {}/{name}", entry.dir)))?;
            hasher.update(&bytes);
            files.insert(name, bytes);
        }
        if hex::encode(hasher.finalize()) != entry.sha256 {
            return Err(Error::CorruptDataset(format!("checksum mismatch for {}", entry.dir)));
        }
        let spec: SceneSpec = serde_json::from_slice(&files["scene.json"])?;
        let views = (0..entry.views)
            .map(|k| {
                let image = image::load_from_memory(&files[&format!("view_{k}.png")])?.to_rgb8();
                let mask = image::load_from_memory(&files[&format!("mask_{k}.png")])?.to_luma8();
                let rec: PoseRecord = serde_json::from_slice(&files[&format!("pose_{k}.json")])?;
                Ok(ViewRecord {
                    image,
                    mask,
                    pose: CameraPose::from_record(&rec)?,
                    scene_id: entry.seed,
                    view_id: k,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scenes.push(SceneRecord { spec, views });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        index,
        scenes,
    })
}

/// Deterministic dataset generation: scene seeds are drawn from `seed`.
pub fn generate_dataset(seed: u64, num_scenes: usize, views: usize, image_size: u32) -> Result<Vec<SceneRecord>> {
    scene_seeds(seed, num_scenes)
        .into_iter()
        .map(|s| SceneRecord::render(generate_scene(s), views, seed, image_size))
        .collect()
}

/// Scene seeds `seed·1000 + i`, so both parities are equally represented.
pub fn scene_seeds(seed: u64, num_scenes: usize) -> Vec<u64> {
    (0..num_scenes as u64)
        .map(|i| seed.wrapping_mul(1000).wrapping_add(i))
        .collect()
}

/// Loads a folder of masked images without poses, for inference only.
/// Files are read in lexicographic order; `*_mask.png` files, when present,
/// pair with the image of the same stem.
pub fn read_unposed_folder(dir: impl AsRef<Path>) -> Result<Vec<(RgbImage, Option<GrayImage>)>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".png") && !n.ends_with("_mask.png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyInput(format!("no images in {}", dir.display())));
    }
    names
        .iter()
        .map(|n| {
            let image = image::open(dir.join(n))?.to_rgb8();
            let mask_path = dir.join(n.replace(".png", "_mask.png"));
            let mask = if mask_path.exists() {
                Some(image::open(mask_path)?.to_luma8())
            } else {
                None
            };
            Ok((image, mask))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::anchor_frame;
    use std::collections::HashSet;

    #[test]
    fn scenes_are_reproducible_and_bounded() {
        for seed in 0..200 {
            let a = generate_scene(seed);
            assert_eq!(a, generate_scene(seed));
            assert!((1..=4).contains(&a.primitives.len()));
            for p in &a.primitives {
                let c = Vec3::from_column_slice(&p.center);
                assert!(c.norm() + p.shape.extent() <= SCENE_RADIUS + 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn scenes_are_diverse() {
        // signature: count plus per-primitive (shape, texture kind, size bucket)
        let sigs: HashSet<String> = (0..100)
            .map(|s| {
                let spec = generate_scene(s);
                let parts: Vec<String> = spec
                    .primitives
                    .iter()
                    .map(|p| {
                        let tex = match p.texture {
                            None => "plain",
                            Some(Texture::Stripes { .. }) => "stripes",
                            Some(Texture::Checker { .. }) => "checker",
                        };
                        format!("{}-{tex}-{}", p.shape.name(), (p.shape.extent() / 0.05).floor())
                    })
                    .collect();
                format!("{}:{}", spec.primitives.len(), parts.join("|"))
            })
            .collect();
        assert!(sigs.len() >= 95, "only {} distinct signatures", sigs.len());
    }

    #[test]
    fn views_look_at_origin_and_are_stratified() {
        let spec = generate_scene(3);
        let poses = sample_views(&spec, 6, 11, 32).unwrap();
        let mut az = Vec::new();
        for p in &poses {
            let ray = p.optical_axis_ray();
            let to_origin = -ray.origin;
            let dist = (to_origin - ray.direction * to_origin.dot(&ray.direction)).norm();
            assert!(dist < 1e-6);
            let c = p.center();
            let r = c.norm();
            assert!((1.5 - 1e-9..=2.5 + 1e-9).contains(&r));
            let el = (c.y / r).asin().to_degrees();
            assert!((-10.0 - 1e-9..=50.0 + 1e-9).contains(&el));
            az.push(c.x.atan2(c.z));
        }
        for i in 0..az.len() {
            for j in i + 1..az.len() {
                let mut d = (az[i] - az[j]).abs() % std::f64::consts::TAU;
                if d > std::f64::consts::PI {
                    d = std::f64::consts::TAU - d;
                }
                assert!(d.to_degrees() >= 30.0 - 1e-9, "{} vs {}", i, j);
            }
        }
        let (sim, _) = anchor_frame(&poses).unwrap();
        let origin_new = sim.apply(&Vec3::zeros());
        assert!(origin_new.norm() < 1e-4);
    }

    #[test]
    fn centered_sphere_silhouette() {
        let spec = SceneSpec {
            seed: 0,
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius: 0.5 },
                center: [0.0; 3],
                albedo: [0.5; 3],
                texture: None,
            }],
        };
        let size = 64;
        let f = default_focal(size);
        let d = 2.0;
        let pose = CameraPose::look_at(
            Vec3::new(0.0, 0.0, d),
            Vec3::zeros(),
            Vec3::y(),
            Intrinsics::centered(f, size, size),
            size,
            size,
        )
        .unwrap();
        let rec = render_scene(&spec, &pose, 0);
        let r_px = f * 0.5 / d;
        let exact = f * 0.5 / (d * d - 0.25f64).sqrt();
        for v in 0..size {
            for u in 0..size {
                let du = u as f64 + 0.5 - 32.0;
                let dv = v as f64 + 0.5 - 32.0;
                let rho = (du * du + dv * dv).sqrt();
                let inside = rec.mask.get_pixel(u, v)[0] > 0;
                if rho < r_px - 1.0 {
                    assert!(inside, "({u},{v}) rho {rho}");
                }
                if rho > exact + 1e-9 {
                    assert!(!inside, "({u},{v}) rho {rho}");
                }
                if rho > r_px + 1.0 {
                    assert!(!inside);
                }
            }
        }
    }

    #[test]
    fn empty_scene_is_white() {
        let spec = SceneSpec::empty(1);
        let pose = sample_views(&spec, 1, 0, 16).unwrap().remove(0);
        let rec = render_scene(&spec, &pose, 0);
        assert!(rec.image.pixels().all(|p| p.0 == [255, 255, 255]));
        assert!(rec.mask.pixels().all(|p| p.0 == [0]));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = generate_scene(5);
        let pose = sample_views(&spec, 2, 1, 24).unwrap().remove(1);
        let a = encode_png(&render_scene(&spec, &pose, 1).image).unwrap();
        let b = encode_png(&render_scene(&spec, &pose, 1).image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn white_outside_mask() {
        let spec = generate_scene(9);
        let pose = sample_views(&spec, 1, 0, 32).unwrap().remove(0);
        let rec = render_scene(&spec, &pose, 0);
        for (px, m) in rec.image.pixels().zip(rec.mask.pixels()) {
            if m[0] == 0 {
                assert_eq!(px.0, [255, 255, 255]);
            }
        }
        assert!(rec.mask.pixels().any(|m| m[0] > 0));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let seeds = scene_seeds(7, 64);
        let train: HashSet<u64> = seeds.iter().copied().filter(|s| is_train_seed(*s)).collect();
        let val: HashSet<u64> = seeds.iter().copied().filter(|s| !is_train_seed(*s)).collect();
        assert!(train.is_disjoint(&val));
        assert_eq!(train.len() + val.len(), 64);
        assert_eq!(train.len(), 32);
    }

    #[test]
    fn mask_boundary_reprojects_onto_surface() {
        // sphere scenes: the closest point of the sphere to a boundary ray
        // must project within 2 px of the pixel center
        for seed in 0..5u64 {
            let spec = SceneSpec {
                seed,
                primitives: vec![Primitive {
                    shape: Shape::Sphere {
                        radius: 0.3 + 0.05 * seed as f64,
                    },
                    center: [0.1 * seed as f64 - 0.2, 0.05, -0.1],
                    albedo: [0.4; 3],
                    texture: None,
                }],
            };
            let pose = sample_views(&spec, 1, seed, 48).unwrap().remove(0);
            let rec = render_scene(&spec, &pose, 0);
            let c = Vec3::from_column_slice(&spec.primitives[0].center);
            let Shape::Sphere { radius } = spec.primitives[0].shape else {
                unreachable!()
            };
            let mut checked = 0;
            for v in 1..47 {
                for u in 1..47 {
                    let inside = rec.mask.get_pixel(u, v)[0] > 0;
                    let edge = [(u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)]
                        .iter()
                        .any(|&(a, b)| (rec.mask.get_pixel(a, b)[0] > 0) != inside);
                    if !edge {
                        continue;
                    }
                    let ray = pose.pixel_ray(u, v);
                    let t = (c - ray.origin).dot(&ray.direction);
                    let closest = ray.at(t);
                    let surf = c + (closest - c).normalize() * radius;
                    let (pu, pv) = pose.project(&surf).unwrap();
                    let err = ((pu - u as f64 - 0.5).powi(2) + (pv - v as f64 - 0.5).powi(2)).sqrt();
                    assert!(err < 2.0, "reprojection error {err}");
                    checked += 1;
                }
            }
            assert!(checked > 10);
        }
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(3, 10, 3, 16).unwrap();
        let index = write_dataset(dir.path(), &scenes, 16).unwrap();
        assert_eq!(index.scenes.len(), 10);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.scenes, scenes);
        let dirs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().is_dir())
            .count();
        assert_eq!(dirs, ds.index.scenes.len());
        for (entry, scene) in ds.index.scenes.iter().zip(&ds.scenes) {
            let n = fs::read_dir(dir.path().join(&entry.dir))
                .unwrap()
                .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("view_"))
                .count();
            assert_eq!(n, scene.views.len());
        }

        let victim = dir.path().join(&index.scenes[2].dir).join("pose_1.json");
        fs::remove_file(&victim).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::CorruptDataset(msg)) => assert!(msg.contains("pose_1.json"), "{msg}"),
            other => panic!("expected CorruptDataset, got {other:?}"),
        }
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(1, 2, 2, 8).unwrap();
        let index = write_dataset(dir.path(), &scenes, 8).unwrap();
        let img = dir.path().join(&index.scenes[0].dir).join("view_0.png");
        let mut bytes = fs::read(&img).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        fs::write(&img, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptDataset(_))));
    }
}
