//! Posed image datasets: procedural analytic scenes rendered through the
//! compositor, a Blender-format reader and writer, and ray batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DensityField;
use crate::math::{self, Aabb, Vec3};
use crate::rendering::{composite_batch, Camera, Ray, SampleBatch, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    /// Torus around the z axis.
    Torus { major: f64, minor: f64 },
    Box { half: Vec3 },
}

/// A solid with density `s · clamp(−sdf/τ, 0, 1)`: zero outside, ramping to
/// `s` on the inner offset surface at depth `τ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticShape {
    pub kind: ShapeKind,
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    #[serde(default = "default_shell")]
    pub shell: f64,
}

fn default_sharpness() -> f64 {
    20.0
}

fn default_shell() -> f64 {
    0.05
}

impl AnalyticShape {
    pub fn new(kind: ShapeKind) -> Self {
        Self {
            kind,
            sharpness: default_sharpness(),
            shell: default_shell(),
        }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(ShapeKind::Sphere { radius })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ShapeKind::Sphere { radius } => radius > 0.0,
            ShapeKind::Torus { major, minor } => minor > 0.0 && major > minor,
            ShapeKind::Box { half } => half.iter().all(|&h| h > 0.0),
        };
        if !ok || !(self.sharpness > 0.0) || !(self.shell > 0.0) {
            return Err(Error::input(format!("invalid analytic shape {self:?}")));
        }
        Ok(())
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, x: Vec3) -> f64 {
        match self.kind {
            ShapeKind::Sphere { radius } => math::norm(x) - radius,
            ShapeKind::Torus { major, minor } => {
                let q = (x[0] * x[0] + x[1] * x[1]).sqrt() - major;
                (q * q + x[2] * x[2]).sqrt() - minor
            }
            ShapeKind::Box { half } => {
                let q = [x[0].abs() - half[0], x[1].abs() - half[1], x[2].abs() - half[2]];
                let outside = math::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.sharpness * (-self.sdf(x) / self.shell).clamp(0.0, 1.0)
    }

    /// Outward unit normal from the signed-distance gradient.
    pub fn normal(&self, x: Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate() {
            let (mut p, mut m) = (x, x);
            p[a] += h;
            m[a] -= h;
            *ga = (self.sdf(p) - self.sdf(m)) / (2.0 * h);
        }
        let n = math::norm(g);
        if n > 0.0 {
            math::scale(g, 1.0 / n)
        } else {
            [0.0, 0.0, 1.0]
        }
    }

    /// Normal-shaded albedo `0.5 + 0.5 n`.
    pub fn albedo(&self, x: Vec3) -> [f64; 3] {
        let n = self.normal(x);
        [0.5 + 0.5 * n[0], 0.5 + 0.5 * n[1], 0.5 + 0.5 * n[2]]
    }

    /// Axis-aligned bounds of the solid.
    pub fn bounds(&self) -> Aabb {
        match self.kind {
            ShapeKind::Sphere { radius } => Aabb::cube(radius),
            ShapeKind::Torus { major, minor } => {
                Aabb::new([-(major + minor), -(major + minor), -minor], [major + minor, major + minor, minor])
            }
            ShapeKind::Box { half } => Aabb::new(math::scale(half, -1.0), half),
        }
    }

    /// Area-uniform points on the zero level set.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n);
        match self.kind {
            ShapeKind::Sphere { radius } => {
                while out.len() < n {
                    let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    let r = math::norm(p);
                    if r > 1e-6 && r <= 1.0 {
                        out.push(math::scale(p, radius / r));
                    }
                }
            }
            ShapeKind::Torus { major, minor } => {
                while out.len() < n {
                    let u = rng.gen_range(0.0..std::f64::consts::TAU);
                    let v = rng.gen_range(0.0..std::f64::consts::TAU);
                    let accept = (major + minor * v.cos()) / (major + minor);
                    if rng.gen::<f64>() <= accept {
                        let ring = major + minor * v.cos();
                        out.push([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
                    }
                }
            }
            ShapeKind::Box { half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                for _ in 0..n {
                    let mut pick = rng.gen::<f64>() * total;
                    let mut axis = 2;
                    for (a, &area) in areas.iter().enumerate() {
                        if pick < area {
                            axis = a;
                            break;
                        }
                        pick -= area;
                    }
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    let mut p = [0.0; 3];
                    for (a, pa) in p.iter_mut().enumerate() {
                        *pa = if a == axis {
                            sign * half[a]
                        } else {
                            rng.gen_range(-half[a]..=half[a])
                        };
                    }
                    out.push(p);
                }
            }
        }
        out
    }
}

impl DensityField for AnalyticShape {
    fn density_batch(&self, xs: &[Vec3]) -> Result<Vec<f64>> {
        Ok(xs.iter().map(|&x| self.density(x)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One posed image. Colors are row-major, `width · height` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Vec<[f64; 3]>,
    pub mask: Option<Vec<f64>>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    /// Box that bounds all geometry; rays are sampled inside it.
    pub bounds: Aabb,
    pub background: [f64; 3],
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        if !self.bounds.is_valid() {
            return Err(Error::Load("scene bounds are degenerate".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            let n = v.camera.pixel_count();
            if v.image.len() != n {
                return Err(Error::Load(format!("view {i}: image has {} pixels, camera expects {n}", v.image.len())));
            }
            if let Some(m) = &v.mask {
                if m.len() != n {
                    return Err(Error::Load(format!("view {i}: mask size does not match image")));
                }
            }
            if v.image.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Load(format!("view {i}: colors outside [0, 1]")));
            }
        }
        if !self.views.iter().any(|v| v.split == Split::Train) {
            return Err(Error::Load("dataset has no training views".into()));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn has_masks(&self) -> bool {
        self.split(Split::Train).all(|v| v.mask.is_some())
    }

    pub fn train_pixel_count(&self) -> usize {
        self.split(Split::Train).map(|v| v.camera.pixel_count()).sum()
    }
}

/// Settings of the procedural scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub shape: AnalyticShape,
    pub n_train: usize,
    pub n_eval: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Camera distance from the origin.
    pub distance: f64,
    /// Elevation of the training ring, in degrees.
    pub elevation_deg: f64,
    pub near: f64,
    pub far: f64,
    /// Half-width of the cubic scene box.
    pub box_half: f64,
    pub background: [f64; 3],
    /// Samples per ray for the reference renders.
    pub reference_samples: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            shape: AnalyticShape::sphere(0.5),
            n_train: 16,
            n_eval: 4,
            width: 64,
            height: 64,
            focal: 80.0,
            distance: 2.0,
            elevation_deg: 30.0,
            near: 0.5,
            far: 3.5,
            box_half: 0.75,
            background: [1.0; 3],
            reference_samples: 512,
        }
    }
}

fn orbit_point(distance: f64, azimuth: f64, elevation: f64) -> Vec3 {
    [
        distance * elevation.cos() * azimuth.cos(),
        distance * elevation.cos() * azimuth.sin(),
        distance * elevation.sin(),
    ]
}

/// Cameras on a sphere around the origin: a ring at fixed elevation with a
/// random azimuth phase, plus the two poles.
pub fn orbit_cameras(cfg: &SyntheticConfig, n: usize, elevation_deg: f64, rng: &mut impl Rng) -> Result<Vec<Camera>> {
    let cam = |eye: Vec3| {
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], cfg.focal, cfg.width, cfg.height, cfg.near, cfg.far)
    };
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n);
    let ring = if n >= 4 { n - 2 } else { n };
    let el = elevation_deg.to_radians();
    for i in 0..ring {
        let az = phase + std::f64::consts::TAU * i as f64 / ring as f64;
        out.push(cam(orbit_point(cfg.distance, az, el))?);
    }
    if ring < n {
        out.push(cam([0.0, 0.0, cfg.distance])?);
        out.push(cam([0.0, 0.0, -cfg.distance])?);
    }
    Ok(out)
}

/// Quantizes to the 8-bit grid so images survive PNG storage unchanged.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// All pixel rays of a camera, row-major.
pub fn camera_rays(camera: &Camera) -> Vec<Ray> {
    let mut out = Vec::with_capacity(camera.pixel_count());
    for j in 0..camera.height {
        for i in 0..camera.width {
            out.push(camera.ray(i, j).expect("pixel in range"));
        }
    }
    out
}

/// Renders the analytic shape from `camera`. Returns colors and opacities.
pub fn render_analytic(
    shape: &AnalyticShape,
    camera: &Camera,
    bounds: &Aabb,
    n_samples: usize,
    background: [f64; 3],
) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let cfg = SamplerConfig {
        n_samples,
        jitter: false,
        background,
    };
    let rays = camera_rays(camera);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = SampleBatch::build(&rays, camera.near, camera.far, bounds, &cfg, &mut rng)?;
    let sigma = shape.density_batch(&batch.positions)?;
    let colors: Vec<[f64; 3]> = batch.positions.iter().map(|&x| shape.albedo(x)).collect();
    let out = composite_batch(&batch, &sigma, &colors, background)?;
    Ok((out.rgb, out.opacity))
}

fn reference_view(cfg: &SyntheticConfig, camera: Camera, split: Split, bounds: &Aabb) -> Result<View> {
    let (rgb, opacity) = render_analytic(&cfg.shape, &camera, bounds, cfg.reference_samples, cfg.background)?;
    let mask: Vec<f64> = opacity.iter().map(|&o| if o > 0.5 { 1.0 } else { 0.0 }).collect();
    let image = rgb
        .iter()
        .zip(&mask)
        .map(|(c, &m)| {
            if m > 0.0 {
                [quantize(c[0]), quantize(c[1]), quantize(c[2])]
            } else {
                cfg.background.map(quantize)
            }
        })
        .collect();
    Ok(View {
        camera,
        image,
        mask: Some(mask),
        split,
    })
}

/// Builds a dataset of reference renders of an analytic shape. Pixels
/// outside the mask hold the background color.
pub fn make_synthetic_scene(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<SceneDataset> {
    cfg.shape.validate()?;
    if cfg.n_train < 2 {
        return Err(Error::input("a synthetic scene needs at least two training views"));
    }
    if cfg.reference_samples < 2 {
        return Err(Error::input("reference renders need at least two samples per ray"));
    }
    let bounds = Aabb::cube(cfg.box_half);
    let sb = cfg.shape.bounds();
    if !(bounds.contains(sb.min) && bounds.contains(sb.max)) {
        return Err(Error::input("shape does not fit inside the scene box"));
    }
    let mut views = Vec::with_capacity(cfg.n_train + cfg.n_eval);
    for cam in orbit_cameras(cfg, cfg.n_train, cfg.elevation_deg, rng)? {
        views.push(reference_view(cfg, cam, Split::Train, &bounds)?);
    }
    if cfg.n_eval > 0 {
        let eval_el = cfg.elevation_deg * 0.5;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..cfg.n_eval {
            let az = phase + std::f64::consts::TAU * i as f64 / cfg.n_eval as f64;
            let eye = orbit_point(cfg.distance, az, eval_el.to_radians());
            let cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], cfg.focal, cfg.width, cfg.height, cfg.near, cfg.far)?;
            views.push(reference_view(cfg, cam, Split::Eval, &bounds)?);
        }
    }
    let ds = SceneDataset {
        views,
        bounds,
        background: cfg.background,
    };
    ds.validate()?;
    Ok(ds)
}

/// Rays with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
    pub masks: Option<Vec<f64>>,
    /// `(view index, pixel index)` of every ray.
    pub pixels: Vec<(usize, usize)>,
}

fn gather(ds: &SceneDataset, pixels: Vec<(usize, usize)>) -> RayBatch {
    let masks = ds.has_masks();
    let mut b = RayBatch {
        rays: Vec::with_capacity(pixels.len()),
        colors: Vec::with_capacity(pixels.len()),
        masks: masks.then(Vec::new),
        pixels: Vec::new(),
    };
    for &(v, p) in &pixels {
        let view = &ds.views[v];
        let w = view.camera.width as usize;
        b.rays.push(view.camera.ray((p % w) as u32, (p / w) as u32).expect("pixel in range"));
        b.colors.push(view.image[p]);
        if let (Some(out), Some(m)) = (b.masks.as_mut(), view.mask.as_ref()) {
            out.push(m[p]);
        }
    }
    b.pixels = pixels;
    b
}

/// `m` training pixels drawn uniformly with replacement.
pub fn ray_batch(ds: &SceneDataset, m: usize, rng: &mut impl Rng) -> Result<RayBatch> {
    if m == 0 {
        return Err(Error::input("ray batch needs m >= 1"));
    }
    let train: Vec<usize> = (0..ds.views.len()).filter(|&i| ds.views[i].split == Split::Train).collect();
    let counts: Vec<usize> = train.iter().map(|&i| ds.views[i].camera.pixel_count()).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::input("dataset has no training pixels"));
    }
    let mut pixels = Vec::with_capacity(m);
    for _ in 0..m {
        let mut k = rng.gen_range(0..total);
        let mut slot = 0;
        while k >= counts[slot] {
            k -= counts[slot];
            slot += 1;
        }
        pixels.push((train[slot], k));
    }
    Ok(gather(ds, pixels))
}

/// Every pixel of the given split exactly once, in view then pixel order.
pub fn exhaustive_batch(ds: &SceneDataset, split: Split) -> RayBatch {
    let pixels = ds
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.split == split)
        .flat_map(|(i, v)| (0..v.camera.pixel_count()).map(move |p| (i, p)))
        .collect();
    gather(ds, pixels)
}

/// Near and far used for Blender scenes without explicit bounds.
pub const BLENDER_NEAR: f64 = 2.0;
pub const BLENDER_FAR: f64 = 6.0;
pub const BLENDER_BOX_HALF: f64 = 1.5;

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aabb: Option<[Vec3; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.strip_prefix("./").unwrap_or(file_path);
    let p = dir.join(rel);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the dataset as `transforms_{train,val,test}.json` plus PNG frames.
/// Evaluation views go to both `val` and `test`. Masks become alpha.
pub fn export_blender(ds: &SceneDataset, dir: &Path) -> Result<()> {
    let write_split = |split: Split, names: &[&str], folder: &str| -> Result<()> {
        let views: Vec<&View> = ds.split(split).collect();
        let sub = dir.join(folder);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut frames = Vec::with_capacity(views.len());
        let mut angle = None;
        for (i, v) in views.iter().enumerate() {
            let cam = &v.camera;
            angle.get_or_insert(2.0 * (0.5 * cam.width as f64 / cam.focal).atan());
            let rel = format!("./{folder}/r_{i}");
            let path = image_path(dir, &rel);
            let mut img = image::RgbaImage::new(cam.width, cam.height);
            for (p, px) in img.pixels_mut().enumerate() {
                let c = v.image[p];
                let a = v.mask.as_ref().map_or(1.0, |m| m[p]);
                *px = image::Rgba([to_u8(c[0]), to_u8(c[1]), to_u8(c[2]), to_u8(a)]);
            }
            img.save(&path)
                .map_err(|e| Error::Load(format!("writing {}: {e}", path.display())))?;
            frames.push(FrameEntry {
                file_path: rel,
                transform_matrix: cam.c2w.iter().map(|r| r.to_vec()).collect(),
            });
        }
        let first = views.first().map(|v| &v.camera);
        let tf = TransformsFile {
            camera_angle_x: angle.unwrap_or(0.0),
            frames,
            near: first.map(|c| c.near),
            far: first.map(|c| c.far),
            aabb: Some([ds.bounds.min, ds.bounds.max]),
        };
        let text = serde_json::to_string_pretty(&tf).map_err(|e| Error::Load(e.to_string()))?;
        for name in names {
            let p = dir.join(format!("transforms_{name}.json"));
            fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    write_split(Split::Train, &["train"], "train")?;
    write_split(Split::Eval, &["val", "test"], "test")?;
    Ok(())
}

fn load_split(dir: &Path, file: &str, split: Split, background: [f64; 3], out: &mut Vec<View>) -> Result<Option<TransformsFile>> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let tf: TransformsFile = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Load(format!("{file}: field `{}`: {}", e.path(), e.inner())))?;
    for (i, fr) in tf.frames.iter().enumerate() {
        let m = &fr.transform_matrix;
        if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
            return Err(Error::Load(format!("{file}: frames[{i}].transform_matrix must be 4x4")));
        }
        let mut c2w = [[0.0; 4]; 4];
        for r in 0..4 {
            c2w[r].copy_from_slice(&m[r]);
        }
        let ipath = image_path(dir, &fr.file_path);
        let img = image::open(&ipath)
            .map_err(|e| Error::Load(format!("{}: {e}", ipath.display())))?;
        let has_alpha = img.color().has_alpha();
        let img = img.to_rgba8();
        let (w, h) = img.dimensions();
        if !(tf.camera_angle_x > 0.0 && tf.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::Load(format!("{file}: field `camera_angle_x` out of range")));
        }
        let focal = 0.5 * w as f64 / (0.5 * tf.camera_angle_x).tan();
        let camera = Camera {
            c2w,
            focal,
            width: w,
            height: h,
            near: tf.near.unwrap_or(BLENDER_NEAR),
            far: tf.far.unwrap_or(BLENDER_FAR),
        };
        camera
            .validate(1e-4)
            .map_err(|e| Error::Load(format!("{file}: frames[{i}].transform_matrix: {e}")))?;
        let mut image = Vec::with_capacity((w * h) as usize);
        let mut mask = Vec::with_capacity((w * h) as usize);
        for px in img.pixels() {
            let a = px[3] as f64 / 255.0;
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = px[k] as f64 / 255.0 * a + background[k] * (1.0 - a);
            }
            image.push(c);
            mask.push(a);
        }
        out.push(View {
            camera,
            image,
            mask: has_alpha.then_some(mask),
            split,
        });
    }
    Ok(Some(tf))
}

/// Reads a Blender-format scene. The training split is required; the test
/// split, when present, becomes the evaluation split.
pub fn load_blender_dataset(dir: &Path, background: [f64; 3]) -> Result<SceneDataset> {
    let mut views = Vec::new();
    let train = load_split(dir, "transforms_train.json", Split::Train, background, &mut views)?
        .expect("train split");
    if dir.join("transforms_test.json").exists() {
        load_split(dir, "transforms_test.json", Split::Eval, background, &mut views)?;
    }
    let bounds = train
        .aabb
        .map(|[a, b]| Aabb::new(a, b))
        .unwrap_or_else(|| Aabb::cube(BLENDER_BOX_HALF));
    let ds = SceneDataset {
        views,
        bounds,
        background,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_train: 4,
            n_eval: 1,
            width: 16,
            height: 16,
            focal: 20.0,
            reference_samples: 128,
            ..Default::default()
        }
    }

    #[test]
    fn sdfs_and_density() {
        let s = AnalyticShape::sphere(0.5);
        assert!((s.sdf([0.0, 0.0, 1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(s.density([0.0; 3]), 20.0);
        assert_eq!(s.density([0.0, 0.0, 0.6]), 0.0);
        assert!((s.density([0.0, 0.0, 0.475]) - 10.0).abs() < 1e-9);
        let t = AnalyticShape::new(ShapeKind::Torus { major: 0.5, minor: 0.2 });
        assert!(t.sdf([0.5, 0.0, 0.0]) < 0.0 && t.sdf([0.0; 3]) > 0.0);
        let b = AnalyticShape::new(ShapeKind::Box { half: [0.3, 0.2, 0.1] });
        assert!((b.sdf([0.0, 0.0, 0.5]) - 0.4).abs() < 1e-12);
        assert!((b.sdf([0.0; 3]) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn surface_samples_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [
            ShapeKind::Sphere { radius: 0.5 },
            ShapeKind::Torus { major: 0.5, minor: 0.2 },
            ShapeKind::Box { half: [0.3, 0.2, 0.1] },
        ] {
            let s = AnalyticShape::new(kind);
            for p in s.sample_surface(200, &mut rng) {
                assert!(s.sdf(p).abs() < 1e-12, "{kind:?} {p:?}");
            }
        }
    }

    #[test]
    fn center_ray_is_opaque() {
        let cfg = SyntheticConfig::default();
        let cam = Camera::look_at([0.0, -2.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 80.0, 1, 1, 0.5, 3.5).unwrap();
        let (rgb, op) = render_analytic(&cfg.shape, &cam, &Aabb::cube(1.0), 512, [1.0; 3]).unwrap();
        assert!(op[0] > 1.0 - 1e-6);
        // the visible point faces −y
        assert!((rgb[0][1] - 0.0).abs() < 0.05);
    }

    #[test]
    fn synthetic_scene_is_deterministic() {
        let a = make_synthetic_scene(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_synthetic_scene(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(Split::Train).count(), 4);
        assert_eq!(a.split(Split::Eval).count(), 1);
        for v in &a.views {
            // corner pixels miss the sphere
            assert_eq!(v.image[0], [1.0; 3]);
            assert_eq!(v.mask.as_ref().unwrap()[0], 0.0);
        }
    }

    #[test]
    fn ray_batches() {
        let ds = make_synthetic_scene(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let all = exhaustive_batch(&ds, Split::Train);
        assert_eq!(all.rays.len(), ds.train_pixel_count());
        let mut seen = std::collections::HashSet::new();
        assert!(all.pixels.iter().all(|p| seen.insert(*p)));
        let a = ray_batch(&ds, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ray_batch(&ds, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        assert!(a.pixels.iter().all(|&(v, _)| ds.views[v].split == Split::Train));
        assert!(ray_batch(&ds, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn blender_focal_convention() {
        let angle: f64 = 0.691_111_207_008_361_8;
        let f = 0.5 * 800.0 / (0.5 * angle).tan();
        assert!((f - 1111.111).abs() < 1e-3);
    }

    #[test]
    fn blender_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("transforms_train.json"), r#"{"frames": []}"#).unwrap();
        let e = load_blender_dataset(dir.path(), [1.0; 3]).unwrap_err().to_string();
        assert!(e.contains("camera_angle_x"), "{e}");
        fs::write(
            dir.path().join("transforms_train.json"),
            r#"{"camera_angle_x": 0.7, "frames": [{"file_path": "./train/r_0", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#,
        )
        .unwrap();
        let e = load_blender_dataset(dir.path(), [1.0; 3]).unwrap_err().to_string();
        assert!(e.contains("r_0.png"), "{e}");
    }
}
