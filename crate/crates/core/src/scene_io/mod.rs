//! Datasets, initialization, configuration and checkpoint files.

mod config;
mod ply;

use std::num::NonZero;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix4, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{InitMode, SceneMode, TrainConfig};
pub use ply::{
    checkpoint_properties, load_checkpoint, read_point_cloud, save_checkpoint,
    write_point_cloud, PointCloud,
};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::img::Image;
use crate::render::rgb_to_dc;

/// One training view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub points: Option<PointCloud>,
    /// Axis-aligned box around the camera centres (the image rectangle in 2D).
    pub bbox: ([f64; 3], [f64; 3]),
    pub extent_center: [f64; 3],
    pub extent_radius: f64,
}

impl SceneDataset {
    /// A dataset of one image seen through the identity camera. The extent
    /// is the disc around the image centre with radius `max(W, H)/2`.
    pub fn from_image(image: Image, name: &str) -> Self {
        let (w, h) = (image.width, image.height);
        SceneDataset {
            views: vec![View {
                name: name.to_string(),
                camera: Camera::identity_2d(w, h),
                image,
            }],
            points: None,
            bbox: ([0.0; 3], [w.saturating_sub(1) as f64, h.saturating_sub(1) as f64, 0.0]),
            extent_center: [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, 0.0],
            extent_radius: w.max(h) as f64 / 2.0,
        }
    }

    /// A multi-view dataset; the extent is the largest distance from the
    /// centroid of the camera centres to any centre, or 1 for a single camera.
    pub fn from_views(views: Vec<View>, points: Option<PointCloud>) -> Self {
        let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.camera.center()).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut centroid = Vector3::zeros();
        for c in &centers {
            centroid += c;
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        if centers.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        } else {
            centroid /= centers.len() as f64;
        }
        let radius = centers.iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max);
        SceneDataset {
            views,
            points,
            bbox: (lo, hi),
            extent_center: centroid.into(),
            extent_radius: if radius > 0.0 { radius } else { 1.0 },
        }
    }
}

/// Reads an 8-bit PNG (grey or colour, with or without alpha) into `[0, 1]`.
/// Alpha is composited over black.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| Error::load(path, e))?;
    let rgba = match dynamic {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => dynamic.to_rgba8(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel format {:?}; only 8-bit images are read", other.color()),
            ))
        }
    };
    let (w, h) = rgba.dimensions();
    let mut img = Image::new(w as usize, h as usize);
    for (x, y, px) in rgba.enumerate_pixels() {
        let a = px[3] as f64 / 255.0;
        for ch in 0..3 {
            let v = px[ch] as f64 / 255.0;
            img.set(x as usize, y as usize, ch, if px[3] == 255 { v } else { v * a });
        }
    }
    Ok(img)
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        image.width as u32,
        image.height as u32,
        image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
    .ok_or_else(|| Error::InvalidInput("image buffer does not match its size".into()))?;
    buf.save(path).map_err(|e| Error::load(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    camera_angle_x: Option<f64>,
    #[serde(default)]
    camera_angle_y: Option<f64>,
    #[serde(default)]
    fl_x: Option<f64>,
    #[serde(default)]
    fl_y: Option<f64>,
    frames: Vec<Frame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Flips the y and z camera axes, converting between OpenGL and OpenCV poses.
fn flip_yz(m: &Matrix4<f64>) -> Matrix4<f64> {
    m * Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0))
}

fn manifest_path(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    for name in ["transforms.json", "transforms_train.json"] {
        let p = path.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::load(path, "no transforms.json or transforms_train.json found"))
}

fn frame_image_path(base: &Path, file_path: &str) -> PathBuf {
    let p = base.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Loads a scene. In 2D mode `path` is a PNG; otherwise it is a manifest
/// file or a directory holding one, with an optional `points3d.ply` beside it.
pub fn load_scene(path: &Path, mode: SceneMode) -> Result<SceneDataset> {
    if !path.exists() {
        return Err(Error::load(path, "no such file or directory"));
    }
    match mode {
        SceneMode::Image2D => {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
            Ok(SceneDataset::from_image(read_png(path)?, &name.unwrap_or_default()))
        }
        SceneMode::MultiView => load_manifest(&manifest_path(path)?),
    }
}

/// Loads the scene named by `config.scene`, replacing its point cloud with
/// `config.points` when that is set.
pub fn load_dataset(config: &TrainConfig) -> Result<SceneDataset> {
    let scene = config
        .scene
        .as_deref()
        .ok_or_else(|| Error::Config("no scene given".into()))?;
    let mut dataset = load_scene(scene, config.mode)?;
    if let Some(points) = &config.points {
        dataset.points = Some(read_point_cloud(points)?);
    }
    Ok(dataset)
}

fn load_manifest(path: &Path) -> Result<SceneDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::load(path, format!("malformed manifest: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let views = manifest
        .frames
        .par_iter()
        .map(|frame| {
            let image_path = frame_image_path(base, &frame.file_path);
            let image = read_png(&image_path)?;
            let (w, h) = (image.width, image.height);
            let fx = match (manifest.fl_x, manifest.camera_angle_x) {
                (Some(f), _) => f,
                (None, Some(angle)) => 0.5 * w as f64 / (0.5 * angle).tan(),
                (None, None) => {
                    return Err(Error::load(path, "manifest gives neither fl_x nor camera_angle_x"))
                }
            };
            let fy = match (manifest.fl_y, manifest.camera_angle_y) {
                (Some(f), _) => f,
                (None, Some(angle)) => 0.5 * h as f64 / (0.5 * angle).tan(),
                (None, None) => fx,
            };
            let m = frame.transform_matrix;
            let c2w = Matrix4::from_fn(|r, c| m[r][c]);
            let camera = Camera::from_camera_to_world(&flip_yz(&c2w), fx, fy, w, h)
                .map_err(|e| Error::load(path, format!("{}: {e}", frame.file_path)))?;
            Ok(View {
                name: frame.file_path.clone(),
                camera,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ply_path = base.join("points3d.ply");
    let points = if ply_path.is_file() {
        Some(read_point_cloud(&ply_path)?)
    } else {
        None
    };
    Ok(SceneDataset::from_views(views, points))
}

/// Writes a multi-view dataset as `transforms.json`, one PNG per view under
/// `images/`, and `points3d.ply` when a cloud is present.
pub fn write_scene(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let first = dataset
        .views
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot write a dataset without views".into()))?;
    let mut frames = Vec::new();
    for (k, view) in dataset.views.iter().enumerate() {
        let file_path = format!("images/{k:04}.png");
        write_png(&view.image, &dir.join(&file_path))?;
        let w2c = view.camera.world_to_camera();
        let c2w = w2c
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("singular camera pose".into()))?;
        let gl = flip_yz(&c2w);
        frames.push(Frame {
            file_path,
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| gl[(r, c)])),
        });
    }
    let manifest = Manifest {
        camera_angle_x: None,
        camera_angle_y: None,
        fl_x: Some(first.camera.fx),
        fl_y: Some(first.camera.fy),
        frames,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(dir.join("transforms.json"), text)?;
    if let Some(cloud) = &dataset.points {
        write_point_cloud(cloud, &dir.join("points3d.ply"))?;
    }
    Ok(())
}

/// Distance from each point to its third-nearest other point (the farthest
/// one when there are fewer than three others).
fn third_neighbour_distances(points: &[[f64; 3]], fallback: f64) -> Vec<f64> {
    if points.len() < 2 {
        return vec![fallback; points.len()];
    }
    let want = points.len().min(4);
    match ImmutableKdTree::<f64, 3>::new_from_slice(points) {
        Ok(tree) => points
            .par_iter()
            .map(|p| {
                let hits = tree
                    .query(p)
                    .nearest_n::<SquaredEuclidean<f64>>(NonZero::new(want).expect("want ≥ 2"))
                    .execute();
                hits.last().map_or(fallback, |h| h.distance.sqrt())
            })
            .collect(),
        // heavily duplicated inputs can defeat the tree's bucket splitting
        Err(_) => points
            .par_iter()
            .map(|p| {
                let mut d: Vec<f64> = points
                    .iter()
                    .map(|q| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
                    .collect();
                d.sort_unstable_by(f64::total_cmp);
                d[want - 1].sqrt()
            })
            .collect(),
    }
}

/// Builds the initial Gaussians: uniform positions in a cube around the
/// scene extent, or positions and colours from the point cloud. Scales are
/// isotropic at the distance to the third-nearest neighbour.
pub fn initialize<R: Rng + ?Sized>(
    dataset: &SceneDataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<GaussianSet> {
    config.validate()?;
    let n = config.init_count;
    let planar = config.mode == SceneMode::Image2D;
    let center = dataset.extent_center;
    let half = config.extent_multiplier * dataset.extent_radius;
    let (positions, colors): (Vec<[f64; 3]>, Vec<[f64; 3]>) = match config.init {
        InitMode::Random => (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = center[a] + rng.random_range(-half..=half);
                }
                if planar {
                    p[2] = 0.0;
                }
                (p, [rng.random(), rng.random(), rng.random()])
            })
            .unzip(),
        InitMode::Ply => {
            let cloud = dataset
                .points
                .as_ref()
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::Config("point-cloud initialization needs a point cloud".into()))?;
            let m = cloud.len();
            let mut pos = Vec::with_capacity(n);
            let mut col = Vec::with_capacity(n);
            if m >= n {
                let mut picked: Vec<usize> =
                    if m == n { (0..n).collect() } else { sample(rng, m, n).into_vec() };
                picked.sort_unstable();
                for i in picked {
                    pos.push(cloud.positions[i]);
                    col.push(cloud.colors[i]);
                }
            } else {
                pos.extend_from_slice(&cloud.positions);
                col.extend_from_slice(&cloud.colors);
                let jitter = 0.01 * dataset.extent_radius;
                while pos.len() < n {
                    let i = rng.random_range(0..m);
                    let mut p = cloud.positions[i];
                    for a in 0..if planar { 2 } else { 3 } {
                        p[a] += jitter * rng.sample::<f64, _>(StandardNormal);
                    }
                    pos.push(p);
                    col.push(cloud.colors[i]);
                }
            }
            (pos, col)
        }
    };
    let floor = 1e-7 * dataset.extent_radius.max(1.0);
    let dists = third_neighbour_distances(&positions, 0.01 * dataset.extent_radius);
    let mut set = GaussianSet::with_capacity(config.max_gaussians, config.sh_degree);
    for ((p, c), d) in positions.iter().zip(&colors).zip(&dists) {
        let raw = d.max(floor).ln();
        set.push(*p, [raw; 3], [1.0, 0.0, 0.0, 0.0], config.init_opacity, c.map(rgb_to_dc))?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, 0, ((x * 7 + y) % 256) as f64 / 255.0);
                img.set(x, y, 1, ((y * 13) % 256) as f64 / 255.0);
                img.set(x, y, 2, 1.0);
            }
        }
        img
    }

    fn ring_dataset(n: usize) -> SceneDataset {
        let views = (0..n)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / n as f64;
                let eye = Vector3::new(4.0 * a.cos(), 4.0 * a.sin(), 1.0);
                let forward = (-eye).normalize();
                let right = forward.cross(&Vector3::z()).normalize();
                let down = forward.cross(&right);
                let mut c2w = Matrix4::identity();
                for r in 0..3 {
                    c2w[(r, 0)] = right[r];
                    c2w[(r, 1)] = down[r];
                    c2w[(r, 2)] = forward[r];
                    c2w[(r, 3)] = eye[r];
                }
                View {
                    name: format!("v{k}"),
                    camera: Camera::from_camera_to_world(&c2w, 20.0, 22.0, 12, 10).unwrap(),
                    image: gradient_image(12, 10),
                }
            })
            .collect();
        SceneDataset::from_views(
            views,
            Some(PointCloud {
                positions: vec![[0.0, 0.0, 0.0], [0.5, -0.25, 1.0]],
                colors: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            }),
        )
    }

    #[test]
    fn png_round_trip_is_exact_for_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(9, 5);
        let path = dir.path().join("a.png");
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(2, 2);
        buf.save(&path).unwrap();
        assert!(matches!(read_png(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn single_image_scene() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        write_png(&gradient_image(64, 64), &path).unwrap();
        let ds = load_scene(&path, SceneMode::Image2D).unwrap();
        assert_eq!(ds.views.len(), 1);
        assert_eq!(ds.views[0].camera, Camera::identity_2d(64, 64));
        assert_eq!(ds.extent_radius, 32.0);
        assert_eq!(ds.extent_center, [31.5, 31.5, 0.0]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ring_dataset(3);
        write_scene(&ds, dir.path()).unwrap();
        let back = load_scene(dir.path(), SceneMode::MultiView).unwrap();
        assert_eq!(back.views.len(), 3);
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert!((a.camera.rotation - b.camera.rotation).abs().max() < 1e-9);
            assert!((a.camera.translation - b.camera.translation).abs().max() < 1e-9);
            assert_eq!((a.camera.fx, a.camera.fy), (b.camera.fx, b.camera.fy));
            assert_eq!(a.image, b.image);
        }
        assert!((back.extent_radius - ds.extent_radius).abs() < 1e-9);
        assert_eq!(back.points, ds.points);
    }

    #[test]
    fn nerf_style_manifest_with_field_of_view() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("train")).unwrap();
        write_png(&gradient_image(8, 8), &dir.path().join("train/r_0.png")).unwrap();
        let json = r#"{"camera_angle_x": 0.6911112070083618, "frames": [
            {"file_path": "./train/r_0", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]]}]}"#;
        std::fs::write(dir.path().join("transforms_train.json"), json).unwrap();
        let ds = load_scene(dir.path(), SceneMode::MultiView).unwrap();
        let cam = &ds.views[0].camera;
        assert!((cam.fx - 4.0 / (0.5 * 0.6911112070083618f64).tan()).abs() < 1e-12);
        // an OpenGL camera at z = 4 looking down -z sees the origin in front of it
        let p = cam.rotation * Vector3::zeros() + cam.translation;
        assert!((p.z - 4.0).abs() < 1e-12);
        assert_eq!(ds.extent_radius, 1.0);
    }

    #[test]
    fn load_errors_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_scene(&dir.path().join("nope"), SceneMode::MultiView),
            Err(Error::Load { .. })
        ));
        std::fs::write(dir.path().join("transforms.json"), "{ not json").unwrap();
        let err = load_scene(dir.path(), SceneMode::MultiView).unwrap_err();
        assert!(err.to_string().contains("malformed manifest"), "{err}");
        std::fs::write(
            dir.path().join("transforms.json"),
            r#"{"fl_x": 10, "frames": [{"file_path": "missing.png", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#,
        )
        .unwrap();
        assert!(matches!(load_scene(dir.path(), SceneMode::MultiView), Err(Error::Load { .. })));
    }

    #[test]
    fn extent_multiplier_scales_the_init_box() {
        let ds = ring_dataset(4);
        let spread = |mult: f64| {
            let cfg = TrainConfig {
                init_count: 2000,
                max_gaussians: 2000,
                extent_multiplier: mult,
                ..TrainConfig::default()
            };
            let set = initialize(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let xs: Vec<f64> = (0..set.len()).map(|i| set.position(i)[0]).collect();
            xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min)
        };
        let ratio = spread(3.0) / spread(1.0);
        assert!((ratio - 3.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn point_cloud_init_keeps_the_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = PointCloud {
            positions: (0..10).map(|i| [i as f64, (i * i) as f64 * 0.1, -(i as f64)]).collect(),
            colors: vec![[0.2, 0.4, 0.6]; 10],
        };
        let mut ds = ring_dataset(2);
        ds.points = Some(cloud.clone());
        let cfg = TrainConfig {
            init: InitMode::Ply,
            init_count: 10,
            ..TrainConfig::default()
        };
        let set = initialize(&ds, &cfg, &mut rng).unwrap();
        for i in 0..10 {
            assert_eq!(set.position(i), cloud.positions[i]);
            assert!((set.opacity(i) - 0.1).abs() < 1e-15);
            assert_eq!(set.rotation(i), [1.0, 0.0, 0.0, 0.0]);
        }
        // point 0's neighbours are 1, 2, 3; the third is at distance |p3 - p0|
        let d = (9.0f64 + 0.81 + 9.0).sqrt();
        assert!((set.scale(0)[0] - d).abs() < 1e-12);

        ds.points = None;
        assert!(matches!(initialize(&ds, &cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn point_cloud_init_pads_and_subsamples() {
        let mut ds = ring_dataset(2);
        ds.points = Some(PointCloud {
            positions: (0..6).map(|i| [i as f64, 0.0, 0.0]).collect(),
            colors: vec![[0.5; 3]; 6],
        });
        for n in [3, 20] {
            let cfg = TrainConfig {
                init: InitMode::Ply,
                init_count: n,
                ..TrainConfig::default()
            };
            let set = initialize(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(set.len(), n);
            assert!(set.raw_scales.iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn initialization_is_reproducible() {
        let ds = SceneDataset::from_image(gradient_image(16, 16), "g");
        let cfg = TrainConfig {
            mode: SceneMode::Image2D,
            init_count: 50,
            max_gaussians: 60,
            ..TrainConfig::default()
        };
        let a = initialize(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = initialize(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.capacity, 60);
        assert!((0..a.len()).all(|i| a.position(i)[2] == 0.0));
    }
}
