//! Procedural dynamic scenes: flat-colored spheres and boxes moving between time steps,
//! ray traced exactly from a ring of cameras and written as a dataset.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_path, FrameEntry, SplitSpec, Transforms, TRANSFORMS_FILE};
use crate::error::{Error, Result};
use crate::geometry::{fibonacci_camera_positions, look_at_zup, CameraModel, Ray, Vec3};
use crate::image::RgbaImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        half_size: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Center at each time index; a single entry means the primitive is static.
    pub centers: Vec<[f64; 3]>,
}

impl Primitive {
    pub fn center(&self, t: u32) -> Vec3<f64> {
        let i = (t as usize).min(self.centers.len() - 1);
        Vec3::from_array(self.centers[i])
    }

    /// Radius of a sphere around the center that contains the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_size } => Vec3::from_array(half_size).norm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub cameras: usize,
    /// Distance of the cameras from the origin, before scaling.
    pub radius: f64,
    pub fov_x: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub timesteps: u32,
    pub rig: Rig,
    /// Scene scale recorded in the dataset (camera centers are multiplied by it on load).
    pub scale: f64,
    pub background: [f64; 3],
    pub split: SplitSpec,
}

impl SceneSpec {
    /// Three primitives moving over three time steps, 30 cameras at 64x64. After scaling
    /// by 0.3 the cameras sit at radius 1.9 and the objects within 0.6 of the origin.
    pub fn desk() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.55 },
                    color: [0.85, 0.15, 0.1],
                    centers: vec![[-0.9, -0.5, 0.3], [-0.6, -0.5, 0.3], [-0.3, -0.5, 0.3]],
                },
                Primitive {
                    shape: Shape::Box {
                        half_size: [0.4, 0.4, 0.4],
                    },
                    color: [0.1, 0.7, 0.25],
                    centers: vec![[0.7, -0.3, -0.2], [0.7, 0.0, -0.2], [0.7, 0.3, -0.2]],
                },
                Primitive {
                    shape: Shape::Sphere { radius: 0.45 },
                    color: [0.15, 0.3, 0.9],
                    centers: vec![[0.0, 0.9, -0.4], [0.0, 0.9, 0.0], [0.0, 0.9, 0.4]],
                },
            ],
            timesteps: 3,
            rig: Rig {
                cameras: 30,
                radius: 6.333333333333333,
                fov_x: 0.8,
                width: 64,
                height: 64,
            },
            scale: 0.3,
            background: [1.0; 3],
            split: SplitSpec {
                test: vec![0, 7, 15, 22],
                val: vec![1],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Config("a scene needs at least one time step".into()));
        }
        if self.rig.cameras < 1 || self.rig.width < 1 || self.rig.height < 1 {
            return Err(Error::Config(
                "the rig needs at least one camera and a nonzero resolution".into(),
            ));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.centers.is_empty() {
                return Err(Error::Config(format!("primitive {i} has no centers")));
            }
            if p.centers.len() != 1 && p.centers.len() != self.timesteps as usize {
                return Err(Error::Config(format!(
                    "primitive {i} has {} centers for {} time steps",
                    p.centers.len(),
                    self.timesteps
                )));
            }
            for t in 0..self.timesteps {
                if p.center(t).norm() + p.bounding_radius() >= self.rig.radius {
                    return Err(Error::Config(format!(
                        "primitive {i} at time {t} reaches the camera sphere"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cameras before scaling, looking at the origin.
    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        fibonacci_camera_positions(self.rig.cameras, self.rig.radius)?
            .into_iter()
            .map(|p| {
                let pose = look_at_zup(p, Vec3::new(0.0, 0.0, 0.0))?;
                CameraModel::from_fov_x(self.rig.width, self.rig.height, self.rig.fov_x, pose)
            })
            .collect()
    }
}

/// Nearest non-negative hit distance along a unit-direction ray.
pub fn intersect_primitive(ray: &Ray<f64>, primitive: &Primitive, t: u32) -> Option<f64> {
    let c = primitive.center(t);
    match primitive.shape {
        Shape::Sphere { radius } => {
            let oc = ray.origin - c;
            let b = oc.dot(ray.dir);
            let disc = b * b - (oc.dot(oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            [-b - s, -b + s].into_iter().find(|&d| d >= 0.0)
        }
        Shape::Box { half_size } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for (a, h) in half_size.into_iter().enumerate() {
                let inv = 1.0 / ray.dir.get(a);
                let lo = (c.get(a) - h - ray.origin.get(a)) * inv;
                let hi = (c.get(a) + h - ray.origin.get(a)) * inv;
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                t0 = t0.max(lo);
                t1 = t1.min(hi);
            }
            (t0 <= t1).then_some(t0)
        }
    }
}

/// Color of the nearest primitive hit by `ray`, if any.
pub fn trace(ray: &Ray<f64>, primitives: &[Primitive], t: u32) -> Option<[f64; 3]> {
    primitives
        .iter()
        .filter_map(|p| intersect_primitive(ray, p, t).map(|d| (d, p.color)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// Ground-truth RGBA image: primitive color with alpha 1 on hits, transparent elsewhere.
pub fn render_view(camera: &CameraModel, primitives: &[Primitive], t: u32) -> Result<RgbaImage> {
    let mut img = RgbaImage::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            if let Some(c) = trace(&camera.generate_ray(x, y)?, primitives, t) {
                img.set_pixel(x, y, [c[0] as f32, c[1] as f32, c[2] as f32, 1.0]);
            }
        }
    }
    Ok(img)
}

/// Writes `transforms.json`, `scene.json` and one PNG per (time step, camera) under `root`.
pub fn synth_dataset(spec: &SceneSpec, root: &Path) -> Result<Transforms> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    for t in 0..spec.timesteps {
        fs::create_dir_all(root.join(format!("t{t:04}")))?;
    }
    let jobs: Vec<(u32, usize)> = (0..spec.timesteps)
        .flat_map(|t| (0..cameras.len()).map(move |c| (t, c)))
        .collect();
    jobs.par_iter().try_for_each(|&(t, c)| {
        render_view(&cameras[c], &spec.primitives, t)?.write_png(&root.join(frame_path(t, c as u32)))
    })?;
    let frames = jobs
        .iter()
        .map(|&(t, c)| FrameEntry {
            file_path: frame_path(t, c as u32),
            time_index: t,
            camera_index: c as u32,
            transform_matrix: *cameras[c].pose.matrix(),
        })
        .collect();
    let transforms = Transforms {
        camera_angle_x: spec.rig.fov_x,
        camera_angle_y: None,
        w: spec.rig.width,
        h: spec.rig.height,
        fl_x: None,
        fl_y: None,
        cx: None,
        cy: None,
        scale: spec.scale,
        background: spec.background,
        split: spec.split.clone(),
        cameras: Vec::new(),
        frames,
    };
    transforms.save(&root.join(TRANSFORMS_FILE))?;
    fs::write(root.join("scene.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(transforms)
}
