//! Multi-view, multi-timestep datasets on disk.
//!
//! Layout: `root/transforms.json` plus one PNG per (time, camera), conventionally
//! `root/t{time:04}/cam{camera:04}.png`. Frame entries carry explicit `time_index` and
//! `camera_index` fields, so paths are free-form.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    focal_from_fov, fov_from_intrinsics, invert_extrinsics, opencv_to_opengl_camera, panoptic_to_zup, scale_camera,
    CameraModel, CameraPose, Mat4,
};
use crate::image::RgbaImage;

pub use crate::image::composite_alpha;

pub const TRANSFORMS_FILE: &str = "transforms.json";

/// Orthonormality tolerance for transforms read from disk.
pub const POSE_TOLERANCE: f64 = 1e-3;

/// Conventional relative image path for a (time, camera) pair.
pub fn frame_path(time_index: u32, camera_index: u32) -> String {
    format!("t{time_index:04}/cam{camera_index:04}.png")
}

/// Explicit intrinsics for one physical camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub camera_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub w: u32,
    pub h: u32,
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub camera_angle_x: f64,
    #[serde(default)]
    pub camera_angle_y: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    pub time_index: u32,
    pub camera_index: u32,
    /// Camera-to-world, row-major.
    pub transform_matrix: Mat4,
}

/// Camera indices held out for testing and validation; the rest train.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default)]
    pub test: Vec<u32>,
    #[serde(default)]
    pub val: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Partitions camera indices `0..n_views`.
pub fn split_views(n_views: u32, spec: &SplitSpec) -> Result<Split> {
    split_indices(&(0..n_views).collect::<Vec<_>>(), spec)
}

/// Partitions an explicit set of camera indices.
pub fn split_indices(views: &[u32], spec: &SplitSpec) -> Result<Split> {
    let all: BTreeSet<u32> = views.iter().copied().collect();
    let mut held = BTreeSet::new();
    for (name, list) in [("test", &spec.test), ("val", &spec.val)] {
        for &v in list {
            if !all.contains(&v) {
                return Err(Error::Dataset(format!("{name} view {v} does not exist")));
            }
            if !held.insert(v) {
                return Err(Error::Dataset(format!("view {v} listed twice in the split")));
            }
        }
    }
    Ok(Split {
        train: all.iter().copied().filter(|v| !held.contains(v)).collect(),
        val: spec.val.clone(),
        test: spec.test.clone(),
    })
}

/// Transforms file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_y: Option<f64>,
    pub w: u32,
    pub h: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    /// Factor applied to camera centers when loading (poses are stored unscaled).
    #[serde(default = "one")]
    pub scale: f64,
    /// Background the images are composited on during training and evaluation.
    #[serde(default = "white")]
    pub background: [f64; 3],
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cameras: Vec<CameraIntrinsics>,
    pub frames: Vec<FrameEntry>,
}

fn one() -> f64 {
    1.0
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

impl Transforms {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Dataset("image size must be nonzero".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Dataset(format!("scale must be positive, got {}", self.scale)));
        }
        let mut seen = BTreeSet::new();
        for f in &self.frames {
            if !seen.insert((f.time_index, f.camera_index)) {
                return Err(Error::Dataset(format!(
                    "duplicate frame for time {} camera {}",
                    f.time_index, f.camera_index
                )));
            }
            CameraPose::with_tolerance(f.transform_matrix, POSE_TOLERANCE)
                .map_err(|e| Error::Dataset(format!("frame {}: {e}", f.file_path)))?;
        }
        Ok(())
    }

    /// Focal length from explicit intrinsics, else from `camera_angle_x`.
    pub fn focal(&self) -> (f64, f64) {
        let fx = self.fl_x.unwrap_or_else(|| focal_from_fov(self.w, self.camera_angle_x));
        (fx, self.fl_y.unwrap_or(fx))
    }

    pub fn time_indices(&self) -> Vec<u32> {
        self.frames
            .iter()
            .map(|f| f.time_index)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn camera_indices(&self) -> Vec<u32> {
        self.frames
            .iter()
            .map(|f| f.camera_index)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn frame(&self, time_index: u32, camera_index: u32) -> Option<&FrameEntry> {
        self.frames
            .iter()
            .find(|f| f.time_index == time_index && f.camera_index == camera_index)
    }

    pub fn split(&self) -> Result<Split> {
        split_indices(&self.camera_indices(), &self.split)
    }

    /// Camera for a frame with `scale` applied to its center.
    pub fn camera(&self, frame: &FrameEntry, scale: f64) -> Result<CameraModel> {
        let pose = CameraPose::with_tolerance(frame.transform_matrix, POSE_TOLERANCE)?;
        let pose = scale_camera(&pose, scale)?;
        let mut cam = match self.cameras.iter().find(|c| c.camera_index == frame.camera_index) {
            Some(k) => CameraModel {
                width: k.w,
                height: k.h,
                fx: k.fl_x,
                fy: k.fl_y,
                cx: k.cx,
                cy: k.cy,
                k1: k.k1,
                k2: k.k2,
                k3: k.k3,
                p1: k.p1,
                p2: k.p2,
                pose,
            },
            None => {
                let (fx, fy) = self.focal();
                let mut c = CameraModel::pinhole(self.w, self.h, fx, fy, pose)?;
                c.cx = self.cx.unwrap_or(c.cx);
                c.cy = self.cy.unwrap_or(c.cy);
                c
            }
        };
        cam.pose = pose;
        cam.validate()?;
        Ok(cam)
    }
}

/// One camera's image at a time step.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera_index: u32,
    pub camera: CameraModel,
    pub image: RgbaImage,
}

/// Synchronized images of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewFrameSet {
    pub time_index: u32,
    pub views: Vec<View>,
    pub background: [f64; 3],
    /// Scale already applied to the camera centers.
    pub scene_scale: f64,
}

impl MultiViewFrameSet {
    pub fn new(time_index: u32, views: Vec<View>, background: [f64; 3]) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Dataset(format!("no views at time {time_index}")))?;
        let (w, h) = (first.image.width, first.image.height);
        for v in &views {
            if (v.image.width, v.image.height) != (w, h) {
                return Err(Error::Dataset(format!(
                    "camera {} at time {time_index} is {}x{}, expected {w}x{h}",
                    v.camera_index, v.image.width, v.image.height
                )));
            }
            if (v.camera.width, v.camera.height) != (w, h) {
                return Err(Error::Dataset(format!(
                    "camera {} intrinsics are {}x{} but its image is {w}x{h}",
                    v.camera_index, v.camera.width, v.camera.height
                )));
            }
        }
        Ok(Self {
            time_index,
            views,
            background,
            scene_scale: 1.0,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.image.pixel_count()).sum()
    }

    pub fn view(&self, camera_index: u32) -> Option<&View> {
        self.views.iter().find(|v| v.camera_index == camera_index)
    }
}

/// A dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub transforms: Transforms,
    /// Scene scale applied to camera centers; defaults to the file's `scale`.
    pub scale: f64,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let transforms = Transforms::load(&root.join(TRANSFORMS_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            scale: transforms.scale,
            transforms,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn background(&self) -> [f64; 3] {
        self.transforms.background
    }

    pub fn time_indices(&self) -> Vec<u32> {
        self.transforms.time_indices()
    }

    pub fn split(&self) -> Result<Split> {
        self.transforms.split()
    }

    /// Scaled camera for `camera_index` at `time_index`.
    pub fn camera(&self, time_index: u32, camera_index: u32) -> Result<CameraModel> {
        let frame = self
            .transforms
            .frame(time_index, camera_index)
            .ok_or_else(|| Error::Dataset(format!("no frame for time {time_index} camera {camera_index}")))?;
        self.transforms.camera(frame, self.scale)
    }

    /// Loads the listed cameras' images at `time_index`.
    pub fn load_frame_set(&self, time_index: u32, cameras: &[u32]) -> Result<MultiViewFrameSet> {
        let views = cameras
            .par_iter()
            .map(|&c| {
                let frame = self
                    .transforms
                    .frame(time_index, c)
                    .ok_or_else(|| Error::MissingImage {
                        view: c as usize,
                        time: time_index,
                        path: self.root.join(frame_path(time_index, c)),
                    })?;
                let path = self.root.join(&frame.file_path);
                if !path.is_file() {
                    return Err(Error::MissingImage {
                        view: c as usize,
                        time: time_index,
                        path,
                    });
                }
                let image =
                    RgbaImage::read_png(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
                Ok(View {
                    camera_index: c,
                    camera: self.transforms.camera(frame, self.scale)?,
                    image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = MultiViewFrameSet::new(time_index, views, self.background())?;
        set.scene_scale = self.scale;
        Ok(set)
    }
}

/// Panoptic-studio style calibration file.
#[derive(Clone, Debug, Deserialize)]
pub struct PanopticCalibration {
    pub cameras: Vec<PanopticCamera>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct PanopticCamera {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default, rename = "type")]
    pub kind: Option<String>,
    pub resolution: Option<[u32; 2]>,
    #[serde(rename = "K")]
    pub k: Option<[[f64; 3]; 3]>,
    #[serde(rename = "R")]
    pub r: Option<[[f64; 3]; 3]>,
    pub t: Option<Translation>,
    /// OpenCV order: k1, k2, p1, p2, k3.
    #[serde(default, rename = "distCoef")]
    pub dist_coef: Option<Vec<f64>>,
}

/// Translation as `[x, y, z]` or a column `[[x], [y], [z]]`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum Translation {
    Flat([f64; 3]),
    Column([[f64; 1]; 3]),
}

impl Translation {
    pub fn vector(&self) -> [f64; 3] {
        match self {
            Translation::Flat(v) => *v,
            Translation::Column(c) => [c[0][0], c[1][0], c[2][0]],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PanopticOptions {
    /// Keep only cameras whose `type` matches (e.g. "hd").
    pub camera_type: Option<String>,
    /// Number of time steps to emit frame entries for.
    pub timesteps: u32,
}

/// Converts a calibration file to transforms: intrinsics and field of view per camera,
/// camera-to-world by inverting `[R t]`, camera axes flipped to look down `-z`, then the
/// Y-up world re-expressed Z-up.
pub fn convert_panoptic_calibration(calib: &PanopticCalibration, options: &PanopticOptions) -> Result<Transforms> {
    let mut cameras = Vec::new();
    let mut poses = Vec::new();
    let selected = calib.cameras.iter().filter(|c| match (&options.camera_type, &c.kind) {
        (Some(want), Some(kind)) => want == kind,
        (Some(_), None) => false,
        (None, _) => true,
    });
    for (index, cam) in selected.enumerate() {
        let label = cam.name.clone().unwrap_or_else(|| format!("#{index}"));
        let missing = |field: &str| Error::Dataset(format!("camera {label}: missing {field}"));
        let k = cam.k.ok_or_else(|| missing("K"))?;
        let r = cam.r.ok_or_else(|| missing("R"))?;
        let t = cam.t.as_ref().ok_or_else(|| missing("t"))?.vector();
        let [w, h] = cam.resolution.ok_or_else(|| missing("resolution"))?;
        let dist = cam.dist_coef.clone().unwrap_or_default();
        let d = |i: usize| dist.get(i).copied().unwrap_or(0.0);
        let (fx, fy) = (k[0][0], k[1][1]);
        let (angle_x, angle_y) = fov_from_intrinsics(w, h, fx, fy);
        let extrinsic = [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let pose = panoptic_to_zup(&opencv_to_opengl_camera(&invert_extrinsics(&extrinsic)?));
        cameras.push(CameraIntrinsics {
            camera_index: index as u32,
            name: cam.name.clone(),
            w,
            h,
            fl_x: fx,
            fl_y: fy,
            cx: k[0][2],
            cy: k[1][2],
            camera_angle_x: angle_x,
            camera_angle_y: angle_y,
            k1: d(0),
            k2: d(1),
            p1: d(2),
            p2: d(3),
            k3: d(4),
        });
        poses.push(pose);
    }
    let first = cameras
        .first()
        .ok_or_else(|| Error::Dataset("calibration contains no matching cameras".into()))?;
    let frames = (0..options.timesteps.max(1))
        .flat_map(|t| {
            poses.iter().enumerate().map(move |(c, pose)| FrameEntry {
                file_path: frame_path(t, c as u32),
                time_index: t,
                camera_index: c as u32,
                transform_matrix: *pose.matrix(),
            })
        })
        .collect();
    Ok(Transforms {
        camera_angle_x: first.camera_angle_x,
        camera_angle_y: Some(first.camera_angle_y),
        w: first.w,
        h: first.h,
        fl_x: None,
        fl_y: None,
        cx: None,
        cy: None,
        scale: 1.0,
        background: white(),
        split: SplitSpec::default(),
        cameras,
        frames,
    })
}

/// Counts frames per time index, for summaries.
pub fn frames_per_time(transforms: &Transforms) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for f in &transforms.frames {
        *out.entry(f.time_index).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at_zup, panoptic_alignment, Vec3, IDENTITY};

    fn transforms_with(frames: Vec<FrameEntry>) -> Transforms {
        Transforms {
            camera_angle_x: 0.6911,
            camera_angle_y: None,
            w: 4,
            h: 3,
            fl_x: None,
            fl_y: None,
            cx: None,
            cy: None,
            scale: 1.0,
            background: [1.0; 3],
            split: SplitSpec::default(),
            cameras: Vec::new(),
            frames,
        }
    }

    #[test]
    fn focal_from_angle() {
        let mut t = transforms_with(Vec::new());
        t.w = 1920;
        assert!((t.focal().0 - 2666.67).abs() < 0.5);
    }

    #[test]
    fn split_protocols() {
        let dws = split_views(
            100,
            &SplitSpec {
                test: vec![0, 30, 60, 90],
                val: vec![1],
            },
        )
        .unwrap();
        assert_eq!(dws.train.len(), 95);
        let soccer = split_views(
            60,
            &SplitSpec {
                test: vec![21, 37, 40, 56],
                val: vec![0],
            },
        )
        .unwrap();
        assert_eq!(soccer.train.len(), 55);
        assert_eq!(
            split_views(5, &SplitSpec::default()).unwrap().train,
            vec![0, 1, 2, 3, 4]
        );
        assert!(split_views(
            5,
            &SplitSpec {
                test: vec![5],
                val: vec![]
            }
        )
        .is_err());
        assert!(split_views(
            5,
            &SplitSpec {
                test: vec![1],
                val: vec![1]
            }
        )
        .is_err());
    }

    #[test]
    fn identity_frame_gives_camera_at_origin() {
        let t = transforms_with(vec![FrameEntry {
            file_path: "a.png".into(),
            time_index: 0,
            camera_index: 0,
            transform_matrix: IDENTITY,
        }]);
        let cam = t.camera(&t.frames[0], 1.0).unwrap();
        assert_eq!(cam.pose.center(), Vec3::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn save_load_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        let pose = look_at_zup(Vec3::new(0.3, -2.0, 1.1), Vec3::new(0.0, 0.0, 0.0)).unwrap();
        let t = transforms_with(vec![FrameEntry {
            file_path: "t0000/cam0000.png".into(),
            time_index: 0,
            camera_index: 0,
            transform_matrix: *pose.matrix(),
        }]);
        let p = dir.path().join("transforms.json");
        t.save(&p).unwrap();
        let back = Transforms::load(&p).unwrap();
        assert_eq!(back, t);
        back.save(&p).unwrap();
        assert_eq!(Transforms::load(&p).unwrap(), t);
    }

    #[test]
    fn rejects_non_orthonormal_transform() {
        let mut m = IDENTITY;
        m[0][0] = 1.01;
        let t = transforms_with(vec![FrameEntry {
            file_path: "a.png".into(),
            time_index: 0,
            camera_index: 0,
            transform_matrix: m,
        }]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn frame_set_loading_reports_missing_view() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3)
            .map(|c| FrameEntry {
                file_path: frame_path(0, c),
                time_index: 0,
                camera_index: c,
                transform_matrix: IDENTITY,
            })
            .collect();
        transforms_with(frames).save(&dir.path().join(TRANSFORMS_FILE)).unwrap();
        fs::create_dir_all(dir.path().join("t0000")).unwrap();
        for c in 0..3 {
            RgbaImage::new(4, 3)
                .write_png(&dir.path().join(frame_path(0, c)))
                .unwrap();
        }
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.load_frame_set(0, &[0, 1, 2]).unwrap().views.len(), 3);
        fs::remove_file(dir.path().join(frame_path(0, 1))).unwrap();
        match ds.load_frame_set(0, &[0, 1, 2]) {
            Err(Error::MissingImage { view: 1, time: 0, path }) => assert!(path.ends_with("cam0001.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn panoptic_json(extra: &str) -> PanopticCalibration {
        serde_json::from_str(&format!(
            r#"{{"cameras": [{{"name": "00_00", "type": "hd", "resolution": [1920, 1080],
                "K": [[2666.67, 0, 960], [0, 2666.67, 540], [0, 0, 1]],
                "R": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "t": [[0], [0], [-3]] {extra}}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn panoptic_missing_distortion_is_zero() {
        let t = convert_panoptic_calibration(&panoptic_json(""), &PanopticOptions::default()).unwrap();
        let c = &t.cameras[0];
        assert_eq!([c.k1, c.k2, c.k3, c.p1, c.p2], [0.0; 5]);
        assert!((c.camera_angle_x - 0.6911).abs() < 5e-4);
        let with = convert_panoptic_calibration(
            &panoptic_json(r#", "distCoef": [0.1, 0.2, 0.3, 0.4, 0.5]"#),
            &PanopticOptions::default(),
        )
        .unwrap();
        let c = &with.cameras[0];
        assert_eq!([c.k1, c.k2, c.p1, c.p2, c.k3], [0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn panoptic_center_maps_through_alignment() {
        let t = convert_panoptic_calibration(&panoptic_json(""), &PanopticOptions::default()).unwrap();
        let m = t.frames[0].transform_matrix;
        let p = panoptic_alignment();
        let expect: Vec<f64> = (0..3).map(|i| p[i][2] * 3.0 + p[i][3]).collect();
        for i in 0..3 {
            assert!((m[i][3] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn panoptic_missing_field_is_an_error() {
        let calib: PanopticCalibration =
            serde_json::from_str(r#"{"cameras": [{"name": "x", "resolution": [4, 4]}]}"#).unwrap();
        let err = convert_panoptic_calibration(&calib, &PanopticOptions::default()).unwrap_err();
        assert!(err.to_string().contains("missing K"));
    }
}
