//! Render request schema and its query-string form.

use std::collections::HashMap;

use chronofield::dataset::POSE_TOLERANCE;
use chronofield::geometry::{look_at_pose, scale_camera, CameraModel, CameraPose, Mat4, Vec3};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    /// Half resolution and half the samples.
    Preview,
    #[default]
    Full,
}

/// Virtual camera, given either as a look-at triple or as a camera-to-world matrix.
/// Positions are in the dataset's world units; the archive's scene scale is applied
/// on the server.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub look_at: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up: Option<[f64; 3]>,
    /// Row-major 4x4, camera looks down its local -z with +y up.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_matrix: Option<Mat4>,
    pub fov_x: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraSpec {
    /// Camera-to-world pose before scene scaling.
    pub fn pose(&self) -> Result<CameraPose, ApiError> {
        let look = (self.position, self.look_at, self.up);
        match (self.transform_matrix, look) {
            (Some(m), (None, None, None)) => {
                CameraPose::with_tolerance(m, POSE_TOLERANCE).map_err(|e| ApiError::bad_request(e.to_string()))
            }
            (None, (Some(p), Some(t), Some(u))) => {
                look_at_pose(Vec3::from_array(p), Vec3::from_array(t), Vec3::from_array(u))
                    .map_err(|e| ApiError::bad_request(e.to_string()))
            }
            (None, (None, None, None)) => Err(ApiError::bad_request(
                "camera needs either transform_matrix or position, look_at and up",
            )),
            (Some(_), _) => Err(ApiError::bad_request(
                "give transform_matrix or a look-at triple, not both",
            )),
            (None, _) => Err(ApiError::bad_request("look-at cameras need position, look_at and up")),
        }
    }

    pub fn model(&self, scene_scale: f64, width: u32, height: u32) -> Result<CameraModel, ApiError> {
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) {
            return Err(ApiError::bad_request(format!(
                "fov_x must be in (0, pi), got {}",
                self.fov_x
            )));
        }
        let pose = scale_camera(&self.pose()?, scene_scale).map_err(|e| ApiError::bad_request(e.to_string()))?;
        CameraModel::from_fov_x(width, height, self.fov_x, pose).map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Signed so that negative indices reach the lookup and come back as 404.
    pub time_index: i64,
    pub camera: CameraSpec,
    /// Samples per ray; the archive's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default)]
    pub quality: Quality,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn floats<const N: usize>(key: &str, s: &str) -> Result<[f64; N], ApiError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(ApiError::bad_request(format!(
            "{key} needs {N} comma-separated numbers"
        )));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| ApiError::bad_request(format!("{key}: '{p}' is not a number")))?;
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    q.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::bad_request(format!("{key}: '{v}' is not valid")))
        })
        .transpose()
}

fn required<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<T, ApiError> {
    number(q, key)?.ok_or_else(|| ApiError::bad_request(format!("missing query parameter '{key}'")))
}

const QUERY_KEYS: [&str; 10] = [
    "time_index",
    "position",
    "look_at",
    "up",
    "transform_matrix",
    "fov_x",
    "width",
    "height",
    "samples",
    "quality",
];

impl RenderRequest {
    /// Query-string parameters: vectors are comma-separated, the matrix is 16 numbers in
    /// row-major order.
    pub fn to_query_pairs(&self) -> Vec<(String, String)> {
        let c = &self.camera;
        let mut out = vec![("time_index".to_string(), self.time_index.to_string())];
        for (k, v) in [("position", c.position), ("look_at", c.look_at), ("up", c.up)] {
            if let Some(v) = v {
                out.push((k.into(), join(&v)));
            }
        }
        if let Some(m) = c.transform_matrix {
            out.push(("transform_matrix".into(), join(m.as_flattened())));
        }
        out.push(("fov_x".into(), c.fov_x.to_string()));
        out.push(("width".into(), c.width.to_string()));
        out.push(("height".into(), c.height.to_string()));
        if let Some(s) = self.samples {
            out.push(("samples".into(), s.to_string()));
        }
        if self.quality == Quality::Preview {
            out.push(("quality".into(), "preview".into()));
        }
        out
    }

    pub fn from_query(q: &HashMap<String, String>) -> Result<Self, ApiError> {
        if let Some(k) = q.keys().find(|k| !QUERY_KEYS.contains(&k.as_str())) {
            return Err(ApiError::bad_request(format!("unknown query parameter '{k}'")));
        }
        let vec3 = |k: &str| q.get(k).map(|v| floats::<3>(k, v)).transpose();
        let transform_matrix = match q.get("transform_matrix") {
            Some(v) => {
                let f = floats::<16>("transform_matrix", v)?;
                let mut m = [[0.0; 4]; 4];
                for (i, x) in f.into_iter().enumerate() {
                    m[i / 4][i % 4] = x;
                }
                Some(m)
            }
            None => None,
        };
        let quality = match q.get("quality").map(String::as_str) {
            None | Some("full") => Quality::Full,
            Some("preview") => Quality::Preview,
            Some(other) => {
                return Err(ApiError::bad_request(format!(
                    "quality must be preview or full, got '{other}'"
                )))
            }
        };
        Ok(Self {
            time_index: required(q, "time_index")?,
            camera: CameraSpec {
                position: vec3("position")?,
                look_at: vec3("look_at")?,
                up: vec3("up")?,
                transform_matrix,
                fov_x: required(q, "fov_x")?,
                width: required(q, "width")?,
                height: required(q, "height")?,
            },
            samples: number(q, "samples")?,
            quality,
        })
    }
}
