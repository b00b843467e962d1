//! Gaussian splat data model and cloud file formats.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ply::{self, ExtraProperties};

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

/// A single anisotropic 3D Gaussian with activated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// Opacity after the logistic activation, in (0, 1].
    pub opacity: f64,
    /// Per-axis extents after the exponential activation.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Linear RGB, nominally in [0, 1].
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    /// Builds a primitive, normalizing `rotation` (given as w, x, y, z).
    pub fn new(
        center: Vector3<f64>,
        opacity: f64,
        scale: Vector3<f64>,
        rotation: [f64; 4],
        color: Vector3<f64>,
    ) -> Result<Self> {
        let q = Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]);
        let norm = q.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::argument("rotation quaternion has zero or non-finite norm"));
        }
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(Error::argument(format!("opacity {opacity} outside (0, 1]")));
        }
        if !scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::argument(format!(
                "scale components must be positive, got {:?}",
                scale.as_slice()
            )));
        }
        if !(center.iter().all(|v| v.is_finite()) && color.iter().all(|v| v.is_finite())) {
            return Err(Error::argument("center and color must be finite"));
        }
        Ok(Self {
            center,
            opacity,
            scale,
            rotation: UnitQuaternion::new_normalize(q),
            color,
        })
    }

    /// Unit quaternion as `[w, x, y, z]`.
    pub fn rotation_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// Ordered collection of primitives. Indices are stable under deformation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub primitives: Vec<GaussianPrimitive>,
    pub source_path: Option<String>,
    /// Vertex properties carried through PLY round-trips but otherwise ignored
    /// (higher-order SH coefficients, normals, ...).
    pub extra: Option<ExtraProperties>,
}

impl GaussianCloud {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            source_path: None,
            extra: None,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|p| p.center).collect()
    }

    /// Loads a cloud, choosing the format by extension (`.json` or PLY).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => load_json(path),
            _ => load_ply(path),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => save_json(self, path),
            _ => save_ply(self, path),
        }
    }
}

pub fn centers(cloud: &GaussianCloud) -> Vec<Vector3<f64>> {
    cloud.centers()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cloud = ply::decode(&bytes)?;
    cloud.source_path = Some(path.display().to_string());
    Ok(cloud)
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if cloud.is_empty() {
        return Err(Error::argument("cannot save an empty cloud"));
    }
    let bytes = ply::encode(cloud);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct JsonCloud {
    primitives: Vec<JsonPrimitive>,
}

#[derive(Serialize, Deserialize)]
struct JsonPrimitive {
    center: [f64; 3],
    opacity: f64,
    scale: [f64; 3],
    rotation: [f64; 4],
    color: [f64; 3],
}

/// Parses the JSON fixture format (activated values, quaternions as w, x, y, z).
pub fn cloud_from_json(text: &str) -> Result<GaussianCloud> {
    let parsed: JsonCloud = serde_json::from_str(text)?;
    let primitives = parsed
        .primitives
        .into_iter()
        .enumerate()
        .map(|(index, p)| {
            GaussianPrimitive::new(
                p.center.into(),
                p.opacity,
                p.scale.into(),
                p.rotation,
                p.color.into(),
            )
            .map_err(|e| Error::Data {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianCloud::new(primitives))
}

pub fn cloud_to_json(cloud: &GaussianCloud) -> Result<String> {
    let out = JsonCloud {
        primitives: cloud
            .primitives
            .iter()
            .map(|p| JsonPrimitive {
                center: p.center.into(),
                opacity: p.opacity,
                scale: p.scale.into(),
                rotation: p.rotation_wxyz(),
                color: p.color.into(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

pub fn load_json(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cloud = cloud_from_json(&text)?;
    cloud.source_path = Some(path.display().to_string());
    Ok(cloud)
}

pub fn save_json(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cloud_to_json(cloud)?).map_err(|e| Error::io(path, e))
}
