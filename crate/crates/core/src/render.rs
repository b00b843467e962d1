//! CPU splat renderer: EWA projection and front-to-back alpha compositing
//! of globally depth-sorted Gaussians.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::splat::{GaussianCloud, GaussianPrimitive};

/// Added to the projected covariance diagonal, in square pixels.
pub const COVARIANCE_FLOOR: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

const ROW_BAND: usize = 16;

/// Pinhole camera. Camera space has x right, y down and z forward;
/// `orientation` maps camera axes to world axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraJson {
    position: [f64; 3],
    /// `[w, x, y, z]`
    rotation: [f64; 4],
    fov_y: f64,
    width: usize,
    height: usize,
    #[serde(default = "default_near")]
    near: f64,
    #[serde(default = "default_far")]
    far: f64,
}

fn default_near() -> f64 {
    0.01
}

fn default_far() -> f64 {
    1000.0
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::argument(format!("field of view {fov_y} outside (0, pi)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::argument("image size must be at least 1x1"));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::argument(format!("clip range must satisfy 0 < near < far, got {near}..{far}")));
        }
        Ok(Self {
            position,
            orientation,
            fov_y,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::argument("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::argument("up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let basis = Matrix3::from_columns(&[right, down, forward]);
        let orientation =
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(basis));
        let distance = (target - eye).norm();
        Self::new(eye, orientation, fov_y, width, height, distance * 1e-3, distance * 1e3)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: CameraJson = serde_json::from_str(text)?;
        let q = nalgebra::Quaternion::new(c.rotation[0], c.rotation[1], c.rotation[2], c.rotation[3]);
        if !(q.norm() > 0.0) {
            return Err(Error::argument("camera rotation has zero norm"));
        }
        Self::new(
            c.position.into(),
            UnitQuaternion::new_normalize(q),
            c.fov_y,
            c.width,
            c.height,
            c.near,
            c.far,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let q = self.orientation.quaternion();
        Ok(serde_json::to_string_pretty(&CameraJson {
            position: self.position.into(),
            rotation: [q.w, q.i, q.j, q.k],
            fov_y: self.fov_y,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        })?)
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&(p - self.position))
    }

    /// Continuous pixel coordinates of a camera-space point. Pixel `(i, j)`
    /// covers `[i, i+1) x [j, j+1)`.
    pub fn camera_to_pixel(&self, c: &Vector3<f64>) -> Vector2<f64> {
        let f = self.focal();
        self.principal_point() + Vector2::new(f * c.x / c.z, f * c.y / c.z)
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.camera_to_pixel(&self.world_to_camera(p))
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Projected covariance including the anti-aliasing floor.
    pub covariance: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub alpha_peak: f64,
    pub color: Vector3<f64>,
    /// Half-widths of the box outside which the splat contributes nothing.
    pub extent: Vector2<f64>,
}

pub fn covariance_3d(prim: &GaussianPrimitive) -> Matrix3<f64> {
    let r = prim.rotation.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&prim.scale.component_mul(&prim.scale));
    r * s2 * r.transpose()
}

/// EWA projection. `None` when the primitive is outside the clip range or
/// its footprint misses the image.
pub fn project_gaussian(prim: &GaussianPrimitive, cam: &Camera) -> Option<Splat2D> {
    let c = cam.world_to_camera(&prim.center);
    if !(c.z >= cam.near && c.z <= cam.far) {
        return None;
    }
    let f = cam.focal();
    let jacobian = Matrix2x3::new(
        f / c.z,
        0.0,
        -f * c.x / (c.z * c.z),
        0.0,
        f / c.z,
        -f * c.y / (c.z * c.z),
    );
    let w = cam.orientation.to_rotation_matrix().into_inner().transpose();
    let jw = jacobian * w;
    let mut covariance = jw * covariance_3d(prim) * jw.transpose();
    covariance[(0, 1)] = 0.5 * (covariance[(0, 1)] + covariance[(1, 0)]);
    covariance[(1, 0)] = covariance[(0, 1)];
    covariance[(0, 0)] += COVARIANCE_FLOOR;
    covariance[(1, 1)] += COVARIANCE_FLOOR;
    let conic = covariance.try_inverse()?;

    // Mahalanobis radius where alpha drops below the skip threshold; never
    // smaller than three sigma.
    let cutoff = (2.0 * (prim.opacity / MIN_ALPHA).ln()).max(9.0);
    let extent = Vector2::new(
        (cutoff * covariance[(0, 0)]).sqrt(),
        (cutoff * covariance[(1, 1)]).sqrt(),
    );
    let mean = cam.camera_to_pixel(&c);
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean.x + extent.x < 0.0 || mean.x - extent.x > w || mean.y + extent.y < 0.0 || mean.y - extent.y > h {
        return None;
    }
    Some(Splat2D {
        mean,
        covariance,
        conic,
        depth: c.z,
        alpha_peak: prim.opacity,
        color: prim.color,
        extent,
    })
}

impl Splat2D {
    /// Opacity at a pixel-space point after clamping; zero below the skip
    /// threshold.
    pub fn alpha_at(&self, point: Vector2<f64>) -> f64 {
        let d = point - self.mean;
        let power = -0.5 * (d.transpose() * self.conic * d)[(0, 0)];
        let alpha = (self.alpha_peak * power.exp()).clamp(0.0, MAX_ALPHA);
        if alpha < MIN_ALPHA {
            0.0
        } else {
            alpha
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    Color([f64; 3]),
    /// Row-major RGB plate matching the camera resolution.
    Plate {
        width: usize,
        height: usize,
        pixels: Vec<[f64; 3]>,
    },
}

impl Default for Background {
    fn default() -> Self {
        Background::Color([1.0, 1.0, 1.0])
    }
}

impl Background {
    fn at(&self, x: usize, y: usize) -> [f64; 3] {
        match self {
            Background::Color(c) => *c,
            Background::Plate { width, pixels, .. } => pixels[y * width + x],
        }
    }

    /// Loads an 8-bit RGB or RGBA PNG as a background plate.
    pub fn load_plate(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::argument(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::argument(format!("{}: {e}", path.display())))?;
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::argument(format!("unsupported plate color type {other:?}"))),
        };
        let pixels = buf[..info.buffer_size()]
            .chunks_exact(channels)
            .map(|px| [px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0])
            .collect();
        Ok(Background::Plate {
            width: info.width as usize,
            height: info.height as usize,
            pixels,
        })
    }
}

/// RGBA image plus per-pixel accumulated splat alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGBA in [0, 1], composited over the background.
    pub pixels: Vec<[f64; 4]>,
    /// `1 - T` after all splats, before the background fill.
    pub alpha: Vec<f64>,
}

impl SplatImage {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 4] {
        self.pixels[y * self.width + x]
    }

    /// RGBA bytes with round-half-up quantization.
    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|px| px.iter().map(|&c| quantize(c)))
            .collect()
    }
}

pub fn quantize(channel: f64) -> u8 {
    (channel.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Projects, sorts front to back by camera depth (ties by index) and
/// composites every visible splat.
pub fn render(cloud: &GaussianCloud, cam: &Camera, background: &Background) -> Result<SplatImage> {
    if let Background::Plate { width, height, pixels } = background {
        if *width != cam.width || *height != cam.height || pixels.len() != width * height {
            return Err(Error::argument(format!(
                "background plate is {width}x{height}, camera is {}x{}",
                cam.width, cam.height
            )));
        }
    }
    let (width, height) = (cam.width, cam.height);
    let mut splats: Vec<(usize, Splat2D)> = parallel::install(|| {
        cloud
            .primitives
            .par_iter()
            .enumerate()
            .filter_map(|(i, p)| project_gaussian(p, cam).map(|s| (i, s)))
            .collect()
    });
    splats.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));

    let mut pixels = vec![[0.0; 4]; width * height];
    let mut alpha = vec![0.0; width * height];
    parallel::install(|| {
        pixels
            .par_chunks_mut(ROW_BAND * width)
            .zip(alpha.par_chunks_mut(ROW_BAND * width))
            .enumerate()
            .for_each(|(band, (px_band, alpha_band))| {
                let y0 = band * ROW_BAND;
                let rows = px_band.len() / width;
                let mut color = vec![Vector3::<f64>::zeros(); rows * width];
                let mut trans = vec![1.0f64; rows * width];
                for (_, s) in &splats {
                    let ylo = (s.mean.y - s.extent.y - 0.5).ceil().max(y0 as f64);
                    let yhi = (s.mean.y + s.extent.y - 0.5).floor().min((y0 + rows) as f64 - 1.0);
                    let xlo = (s.mean.x - s.extent.x - 0.5).ceil().max(0.0);
                    let xhi = (s.mean.x + s.extent.x - 0.5).floor().min(width as f64 - 1.0);
                    if ylo > yhi || xlo > xhi {
                        continue;
                    }
                    for y in ylo as usize..=yhi as usize {
                        for x in xlo as usize..=xhi as usize {
                            let a = s.alpha_at(Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
                            if a == 0.0 {
                                continue;
                            }
                            let k = (y - y0) * width + x;
                            color[k] += trans[k] * a * s.color;
                            trans[k] *= 1.0 - a;
                        }
                    }
                }
                for (k, (px, acc)) in px_band.iter_mut().zip(alpha_band.iter_mut()).enumerate() {
                    let (x, y) = (k % width, y0 + k / width);
                    let bg = background.at(x, y);
                    let t = trans[k];
                    let c = color[k];
                    *px = [
                        (c.x + t * bg[0]).clamp(0.0, 1.0),
                        (c.y + t * bg[1]).clamp(0.0, 1.0),
                        (c.z + t * bg[2]).clamp(0.0, 1.0),
                        1.0,
                    ];
                    *acc = 1.0 - t;
                }
            });
    });
    Ok(SplatImage {
        width,
        height,
        pixels,
        alpha,
    })
}

/// Writes an 8-bit RGBA PNG.
pub fn write_png(image: &SplatImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgba);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::Balanced);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&image.to_rgba8())?;
    writer.finish()?;
    Ok(())
}
