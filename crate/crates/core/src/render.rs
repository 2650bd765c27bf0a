//! Silhouette rasterization: a soft, differentiable variant for fitting and a
//! hard, binary variant for selection and ground truth.
//!
//! Pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, project_backward, CameraIntrinsics, Vec2, Vec3};
use crate::mask::MaskImage;

/// Faces farther than this many `sigma` outside a pixel contribute less than
/// 1e-12 and are skipped.
const CUTOFF_SIGMAS: f64 = 27.631_021_115_928_547;

const ROWS_PER_BAND: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub backface_culling: bool,
}

fn default_sigma() -> f64 {
    1.0
}

impl RenderConfig {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            sigma: 1.0,
            backface_culling: false,
        }
    }

    pub fn for_camera(cam: &CameraIntrinsics) -> Self {
        Self::new(cam.width, cam.height)
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_culling(mut self, on: bool) -> Self {
        self.backface_culling = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "render resolution {}x{} is empty",
                self.width, self.height
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("render sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Output of [`soft_silhouette`], holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftRender {
    pub mask: MaskImage,
    /// Per pixel `prod_f (1 - p_f)`.
    complement: Vec<f64>,
    projected: Vec<Vec2>,
    faces: Vec<[u32; 3]>,
    config: RenderConfig,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn cross2(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Signed distance from `p` to the triangle boundary (positive inside), the
/// nearest edge index and the parameter of the nearest point on that edge.
#[inline]
fn signed_distance(p: Vec2, tri: &[Vec2; 3]) -> (f64, usize, f64) {
    let mut best = f64::INFINITY;
    let mut edge = 0;
    let mut best_t = 0.0;
    let mut pos = 0;
    let mut neg = 0;
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let ab = b - a;
        let ap = p - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            (ap.dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d2 = (ap - ab * t).norm_squared();
        if d2 < best {
            best = d2;
            edge = i;
            best_t = t;
        }
        let e = cross2(ab, ap);
        if e > 0.0 {
            pos += 1;
        } else if e < 0.0 {
            neg += 1;
        }
    }
    let dist = best.sqrt();
    let inside = pos == 0 || neg == 0;
    (if inside { dist } else { -dist }, edge, best_t)
}

struct FaceRaster {
    tri: [Vec2; 3],
    rows: (usize, usize),
    cols: (usize, usize),
}

/// Pixel ranges (half-open) whose centers lie within `margin` of the bbox.
fn face_window(tri: &[Vec2; 3], margin: f64, width: u32, height: u32) -> Option<((usize, usize), (usize, usize))> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in tri {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let c0 = ((x0 - margin - 0.5).ceil().max(0.0)) as i64;
    let c1 = ((x1 + margin - 0.5).floor().min(width as f64 - 1.0)) as i64;
    let r0 = ((y0 - margin - 0.5).ceil().max(0.0)) as i64;
    let r1 = ((y1 + margin - 0.5).floor().min(height as f64 - 1.0)) as i64;
    if c1 < c0 || r1 < r0 {
        return None;
    }
    Some(((r0 as usize, r1 as usize + 1), (c0 as usize, c1 as usize + 1)))
}

fn front_facing(v: &[Vec3], f: &[u32; 3]) -> bool {
    let (a, b, c) = (v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]);
    (b - a).cross(&(c - a)).dot(&a) < 0.0
}

fn check_inputs(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    for f in faces {
        if f.iter().any(|&i| i as usize >= vertices.len()) {
            return Err(Error::InvalidMesh(format!("face {f:?} references a missing vertex")));
        }
    }
    Ok(())
}

/// Soft silhouette: `1 - prod_f (1 - sigmoid(d_f / sigma))`.
pub fn soft_silhouette(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    cam: &CameraIntrinsics,
    config: &RenderConfig,
) -> Result<SoftRender> {
    config.validate()?;
    check_inputs(vertices, faces)?;
    let projected = project(cam, vertices)?;
    let (w, h) = (config.width as usize, config.height as usize);
    let margin = CUTOFF_SIGMAS * config.sigma;
    let rasters: Vec<FaceRaster> = faces
        .iter()
        .filter(|f| !config.backface_culling || front_facing(vertices, f))
        .filter_map(|f| {
            let tri = [
                projected[f[0] as usize],
                projected[f[1] as usize],
                projected[f[2] as usize],
            ];
            face_window(&tri, margin, config.width, config.height).map(|(rows, cols)| FaceRaster { tri, rows, cols })
        })
        .collect();

    let mut complement = vec![1.0; w * h];
    let inv_sigma = 1.0 / config.sigma;
    complement
        .par_chunks_mut(w * ROWS_PER_BAND)
        .enumerate()
        .for_each(|(band, chunk)| {
            let r_lo = band * ROWS_PER_BAND;
            let r_hi = r_lo + chunk.len() / w;
            for fr in &rasters {
                let (a, b) = (fr.rows.0.max(r_lo), fr.rows.1.min(r_hi));
                for r in a..b {
                    let py = r as f64 + 0.5;
                    let row = &mut chunk[(r - r_lo) * w..(r - r_lo + 1) * w];
                    for c in fr.cols.0..fr.cols.1 {
                        let (d, _, _) = signed_distance(Vec2::new(c as f64 + 0.5, py), &fr.tri);
                        if d < -margin {
                            continue;
                        }
                        row[c] *= sigmoid(-d * inv_sigma);
                    }
                }
            }
        });
    let mask = MaskImage {
        width: config.width,
        height: config.height,
        values: complement.iter().map(|p| 1.0 - p).collect(),
    };
    Ok(SoftRender {
        mask,
        complement,
        projected,
        faces: faces.to_vec(),
        config: *config,
    })
}

impl SoftRender {
    /// `dL/dvertices` given `dL/dmask` (one value per pixel).
    pub fn backward(&self, vertices: &[Vec3], cam: &CameraIntrinsics, grad_mask: &[f64]) -> Result<Vec<Vec3>> {
        if grad_mask.len() != self.complement.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} mask gradients for {} pixels",
                grad_mask.len(),
                self.complement.len()
            )));
        }
        if vertices.len() != self.projected.len() {
            return Err(Error::DimensionMismatch("vertex count changed since render".into()));
        }
        let cfg = &self.config;
        let w = cfg.width as usize;
        let margin = CUTOFF_SIGMAS * cfg.sigma;
        let inv_sigma = 1.0 / cfg.sigma;
        let per_face: Vec<Option<[Vec2; 3]>> = self
            .faces
            .par_iter()
            .map(|f| {
                if cfg.backface_culling && !front_facing(vertices, f) {
                    return None;
                }
                let tri = [
                    self.projected[f[0] as usize],
                    self.projected[f[1] as usize],
                    self.projected[f[2] as usize],
                ];
                let ((r0, r1), (c0, c1)) = face_window(&tri, margin, cfg.width, cfg.height)?;
                let orientation = cross2(tri[1] - tri[0], tri[2] - tri[0]).signum();
                let mut g = [Vec2::zeros(); 3];
                for r in r0..r1 {
                    let py = r as f64 + 0.5;
                    for c in c0..c1 {
                        let idx = r * w + c;
                        let gm = grad_mask[idx];
                        if gm == 0.0 {
                            continue;
                        }
                        let p = Vec2::new(c as f64 + 0.5, py);
                        let (d, edge, t) = signed_distance(p, &tri);
                        if d < -margin {
                            continue;
                        }
                        let coef = gm * self.complement[idx] * sigmoid(d * inv_sigma) * inv_sigma;
                        if coef == 0.0 {
                            continue;
                        }
                        let a = tri[edge];
                        let b = tri[(edge + 1) % 3];
                        let ab = b - a;
                        // unit direction in which d grows; off the segment ends it is
                        // the edge normal, which stays defined on the edge itself
                        let n = if t > 0.0 && t < 1.0 {
                            Vec2::new(-ab.y, ab.x) * (orientation / ab.norm())
                        } else {
                            let diff = p - (a + ab * t);
                            let dist = diff.norm();
                            if dist == 0.0 {
                                continue;
                            }
                            diff * (d.signum() / dist)
                        };
                        g[edge] -= n * ((1.0 - t) * coef);
                        g[(edge + 1) % 3] -= n * (t * coef);
                    }
                }
                Some(g)
            })
            .collect();
        let mut grad_uv = vec![Vec2::zeros(); vertices.len()];
        for (f, g) in self.faces.iter().zip(&per_face) {
            if let Some(g) = g {
                for k in 0..3 {
                    grad_uv[f[k] as usize] += g[k];
                }
            }
        }
        Ok(project_backward(cam, vertices, &grad_uv))
    }
}

/// Binary silhouette with the top-left fill rule.
pub fn hard_silhouette(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    cam: &CameraIntrinsics,
    width: u32,
    height: u32,
) -> Result<MaskImage> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!("render resolution {width}x{height} is empty")));
    }
    check_inputs(vertices, faces)?;
    let projected = project(cam, vertices)?;
    let w = width as usize;
    let mut values = vec![0.0; w * height as usize];
    let tris: Vec<([Vec2; 3], (usize, usize), (usize, usize))> = faces
        .iter()
        .filter_map(|f| {
            let mut tri = [
                projected[f[0] as usize],
                projected[f[1] as usize],
                projected[f[2] as usize],
            ];
            let area = cross2(tri[1] - tri[0], tri[2] - tri[0]);
            if area == 0.0 {
                return None;
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
            face_window(&tri, 0.0, width, height).map(|(r, c)| (tri, r, c))
        })
        .collect();
    values.par_chunks_mut(w * ROWS_PER_BAND).enumerate().for_each(|(band, chunk)| {
        let r_lo = band * ROWS_PER_BAND;
        let r_hi = r_lo + chunk.len() / w;
        for (tri, rows, cols) in &tris {
            for r in rows.0.max(r_lo)..rows.1.min(r_hi) {
                let py = r as f64 + 0.5;
                for c in cols.0..cols.1 {
                    let idx = (r - r_lo) * w + c;
                    if chunk[idx] == 0.0 && covers(tri, Vec2::new(c as f64 + 0.5, py)) {
                        chunk[idx] = 1.0;
                    }
                }
            }
        }
    });
    Ok(MaskImage { width, height, values })
}

/// Edge-function test for a positively oriented triangle (y down). Points on
/// an edge count only for top and left edges.
#[inline]
fn covers(tri: &[Vec2; 3], p: Vec2) -> bool {
    (0..3).all(|i| {
        let a = tri[i];
        let d = tri[(i + 1) % 3] - a;
        let e = cross2(d, p - a);
        e > 0.0 || (e == 0.0 && (d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)))
    })
}

/// Intersection over union after thresholding both masks at 0.5.
pub fn mask_iou(a: &MaskImage, b: &MaskImage) -> Result<f64> {
    a.same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;

    fn cam(w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    /// World points at depth 1 that project to the given pixel coordinates.
    fn lift(c: &CameraIntrinsics, px: &[(f64, f64)]) -> Vec<Vec3> {
        px.iter().map(|&(u, v)| c.unproject(&Vec2::new(u, v), 1.0)).collect()
    }

    #[test]
    fn huge_triangle_saturates() {
        let c = cam(32, 32);
        let v = lift(&c, &[(-500.0, -500.0), (2000.0, -500.0), (-500.0, 2000.0)]);
        let r = soft_silhouette(&v, &[[0, 1, 2]], &c, &RenderConfig::new(32, 32)).unwrap();
        assert!(r.mask.values.iter().all(|&x| x > 0.99));
    }

    #[test]
    fn offscreen_mesh_is_empty() {
        let c = cam(32, 32);
        let v = lift(&c, &[(100.0, 100.0), (140.0, 100.0), (100.0, 140.0)]);
        let r = soft_silhouette(&v, &[[0, 1, 2]], &c, &RenderConfig::new(32, 32)).unwrap();
        assert!(r.mask.values.iter().all(|&x| x < 0.01));
        let e = soft_silhouette(&v, &[], &c, &RenderConfig::new(32, 32)).unwrap();
        assert!(e.mask.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn edge_pixel_is_half() {
        let c = cam(32, 32);
        // vertical edge through the center of column 10
        let v = lift(&c, &[(10.5, -200.0), (10.5, 300.0), (-300.0, 50.0)]);
        let r = soft_silhouette(&v, &[[0, 1, 2]], &c, &RenderConfig::new(32, 32)).unwrap();
        assert!((r.mask.get(16, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_rejected() {
        let c = cam(8, 8);
        let v = vec![Vec3::new(0.0, 0.0, -1.0), Vec3::new(1.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 1.0)];
        assert!(matches!(
            soft_silhouette(&v, &[[0, 1, 2]], &c, &RenderConfig::new(8, 8)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(hard_silhouette(&v, &[[0, 1, 2]], &c, 8, 8).is_err());
    }

    #[test]
    fn square_covers_exact_pixels() {
        let c = cam(32, 32);
        let v = lift(&c, &[(10.0, 10.0), (20.0, 10.0), (20.0, 20.0), (10.0, 20.0)]);
        for faces in [[[0, 1, 2], [0, 2, 3]], [[0, 2, 1], [0, 3, 2]]] {
            let m = hard_silhouette(&v, &faces, &c, 32, 32).unwrap();
            assert_eq!(m.sum(), 100.0);
            assert_eq!(m.bounding_box(), Some([10.0, 10.0, 20.0, 20.0]));
        }
    }

    #[test]
    fn shared_edges_are_not_double_counted_or_dropped() {
        // a fan whose diagonals pass exactly through pixel centers
        let c = cam(16, 16);
        let v = lift(&c, &[(2.5, 2.5), (12.5, 2.5), (12.5, 12.5), (2.5, 12.5), (7.5, 7.5)]);
        let faces = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
        let m = hard_silhouette(&v, &faces, &c, 16, 16).unwrap();
        // interior of the 10x10 square with top/left boundary: columns/rows 2..12
        assert_eq!(m.sum(), 100.0);
    }

    #[test]
    fn iou_examples() {
        let mut a = MaskImage::zeros(40, 40);
        let mut b = MaskImage::zeros(40, 40);
        for r in 0..10 {
            for col in 0..10 {
                a.set(r, col, 1.0);
                b.set(r, col + 5, 1.0);
            }
        }
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &a.shifted(20, 20)).unwrap(), 0.0);
        let z = MaskImage::zeros(40, 40);
        assert_eq!(mask_iou(&z, &z).unwrap(), 0.0);
        assert!(mask_iou(&a, &MaskImage::zeros(4, 4)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RenderConfig::new(0, 4).validate().is_err());
        assert!(RenderConfig::new(4, 4).with_sigma(0.0).validate().is_err());
        assert!(RenderConfig::new(4, 4).validate().is_ok());
    }

    #[test]
    fn culling_drops_back_faces() {
        let c = cam(32, 32);
        let mesh = TriMesh::cube(0.1, 1).transformed(&crate::geometry::Mat3::identity(), &Vec3::new(0.0, 0.0, 1.0), 1.0);
        let on = soft_silhouette(&mesh.vertices, &mesh.faces, &c, &RenderConfig::new(32, 32).with_culling(true)).unwrap();
        let off = soft_silhouette(&mesh.vertices, &mesh.faces, &c, &RenderConfig::new(32, 32)).unwrap();
        assert!(on.mask.sum() < off.mask.sum());
        assert!(on.mask.sum() > 0.5 * off.mask.sum());
    }
}

