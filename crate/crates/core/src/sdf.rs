//! Voxel signed-distance fields of closed triangle meshes (negative inside).

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{Mat3, TriMesh, Vec3};

pub const DEFAULT_RESOLUTION: usize = 32;
/// Empty cells between the mesh bounding box and the grid boundary.
const PADDING_CELLS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub resolution: usize,
    pub origin: Vec3,
    pub cell_size: f64,
    /// Node values, x fastest: index `i + N * (j + N * k)`.
    pub values: Vec<f64>,
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

enum Node {
    Leaf { lo: Vec3, hi: Vec3, faces: Vec<usize> },
    Inner { lo: Vec3, hi: Vec3, children: Box<[Node; 2]> },
}

impl Node {
    fn bounds(&self) -> (&Vec3, &Vec3) {
        match self {
            Node::Leaf { lo, hi, .. } | Node::Inner { lo, hi, .. } => (lo, hi),
        }
    }
}

fn box_dist2(p: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let e = (lo[k] - p[k]).max(p[k] - hi[k]).max(0.0);
        d += e * e;
    }
    d
}

/// Bounding-volume hierarchy over triangles for exact nearest-surface queries.
struct Bvh {
    tris: Vec<[Vec3; 3]>,
    root: Node,
}

impl Bvh {
    fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.corners(f)).collect();
        let centers: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let root = Self::build(&tris, &centers, (0..tris.len()).collect());
        Self { tris, root }
    }

    fn build(tris: &[[Vec3; 3]], centers: &[Vec3], mut idx: Vec<usize>) -> Node {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &idx {
            for p in &tris[i] {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
        }
        if idx.len() <= 4 {
            return Node::Leaf { lo, hi, faces: idx };
        }
        let ext = hi - lo;
        let axis = ext.imax();
        idx.sort_by(|&a, &b| centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b)));
        let right = idx.split_off(idx.len() / 2);
        let children = Box::new([Self::build(tris, centers, idx), Self::build(tris, centers, right)]);
        Node::Inner { lo, hi, children }
    }

    fn nearest_dist2(&self, p: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.visit(&self.root, p, &mut best);
        best
    }

    fn visit(&self, node: &Node, p: &Vec3, best: &mut f64) {
        match node {
            Node::Leaf { faces, .. } => {
                for &f in faces {
                    let [a, b, c] = &self.tris[f];
                    let d = (closest_point_on_triangle(p, a, b, c) - p).norm_squared();
                    if d < *best {
                        *best = d;
                    }
                }
            }
            Node::Inner { children, .. } => {
                let d: Vec<f64> = children
                    .iter()
                    .map(|c| {
                        let (lo, hi) = c.bounds();
                        box_dist2(p, lo, hi)
                    })
                    .collect();
                let order = if d[0] <= d[1] { [0, 1] } else { [1, 0] };
                for i in order {
                    if d[i] < *best {
                        self.visit(&children[i], p, best);
                    }
                }
            }
        }
    }
}

/// Crossing parameters `x` where the line `{(x, y, z)}` meets the mesh.
fn ray_crossings(tris: &[[Vec3; 3]], y: f64, z: f64) -> Vec<f64> {
    let mut xs = Vec::new();
    for [a, b, c] in tris {
        // barycentric coordinates of (y, z) in the yz projection
        let (ay, az) = (a.y - y, a.z - z);
        let (by, bz) = (b.y - y, b.z - z);
        let (cy, cz) = (c.y - y, c.z - z);
        let w0 = by * cz - bz * cy;
        let w1 = cy * az - cz * ay;
        let w2 = ay * bz - az * by;
        let area = w0 + w1 + w2;
        if area == 0.0 {
            continue;
        }
        if (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0) {
            xs.push((w0 * a.x + w1 * b.x + w2 * c.x) / area);
        }
    }
    xs.sort_by(f64::total_cmp);
    xs
}

/// Offsets that keep parity rays away from mesh edges and vertices lying on
/// grid-aligned coordinates.
const RAY_JITTER: (f64, f64) = (1.234_567e-7, 2.718_281e-7);

/// Inside test by ray-crossing parity along +x.
pub fn is_inside(mesh: &TriMesh, p: &Vec3) -> bool {
    let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.corners(f)).collect();
    let (lo, hi) = mesh.aabb();
    let scale = (hi - lo).amax().max(1e-9);
    let xs = ray_crossings(&tris, p.y + RAY_JITTER.0 * scale, p.z + RAY_JITTER.1 * scale);
    xs.iter().filter(|&&x| x > p.x).count() % 2 == 1
}

impl SdfGrid {
    /// Builds the grid with `resolution` nodes per axis and cubic cells,
    /// centered on the mesh bounding box with two cells of padding on the
    /// longest axis.
    pub fn build(mesh: &TriMesh, resolution: usize) -> Result<Self> {
        mesh.validate()?;
        mesh.check_watertight()?;
        let n = resolution.max(2 + 2 * PADDING_CELLS as usize + 1);
        let (lo, hi) = mesh.aabb();
        let ext = (hi - lo).amax().max(1e-9);
        let cell_size = ext / (n as f64 - 1.0 - 2.0 * PADDING_CELLS);
        let span = cell_size * (n as f64 - 1.0);
        let origin = (lo + hi) / 2.0 - Vec3::repeat(span / 2.0);

        let bvh = Bvh::new(mesh);
        let jitter = (RAY_JITTER.0 * ext, RAY_JITTER.1 * ext);
        let values: Vec<f64> = (0..n * n)
            .into_par_iter()
            .flat_map_iter(|row| {
                let (j, k) = (row % n, row / n);
                let y = origin.y + j as f64 * cell_size;
                let z = origin.z + k as f64 * cell_size;
                let xs = ray_crossings(&bvh.tris, y + jitter.0, z + jitter.1);
                let bvh = &bvh;
                (0..n).map(move |i| {
                    let p = Vec3::new(origin.x + i as f64 * cell_size, y, z);
                    let d = bvh.nearest_dist2(&p).sqrt();
                    let beyond = xs.len() - xs.partition_point(|&x| x <= p.x);
                    if beyond % 2 == 1 {
                        -d
                    } else {
                        d
                    }
                })
            })
            .collect();
        Ok(Self {
            resolution: n,
            origin,
            cell_size,
            values,
        })
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.resolution;
        self.values[i + n * (j + n * k)]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.cell_size
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let span = self.cell_size * (self.resolution as f64 - 1.0);
        (self.origin, self.origin + Vec3::repeat(span))
    }

    /// Cell index and fractional offsets of a point inside the grid.
    #[inline]
    fn locate(&self, q: &Vec3) -> ([usize; 3], Vec3) {
        let n = self.resolution;
        let mut idx = [0usize; 3];
        let mut t = Vec3::zeros();
        for a in 0..3 {
            let u = (q[a] - self.origin[a]) / self.cell_size;
            let i = (u.floor().max(0.0) as usize).min(n - 2);
            idx[a] = i;
            t[a] = (u - i as f64).clamp(0.0, 1.0);
        }
        (idx, t)
    }

    /// Trilinear weights of the eight corners and their derivatives.
    #[inline]
    fn trilinear(&self, q: &Vec3, field: impl Fn(usize, usize, usize) -> f64) -> (f64, Vec3) {
        let ([i, j, k], t) = self.locate(q);
        let mut v = 0.0;
        let mut g = Vec3::zeros();
        for dk in 0..2 {
            let wz = if dk == 1 { t.z } else { 1.0 - t.z };
            let sz = if dk == 1 { 1.0 } else { -1.0 };
            for dj in 0..2 {
                let wy = if dj == 1 { t.y } else { 1.0 - t.y };
                let sy = if dj == 1 { 1.0 } else { -1.0 };
                for di in 0..2 {
                    let wx = if di == 1 { t.x } else { 1.0 - t.x };
                    let sx = if di == 1 { 1.0 } else { -1.0 };
                    let f = field(i + di, j + dj, k + dk);
                    v += wx * wy * wz * f;
                    g += Vec3::new(sx * wy * wz, wx * sy * wz, wx * wy * sz) * f;
                }
            }
        }
        (v, g / self.cell_size)
    }

    /// Splits `p` into the nearest in-grid point and the outward offset.
    #[inline]
    fn clamp(&self, p: &Vec3) -> (Vec3, Vec3) {
        let (lo, hi) = self.bounds();
        let q = p.sup(&lo).inf(&hi);
        (q, p - q)
    }

    /// Value and exact gradient of the interpolant (including the extension
    /// outside the grid). Used by the losses.
    pub fn sample(&self, p: &Vec3) -> (f64, Vec3) {
        let (q, off) = self.clamp(p);
        let (v, mut g) = self.trilinear(&q, |i, j, k| self.node(i, j, k));
        self.extend(v, &mut g, &off)
    }

    fn extend(&self, v: f64, g: &mut Vec3, off: &Vec3) -> (f64, Vec3) {
        let dist = off.norm();
        if dist == 0.0 {
            return (v, *g);
        }
        for a in 0..3 {
            if off[a] != 0.0 {
                g[a] = 0.0;
            }
        }
        (v + dist, *g + off / dist)
    }

    /// Central-difference gradient at a node (one-sided on the boundary).
    fn node_gradient(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let n = self.resolution;
        let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / (span as f64 * self.cell_size);
        let axis = |idx: usize, get: &dyn Fn(usize) -> f64| {
            let (a, b) = (idx.saturating_sub(1), (idx + 1).min(n - 1));
            diff(get(a), get(b), b - a)
        };
        Vec3::new(
            axis(i, &|x| self.node(x, j, k)),
            axis(j, &|y| self.node(i, y, k)),
            axis(k, &|z| self.node(i, j, z)),
        )
    }

    /// Value and smooth gradient: trilinear interpolation of node
    /// central-difference gradients, continuous across cells.
    pub fn sample_smooth(&self, p: &Vec3) -> (f64, Vec3) {
        let (q, off) = self.clamp(p);
        let (v, _) = self.trilinear(&q, |i, j, k| self.node(i, j, k));
        let mut g = Vec3::zeros();
        for a in 0..3 {
            g[a] = self.trilinear(&q, |i, j, k| self.node_gradient(i, j, k)[a]).0;
        }
        self.extend(v, &mut g, &off)
    }
}

pub fn build_sdf_grid(mesh: &TriMesh, resolution: usize) -> Result<SdfGrid> {
    SdfGrid::build(mesh, resolution)
}

/// Values and smooth spatial gradients at each point.
pub fn query_sdf(grid: &SdfGrid, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
    points.iter().map(|p| grid.sample_smooth(p)).unzip()
}

/// Penetration depth `max(0, -sdf)` per point.
pub fn phi(grid: &SdfGrid, points: &[Vec3]) -> Vec<f64> {
    points.iter().map(|p| (-grid.sample(p).0).max(0.0)).collect()
}

/// A canonical-frame grid placed in the world by `p = s R x + D`.
#[derive(Debug, Clone, Copy)]
pub struct PosedSdf<'a> {
    pub grid: &'a SdfGrid,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

/// Gradients of one posed SDF sample with respect to the query point and
/// the pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosedSample {
    pub value: f64,
    pub grad_point: Vec3,
    pub grad_rotation: Mat3,
    pub grad_translation: Vec3,
    pub grad_scale: f64,
}

impl PosedSdf<'_> {
    pub fn value(&self, p: &Vec3) -> f64 {
        let local = self.rotation.transpose() * (p - self.translation) / self.scale;
        self.scale * self.grid.sample(&local).0
    }

    pub fn sample(&self, p: &Vec3) -> PosedSample {
        let q = p - self.translation;
        let local = self.rotation.transpose() * q / self.scale;
        let (f, g) = self.grid.sample(&local);
        let rg = self.rotation * g;
        PosedSample {
            value: self.scale * f,
            grad_point: rg,
            grad_rotation: q * g.transpose(),
            grad_translation: -rg,
            grad_scale: f - g.dot(&local),
        }
    }
}

/// Grid for a deforming mesh with fixed topology, rebuilt only when some
/// vertex has moved more than half a cell since the last build.
#[derive(Debug, Clone)]
pub struct CachedSdf {
    pub grid: SdfGrid,
    reference: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    resolution: usize,
    pub rebuilds: usize,
}

impl CachedSdf {
    pub fn new(mesh: &TriMesh, resolution: usize) -> Result<Self> {
        Ok(Self {
            grid: SdfGrid::build(mesh, resolution)?,
            reference: mesh.vertices.clone(),
            faces: mesh.faces.clone(),
            resolution,
            rebuilds: 0,
        })
    }

    /// Returns whether the grid was rebuilt.
    pub fn update(&mut self, vertices: &[Vec3]) -> Result<bool> {
        let limit = 0.5 * self.grid.cell_size;
        let moved = vertices.len() != self.reference.len()
            || vertices
                .iter()
                .zip(&self.reference)
                .any(|(a, b)| (a - b).norm() > limit);
        if !moved {
            return Ok(false);
        }
        let mesh = TriMesh {
            vertices: vertices.to_vec(),
            faces: self.faces.clone(),
        };
        self.grid = SdfGrid::build(&mesh, self.resolution)?;
        self.reference = mesh.vertices;
        self.rebuilds += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn unit_cube() -> SdfGrid {
        SdfGrid::build(&TriMesh::cube(1.0, 1), DEFAULT_RESOLUTION).unwrap()
    }

    #[test]
    fn cube_center_and_outside() {
        let g = unit_cube();
        // the interpolant misses the kink at the center by exactly half a cell
        let half = 0.5 * g.cell_size + 1e-12;
        let (v, _) = query_sdf(&g, &[Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
        assert!((v[0] + 0.5).abs() <= half, "{}", v[0]);
        assert!((v[1] - 0.5).abs() <= half, "{}", v[1]);
    }

    #[test]
    fn padding_encloses_mesh() {
        let g = unit_cube();
        let (lo, hi) = g.bounds();
        for a in 0..3 {
            assert!(lo[a] <= -0.5 - 2.0 * g.cell_size + 1e-12);
            assert!(hi[a] >= 0.5 + 2.0 * g.cell_size - 1e-12);
        }
        // every boundary node is outside
        let n = g.resolution;
        for j in 0..n {
            for k in 0..n {
                assert!(g.node(0, j, k) > 0.0 && g.node(n - 1, j, k) > 0.0);
            }
        }
    }

    #[test]
    fn open_sheet_rejected() {
        let sheet = TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        match SdfGrid::build(&sheet, 8) {
            Err(Error::NotWatertight { count, .. }) => assert_eq!(count, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interpolation_identities() {
        let g = unit_cube();
        let a = g.node_position(10, 12, 7);
        let b = g.node_position(11, 12, 7);
        assert_eq!(g.sample(&a).0, g.node(10, 12, 7));
        assert_eq!(query_sdf(&g, &[a]).0[0], g.node(10, 12, 7));
        let mid = g.sample(&((a + b) / 2.0)).0;
        assert!((mid - (g.node(10, 12, 7) + g.node(11, 12, 7)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn far_points_are_free() {
        let g = SdfGrid::build(&TriMesh::icosphere(0.05, 2), DEFAULT_RESOLUTION).unwrap();
        let (v, _) = query_sdf(&g, &[Vec3::new(10.0, 0.0, 0.0)]);
        assert!(v[0] > 9.0);
        assert_eq!(phi(&g, &[Vec3::new(10.0, 0.0, 0.0)]), vec![0.0]);
    }

    #[test]
    fn phi_examples() {
        let g = unit_cube();
        let p = phi(&g, &[Vec3::zeros(), Vec3::new(0.8, 0.0, 0.0)]);
        assert!((p[0] - 0.5).abs() < g.cell_size);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn exact_gradient_matches_differences() {
        let g = SdfGrid::build(&TriMesh::icosphere(0.05, 2), 16).unwrap();
        let h = 1e-7;
        for p in [
            Vec3::new(0.011, -0.023, 0.017),
            Vec3::new(0.2, 0.01, -0.03),
            Vec3::new(-0.09, 0.3, 0.5),
        ] {
            let (_, grad) = g.sample(&p);
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let fd = (g.sample(&(p + e)).0 - g.sample(&(p - e)).0) / (2.0 * h);
                assert!((fd - grad[a]).abs() < 1e-6, "{fd} vs {}", grad[a]);
            }
        }
    }

    #[test]
    fn posed_gradients_match_differences() {
        let g = SdfGrid::build(&TriMesh::icosphere(0.05, 2), 16).unwrap();
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.9).into_inner();
        let posed = PosedSdf {
            grid: &g,
            rotation: rot,
            translation: Vec3::new(0.01, 0.02, 0.5),
            scale: 1.3,
        };
        let p = Vec3::new(0.03, 0.01, 0.52);
        let s = posed.sample(&p);
        assert!((s.value - posed.value(&p)).abs() < 1e-15);
        let h = 1e-7;
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let fd = (posed.value(&(p + e)) - posed.value(&(p - e))) / (2.0 * h);
            assert!((fd - s.grad_point[a]).abs() < 1e-6);
            let shifted = |d: f64| PosedSdf { translation: posed.translation + e * (d / h), ..posed }.value(&p);
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - s.grad_translation[a]).abs() < 1e-6);
        }
        let scaled = |d: f64| PosedSdf { scale: posed.scale + d, ..posed }.value(&p);
        let fd = (scaled(h) - scaled(-h)) / (2.0 * h);
        assert!((fd - s.grad_scale).abs() < 1e-6);
        for r in 0..3 {
            for c in 0..3 {
                let mut m = posed.rotation;
                m[(r, c)] += h;
                let plus = PosedSdf { rotation: m, ..posed }.value(&p);
                m[(r, c)] -= 2.0 * h;
                let minus = PosedSdf { rotation: m, ..posed }.value(&p);
                assert!(((plus - minus) / (2.0 * h) - s.grad_rotation[(r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cache_rebuilds_past_half_cell() {
        let mesh = TriMesh::icosphere(0.05, 2);
        let mut cache = CachedSdf::new(&mesh, 16).unwrap();
        let small: Vec<Vec3> = mesh.vertices.iter().map(|v| v * 1.01).collect();
        assert!(!cache.update(&small).unwrap());
        let big: Vec<Vec3> = mesh.vertices.iter().map(|v| v * 1.5).collect();
        assert!(cache.update(&big).unwrap());
        assert_eq!(cache.rebuilds, 1);
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        assert_eq!(closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c), a);
        let f = closest_point_on_triangle(&Vec3::new(0.2, 0.2, 3.0), &a, &b, &c);
        assert!((f - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        let e = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((e - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }
}
