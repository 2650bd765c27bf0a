use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Indexed triangle mesh in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    /// Builds a mesh, rejecting out-of-range indices and zero-area faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad}, mesh has {n} vertices"
                )));
            }
            let [a, b, c] = self.corners(fi);
            let cross = (b - a).cross(&(c - a)).norm();
            let scale = (b - a)
                .norm_squared()
                .max((c - a).norm_squared())
                .max((c - b).norm_squared());
            if !(cross > 1e-12 * scale) || scale == 0.0 {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(())
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Checks that every directed edge is matched by exactly one opposite
    /// directed edge, i.e. each undirected edge borders exactly two
    /// consistently wound faces.
    pub fn check_watertight(&self) -> Result<()> {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        let mut bad: Vec<(u32, u32)> = directed
            .iter()
            .filter(|(&(a, b), &count)| count != 1 || directed.get(&(b, a)).copied() != Some(1))
            .map(|(&(a, b), _)| (a.min(b), a.max(b)))
            .collect();
        if self.faces.is_empty() {
            return Err(Error::NotWatertight {
                count: 0,
                edges: Vec::new(),
            });
        }
        if bad.is_empty() {
            return Ok(());
        }
        bad.sort_unstable();
        bad.dedup();
        let count = bad.len();
        bad.truncate(8);
        Err(Error::NotWatertight { count, edges: bad })
    }

    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3, scale: f64) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|v| scale * (rotation * v) + translation)
                .collect(),
            faces: self.faces.clone(),
        }
    }

    /// Mirrors across the x = 0 plane, flipping winding to keep normals outward.
    pub fn mirrored_x(&self) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|v| Vec3::new(-v.x, v.y, v.z))
                .collect(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Uniform area-weighted surface samples, returned as (face, barycentric)
    /// pairs so that the same samples can be re-posed with any vertex set.
    pub fn sample_surface(&self, count: usize, seed: u64) -> Vec<(usize, [f64; 3])> {
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.corners(f);
            total += 0.5 * (b - a).cross(&(c - a)).norm();
            cumulative.push(total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let target = rng.random::<f64>() * total;
                let face = cumulative
                    .partition_point(|&c| c < target)
                    .min(self.faces.len() - 1);
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                (face, [1.0 - u - v, u, v])
            })
            .collect()
    }

    /// Evaluates barycentric samples on an arbitrary vertex set sharing this
    /// mesh's connectivity.
    pub fn eval_samples(&self, vertices: &[Vec3], samples: &[(usize, [f64; 3])]) -> Vec<Vec3> {
        samples
            .iter()
            .map(|&(f, w)| {
                let [a, b, c] = self.faces[f];
                vertices[a as usize] * w[0] + vertices[b as usize] * w[1] + vertices[c as usize] * w[2]
            })
            .collect()
    }

    /// Axis-aligned cube of edge `size` centered at the origin, each side
    /// split into `subdivisions x subdivisions` quads.
    pub fn cube(size: f64, subdivisions: usize) -> Self {
        let n = subdivisions.max(1) as i64;
        // (normal axis, positive side, u axis, v axis) with u x v = outward normal
        let sides: [(usize, bool, usize, usize); 6] = [
            (0, true, 1, 2),
            (0, false, 2, 1),
            (1, true, 2, 0),
            (1, false, 0, 2),
            (2, true, 0, 1),
            (2, false, 1, 0),
        ];
        let mut index: HashMap<[i64; 3], u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut vertex = |lattice: [i64; 3], vertices: &mut Vec<Vec3>| -> u32 {
            *index.entry(lattice).or_insert_with(|| {
                vertices.push(Vec3::new(
                    (lattice[0] as f64 / n as f64 - 0.5) * size,
                    (lattice[1] as f64 / n as f64 - 0.5) * size,
                    (lattice[2] as f64 / n as f64 - 0.5) * size,
                ));
                (vertices.len() - 1) as u32
            })
        };
        for (axis, positive, u, v) in sides {
            let at = |a: i64, b: i64| {
                let mut l = [0i64; 3];
                l[axis] = if positive { n } else { 0 };
                l[u] = a;
                l[v] = b;
                l
            };
            for a in 0..n {
                for b in 0..n {
                    let p00 = vertex(at(a, b), &mut vertices);
                    let p10 = vertex(at(a + 1, b), &mut vertices);
                    let p11 = vertex(at(a + 1, b + 1), &mut vertices);
                    let p01 = vertex(at(a, b + 1), &mut vertices);
                    faces.push([p00, p10, p11]);
                    faces.push([p00, p11, p01]);
                }
            }
        }
        Self { vertices, faces }
    }

    /// Geodesic sphere from a subdivided icosahedron: level `k` has
    /// `20 * 4^k` faces.
    pub fn icosphere(radius: f64, level: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
            let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let m = (vertices[a as usize] + vertices[b as usize]).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for v in &mut vertices {
            *v *= radius;
        }
        Self { vertices, faces }
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parses an ASCII OBJ containing vertices and triangles. Other records
    /// (normals, texture coordinates, groups) are ignored.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let coords: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::InvalidMesh(format!("line {}: {e}", lineno + 1)))?;
                    if coords.len() != 3 {
                        return Err(Error::InvalidMesh(format!(
                            "line {}: vertex needs 3 coordinates",
                            lineno + 1
                        )));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<i64> = it
                        .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::InvalidMesh(format!("line {}: {e}", lineno + 1)))?;
                    if idx.len() != 3 {
                        return Err(Error::InvalidMesh(format!(
                            "line {}: only triangular faces are supported",
                            lineno + 1
                        )));
                    }
                    let mut face = [0u32; 3];
                    for (k, &i) in idx.iter().enumerate() {
                        let resolved = if i > 0 {
                            i - 1
                        } else {
                            vertices.len() as i64 + i
                        };
                        if resolved < 0 {
                            return Err(Error::InvalidMesh(format!(
                                "line {}: invalid vertex index {i}",
                                lineno + 1
                            )));
                        }
                        face[k] = resolved as u32;
                    }
                    faces.push(face);
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}
