//! Binary container for hand model assets.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "HOFITHND"
//! version  u32      1
//! count    u32      number of arrays
//! header   count x { name_len u16, name utf-8, dtype u8, ndim u8, dims u64 x ndim }
//! data     arrays in header order, row-major, no padding
//! ```
//!
//! dtype codes: 1 = float64, 2 = uint32, 3 = utf-8 bytes. Required arrays:
//! `mean_vertices` f64 `[V, 3]`, `pose_basis` f64 `[K, V, 3]`, `faces` u32
//! `[F, 3]`, `joint_regressor` f64 `[J, V]`, `side` utf-8 (`left`/`right`).
//! Unknown arrays are skipped on read.

use std::collections::HashMap;
use std::path::Path;

use super::model::{HandSide, JointRegressor, ParametricHandModel};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

const MAGIC: &[u8; 8] = b"HOFITHND";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DType {
    F64 = 1,
    U32 = 2,
    Utf8 = 3,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(DType::F64),
            2 => Ok(DType::U32),
            3 => Ok(DType::Utf8),
            _ => Err(Error::InvalidAsset(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U32 => 4,
            DType::Utf8 => 1,
        }
    }
}

struct Array {
    name: &'static str,
    dtype: DType,
    dims: Vec<u64>,
    data: Vec<u8>,
}

fn f64_array(name: &'static str, dims: Vec<u64>, values: impl Iterator<Item = f64>) -> Array {
    Array {
        name,
        dtype: DType::F64,
        dims,
        data: values.flat_map(f64::to_le_bytes).collect(),
    }
}

impl ParametricHandModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let v = self.vertex_count() as u64;
        let flat = |pts: &[Vec3]| pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        let arrays = [
            f64_array("mean_vertices", vec![v, 3], flat(&self.mean_vertices).into_iter()),
            f64_array(
                "pose_basis",
                vec![self.latent_dim() as u64, v, 3],
                self.pose_basis.iter().flat_map(|b| flat(b)),
            ),
            Array {
                name: "faces",
                dtype: DType::U32,
                dims: vec![self.faces.len() as u64, 3],
                data: self
                    .faces
                    .iter()
                    .flatten()
                    .flat_map(|i| i.to_le_bytes())
                    .collect(),
            },
            f64_array(
                "joint_regressor",
                vec![self.joint_regressor.len() as u64, v],
                self.joint_regressor.to_dense(v as usize).into_iter(),
            ),
            Array {
                name: "side",
                dtype: DType::Utf8,
                dims: vec![self.side.as_str().len() as u64],
                data: self.side.as_str().as_bytes().to_vec(),
            },
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.dtype as u8);
            out.push(a.dims.len() as u8);
            for d in &a.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for a in &arrays {
            out.extend_from_slice(&a.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::InvalidAsset("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::InvalidAsset(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::InvalidAsset("array name is not utf-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            headers.push((name, dtype, dims));
        }
        let mut arrays: HashMap<String, (DType, Vec<u64>, &[u8])> = HashMap::new();
        for (name, dtype, dims) in headers {
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .and_then(|n| n.checked_mul(dtype.width()))
                .ok_or_else(|| Error::InvalidAsset(format!("array `{name}` is too large")))?;
            let data = r.take(n)?;
            arrays.insert(name, (dtype, dims, data));
        }

        let get = |name: &str, dtype: DType, ndim: usize| -> Result<(&Vec<u64>, &[u8])> {
            let (dt, dims, data) = arrays
                .get(name)
                .ok_or_else(|| Error::InvalidAsset(format!("missing array `{name}`")))?;
            if *dt != dtype || dims.len() != ndim {
                return Err(Error::InvalidAsset(format!(
                    "array `{name}` has unexpected dtype or rank"
                )));
            }
            Ok((dims, data))
        };
        let floats = |data: &[u8]| -> Vec<f64> {
            data.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let points = |vals: &[f64]| -> Vec<Vec3> {
            vals.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
        };

        let (dims, data) = get("mean_vertices", DType::F64, 2)?;
        if dims[1] != 3 {
            return Err(Error::InvalidAsset("mean_vertices must be V x 3".into()));
        }
        let v = dims[0] as usize;
        let mean_vertices = points(&floats(data));

        let (dims, data) = get("pose_basis", DType::F64, 3)?;
        if dims[1] as usize != v || dims[2] != 3 {
            return Err(Error::InvalidAsset("pose_basis must be K x V x 3".into()));
        }
        let basis_vals = floats(data);
        let pose_basis = if v == 0 {
            vec![Vec::new(); dims[0] as usize]
        } else {
            basis_vals.chunks_exact(v * 3).map(points).collect()
        };

        let (dims, data) = get("faces", DType::U32, 2)?;
        if dims[1] != 3 {
            return Err(Error::InvalidAsset("faces must be F x 3".into()));
        }
        let faces = data
            .chunks_exact(12)
            .map(|c| {
                [
                    u32::from_le_bytes(c[0..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..8].try_into().unwrap()),
                    u32::from_le_bytes(c[8..12].try_into().unwrap()),
                ]
            })
            .collect();

        let (dims, data) = get("joint_regressor", DType::F64, 2)?;
        if dims[1] as usize != v {
            return Err(Error::InvalidAsset("joint_regressor must be J x V".into()));
        }
        let joint_regressor = JointRegressor::from_dense(&floats(data), dims[0] as usize, v);

        let (_, data) = get("side", DType::Utf8, 1)?;
        let side: HandSide = std::str::from_utf8(data)
            .map_err(|_| Error::InvalidAsset("side is not utf-8".into()))?
            .parse()?;

        let model = ParametricHandModel {
            mean_vertices,
            pose_basis,
            faces,
            joint_regressor,
            side,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::InvalidAsset("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
