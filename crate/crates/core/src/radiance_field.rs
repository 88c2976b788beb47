//! Explicit voxel radiance field: per-cell density and color, sampled with
//! trilinear interpolation between cell centers.
//!
//! Cell `(i, j, k)` is centered at `min + (i + 0.5, j + 0.5, k + 0.5) * cell`.
//! Inside the box but within half a cell of a face, interpolation clamps to
//! the outermost centers. Outside the box the field is empty: zero density
//! and black.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};

pub type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::invalid(format!(
                "bounding box min {min:?} must be strictly below max {max:?}"
            )));
        }
        Ok(BoundingBox { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Slab test; returns the parametric entry and exit distances.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let o = ray.origin.to_array();
        let d = ray.direction.to_array();
        let lo = self.min.to_array();
        let hi = self.max.to_array();
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Read access shared by the stored grid and the optimizer's parameters.
pub trait RadianceField: Sync {
    fn bbox(&self) -> &BoundingBox;

    /// Density and color at `point`. Color does not depend on `direction`.
    fn sample(&self, point: Vec3, direction: Vec3) -> (f64, Rgb);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridDims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        Ok(GridDims { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    /// Parses `nx,ny,nz` or a single `n`.
    pub fn parse(text: &str) -> Result<Self> {
        let v = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad grid dimensions `{text}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        match v.as_slice() {
            [n] => Self::cube(*n),
            [x, y, z] => Self::new(*x, *y, *z),
            _ => Err(Error::invalid(format!("bad grid dimensions `{text}`"))),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }
}

/// Eight trilinear corner cells and their weights for a point inside `bbox`.
pub fn trilinear_corners(dims: GridDims, bbox: &BoundingBox, p: Vec3) -> Option<[(usize, f64); 8]> {
    if !bbox.contains(p) {
        return None;
    }
    let ext = bbox.extent();
    let rel = p - bbox.min;
    let axis = |r: f64, e: f64, n: usize| -> (usize, usize, f64) {
        let g = (r / e * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        if n == 1 {
            return (0, 0, 0.0);
        }
        let i0 = (g.floor() as usize).min(n - 2);
        (i0, i0 + 1, g - i0 as f64)
    };
    let (x0, x1, fx) = axis(rel.x, ext.x, dims.nx);
    let (y0, y1, fy) = axis(rel.y, ext.y, dims.ny);
    let (z0, z1, fz) = axis(rel.z, ext.z, dims.nz);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    Some([
        (dims.index(x0, y0, z0), gx * gy * gz),
        (dims.index(x1, y0, z0), fx * gy * gz),
        (dims.index(x0, y1, z0), gx * fy * gz),
        (dims.index(x1, y1, z0), fx * fy * gz),
        (dims.index(x0, y0, z1), gx * gy * fz),
        (dims.index(x1, y0, z1), fx * gy * fz),
        (dims.index(x0, y1, z1), gx * fy * fz),
        (dims.index(x1, y1, z1), fx * fy * fz),
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: GridDims,
    bbox: BoundingBox,
    density: Vec<f32>,
    color: Vec<[f32; 3]>,
}

impl VoxelGrid {
    pub fn new(dims: GridDims, bbox: BoundingBox, density: Vec<f32>, color: Vec<[f32; 3]>) -> Result<Self> {
        if density.len() != dims.len() || color.len() != dims.len() {
            return Err(Error::invalid(format!(
                "grid {}x{}x{} needs {} cells, got {} densities and {} colors",
                dims.nx,
                dims.ny,
                dims.nz,
                dims.len(),
                density.len(),
                color.len()
            )));
        }
        if let Some(i) = density.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid(format!(
                "density at cell {i} is {} (must be finite and >= 0)",
                density[i]
            )));
        }
        if let Some(i) = color
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::invalid(format!("color at cell {i} outside [0, 1]")));
        }
        Ok(VoxelGrid {
            dims,
            bbox,
            density,
            color,
        })
    }

    pub fn uniform(dims: GridDims, bbox: BoundingBox, density: f32, color: [f32; 3]) -> Result<Self> {
        Self::new(dims, bbox, vec![density; dims.len()], vec![color; dims.len()])
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn density(&self) -> &[f32] {
        &self.density
    }

    pub fn color(&self) -> &[[f32; 3]] {
        &self.color
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let e = self.bbox.extent();
        self.bbox.min
            + Vec3::new(
                (i as f64 + 0.5) * e.x / self.dims.nx as f64,
                (j as f64 + 0.5) * e.y / self.dims.ny as f64,
                (k as f64 + 0.5) * e.z / self.dims.nz as f64,
            )
    }

    /// Writes the little-endian `VXRF` v1 layout.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.dims.len();
        let mut out = Vec::with_capacity(4 + 16 + 48 + n * 16);
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        for d in [self.dims.nx, self.dims.ny, self.dims.nz] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.bbox.min.to_array().iter().chain(self.bbox.max.to_array().iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in &self.density {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for c in &self.color {
            for ch in c {
                out.extend_from_slice(&ch.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 12 + 48;
        if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
            return Err(Error::Format(format!(
                "bad magic: expected `VXRF`, found {:?}",
                &bytes[..bytes.len().min(4)]
            )));
        }
        if bytes.len() < HEADER {
            return Err(Error::Format(format!(
                "length inconsistency: header needs {HEADER} bytes, file has {}",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != GRID_VERSION {
            return Err(Error::Format(format!(
                "unsupported grid version {version} (expected {GRID_VERSION})"
            )));
        }
        let (nx, ny, nz) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let dims = GridDims::new(nx, ny, nz).map_err(|e| Error::Format(e.to_string()))?;
        let bbox = BoundingBox::new(
            Vec3::new(f64_at(20), f64_at(28), f64_at(36)),
            Vec3::new(f64_at(44), f64_at(52), f64_at(60)),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let n = dims.len();
        let expected = n
            .checked_mul(16)
            .and_then(|p| p.checked_add(HEADER))
            .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "length inconsistency: {nx}x{ny}x{nz} grid needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let f32s = |start: usize, count: usize| {
            bytes[start..start + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        };
        let density: Vec<f32> = f32s(HEADER, n).collect();
        let flat: Vec<f32> = f32s(HEADER + 4 * n, 3 * n).collect();
        let color = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        VoxelGrid::new(dims, bbox, density, color).map_err(|e| Error::Format(e.to_string()))
    }
}

const GRID_MAGIC: &[u8; 4] = b"VXRF";
const GRID_VERSION: u32 = 1;

impl RadianceField for VoxelGrid {
    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    fn sample(&self, point: Vec3, _direction: Vec3) -> (f64, Rgb) {
        let Some(corners) = trilinear_corners(self.dims, &self.bbox, point) else {
            return (0.0, [0.0; 3]);
        };
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for (idx, w) in corners {
            sigma += w * self.density[idx] as f64;
            let c = self.color[idx];
            for ch in 0..3 {
                rgb[ch] += w * c[ch] as f64;
            }
        }
        (sigma, rgb)
    }
}

/// Human-editable description of a synthetic scene (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    #[serde(default)]
    pub background_density: f64,
    #[serde(default)]
    pub background_color: [f64; 3],
    #[serde(default, rename = "primitive")]
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub density: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    fn contains(&self, p: Vec3) -> bool {
        match self {
            Shape::Sphere { center, radius } => (p - Vec3::from_array(*center)).norm() <= *radius,
            Shape::Box { min, max } => {
                let (lo, hi) = (Vec3::from_array(*min), Vec3::from_array(*max));
                p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Shape::Sphere { center, radius } => {
                let c = Vec3::from_array(*center);
                let r = Vec3::new(*radius, *radius, *radius);
                (c - r, c + r)
            }
            Shape::Box { min, max } => (Vec3::from_array(*min), Vec3::from_array(*max)),
        }
    }
}

fn valid_color(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn bbox(&self) -> Result<BoundingBox> {
        BoundingBox::new(Vec3::from_array(self.bbox_min), Vec3::from_array(self.bbox_max))
    }

    pub fn validate(&self) -> Result<()> {
        let bbox = self.bbox()?;
        if !(self.background_density >= 0.0 && self.background_density.is_finite()) {
            return Err(Error::invalid("background_density must be finite and >= 0"));
        }
        if !valid_color(&self.background_color) {
            return Err(Error::invalid("background_color channels must lie in [0, 1]"));
        }
        let eps = 1e-9;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0 && p.density.is_finite()) {
                return Err(Error::invalid(format!("primitive {i}: density must be finite and >= 0")));
            }
            if !valid_color(&p.color) {
                return Err(Error::invalid(format!("primitive {i}: color channels must lie in [0, 1]")));
            }
            match &p.shape {
                Shape::Sphere { radius, .. } if !(*radius > 0.0) => {
                    return Err(Error::invalid(format!("primitive {i}: sphere radius must be > 0")));
                }
                Shape::Box { min, max } if (0..3).any(|a| !(min[a] < max[a])) => {
                    return Err(Error::invalid(format!("primitive {i}: box min must be below max")));
                }
                _ => {}
            }
            let (lo, hi) = p.shape.bounds();
            if lo.x < bbox.min.x - eps
                || lo.y < bbox.min.y - eps
                || lo.z < bbox.min.z - eps
                || hi.x > bbox.max.x + eps
                || hi.y > bbox.max.y + eps
                || hi.z > bbox.max.z + eps
            {
                return Err(Error::invalid(format!("primitive {i} extends outside the scene bbox")));
            }
        }
        Ok(())
    }
}

/// Maps a TOML error to a [`Error::Parse`] carrying the 1-based line.
pub(crate) fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        line,
        message: e.message().to_string(),
    }
}

/// Voxelizes `spec` by testing each cell center; later primitives win.
pub fn build_procedural_scene(spec: &SceneSpec, dims: GridDims) -> Result<VoxelGrid> {
    spec.validate()?;
    let dims = GridDims::new(dims.nx, dims.ny, dims.nz)?;
    let bbox = spec.bbox()?;
    let bg_color = spec.background_color.map(|c| c as f32);
    let mut grid = VoxelGrid::uniform(dims, bbox, spec.background_density as f32, bg_color)?;
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let c = grid.cell_center(i, j, k);
                let idx = dims.index(i, j, k);
                for p in &spec.primitives {
                    if p.shape.contains(c) {
                        grid.density[idx] = p.density as f32;
                        grid.color[idx] = p.color.map(|v| v as f32);
                    }
                }
            }
        }
    }
    Ok(grid)
}
