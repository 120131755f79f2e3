//! Marching Cubes surfaces and OBJ export.
//!
//! Vertices live in voxel coordinates: voxel `(x, y, z)` is centred on the
//! integer point `(x, y, z)`. The grid is padded with one layer of empty
//! voxels so every surface closes.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::voxgrid::{CoarseInput, OccupancyGrid};
use tables::{EDGE_TABLE, TRI_TABLE};

pub const DEFAULT_ISO: f32 = 0.5;

/// Below this, a triangle counts as degenerate and is dropped.
const MIN_AREA: f64 = 1e-12;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// Style id per vertex, when assigned.
    pub regions: Option<Vec<u16>>,
}

/// Flat arrays for JSON transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshPayload {
    pub vertices: Vec<f32>,
    pub triangles: Vec<u32>,
    pub regions: Vec<u16>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_uses(&self) -> HashMap<(u32, u32), usize> {
        let mut uses = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_uses().values().all(|&n| n == 2)
    }

    /// `V − E + F` over the vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_uses().len() as i64 + self.triangles.len() as i64
    }

    /// Signed enclosed volume; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn payload(&self) -> MeshPayload {
        MeshPayload {
            vertices: self.vertices.iter().flat_map(|v| v.map(|c| c as f32)).collect(),
            triangles: self.triangles.iter().flatten().copied().collect(),
            regions: self.regions.clone().unwrap_or_default(),
        }
    }

    /// Tags each vertex with the style of the coarse voxel covering its
    /// nearest fine voxel, falling back to the nearest occupied coarse
    /// voxel outside the shape.
    pub fn assign_regions(&mut self, coarse: &CoarseInput, level: u32) -> Result<()> {
        if level < coarse.log2() {
            bail_shape!("level {level} is below the coarse resolution 2^{}", coarse.log2());
        }
        if self.vertices.is_empty() {
            self.regions = Some(Vec::new());
            return Ok(());
        }
        let styles = coarse.filled_style_map()?;
        let shift = level - coarse.log2();
        let side = 1i64 << level;
        let cside = coarse.side();
        let regions = self
            .vertices
            .iter()
            .map(|p| {
                let c = p.map(|v| ((v.round() as i64).clamp(0, side - 1) >> shift) as usize);
                styles[c[0] + cside * (c[1] + cside * c[2])]
            })
            .collect();
        self.regions = Some(regions);
        Ok(())
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Zero-padded view of a scalar field.
struct Padded<'a> {
    dims: [usize; 3],
    values: &'a [f32],
}

impl Padded<'_> {
    fn pdims(&self) -> [usize; 3] {
        self.dims.map(|d| d + 2)
    }

    fn at(&self, p: [usize; 3]) -> f32 {
        let [dx, dy, _] = self.dims;
        if p.iter().zip(&self.dims).any(|(&c, &d)| c == 0 || c > d) {
            return 0.0;
        }
        self.values[(p[0] - 1) + dx * ((p[1] - 1) + dy * (p[2] - 1))]
    }

    /// Edge key: lower endpoint's padded linear index and axis.
    fn edge_key(&self, cell: [usize; 3], edge: usize) -> u64 {
        let [a, b] = EDGES[edge];
        let lo = [0, 1, 2].map(|i| cell[i] + CORNERS[a][i]);
        let axis = (0..3).find(|&i| CORNERS[a][i] != CORNERS[b][i]).expect("edge spans one axis");
        let [px, py, _] = self.pdims();
        ((lo[0] + px * (lo[1] + py * lo[2])) as u64) * 3 + axis as u64
    }

    fn vertex(&self, key: u64, iso: f32) -> [f64; 3] {
        let axis = (key % 3) as usize;
        let lin = (key / 3) as usize;
        let [px, py, _] = self.pdims();
        let lo = [lin % px, (lin / px) % py, lin / (px * py)];
        let mut hi = lo;
        hi[axis] += 1;
        let (va, vb) = (self.at(lo) as f64, self.at(hi) as f64);
        let t = if (vb - va).abs() < 1e-12 { 0.5 } else { (iso as f64 - va) / (vb - va) };
        let mut p = lo.map(|c| c as f64 - 1.0);
        p[axis] += t;
        p
    }
}

/// Surface of `{v > iso}` for an occupancy grid.
pub fn marching_cubes(g: &OccupancyGrid, iso: f32) -> Result<TriMesh> {
    let s = g.side();
    marching_cubes_field([s, s, s], g.values(), iso)
}

/// Marching Cubes on an x-fastest scalar field of any extent.
pub fn marching_cubes_field(dims: [usize; 3], values: &[f32], iso: f32) -> Result<TriMesh> {
    if !(iso > 0.0 && iso < 1.0) {
        bail_arg!("iso level {iso} outside (0, 1)");
    }
    if values.len() != dims.iter().product::<usize>() {
        bail_shape!("{} values for a {dims:?} field", values.len());
    }
    let field = Padded { dims, values };
    let [px, py, pz] = field.pdims();
    // cells per z-slab, merged afterwards in slab order
    let slabs: Vec<Vec<[u64; 3]>> = (0..pz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..py - 1 {
                for x in 0..px - 1 {
                    let cell = [x, y, z];
                    let mut case = 0usize;
                    for (i, c) in CORNERS.iter().enumerate() {
                        if field.at([x + c[0], y + c[1], z + c[2]]) <= iso {
                            case |= 1 << i;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    for t in TRI_TABLE[case].chunks_exact(3).take_while(|t| t[0] >= 0) {
                        tris.push([t[0], t[1], t[2]].map(|e| field.edge_key(cell, e as usize)));
                    }
                }
            }
            tris
        })
        .collect();

    let mut mesh = TriMesh::default();
    let mut ids: HashMap<u64, u32> = HashMap::new();
    for tri in slabs.into_iter().flatten() {
        let pos = tri.map(|k| field.vertex(k, iso));
        let n = cross(sub(pos[1], pos[0]), sub(pos[2], pos[0]));
        if dot(n, n).sqrt() * 0.5 < MIN_AREA {
            continue;
        }
        let idx = tri.map(|k| {
            *ids.entry(k).or_insert_with(|| {
                mesh.vertices.push(field.vertex(k, iso));
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.triangles.push(idx);
    }
    Ok(mesh)
}

/// OBJ text: a header comment, `v` lines with six decimals, 1-based `f`
/// lines.
pub fn obj_string(m: &TriMesh) -> String {
    let mut s = String::from("# voxstyle mesh\n");
    for v in &m.vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for t in &m.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn export_obj(m: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, obj_string(m)).map_err(|e| Error::io(path, e))
}

/// Reads the `v` / `f` subset written by [`obj_string`]; faces may use the
/// `a/b/c` form, of which only the position index is kept.
pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let bad = |line: &str| Error::Format(format!("OBJ line {line:?}"));
    let mut m = TriMesh::default();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
                if c.len() < 3 {
                    return Err(bad(line));
                }
                m.vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let i: u32 = t.split('/').next().unwrap_or("").parse().map_err(|_| bad(line))?;
                        if i == 0 { Err(bad(line)) } else { Ok(i - 1) }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad(line));
                }
                m.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let n = m.vertices.len() as u32;
    if m.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(Error::Format("OBJ face index out of range".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests;
