//! Static Eulerian graph: cell nodes, owner/neighbour edges and the
//! geometric features consumed by the Eulerian branch.

use super::boundary::{self, BoundaryClass, PlaneAxes};
use super::polymesh::PolyMesh;
use crate::consts::{L_REF, U_REF};
use crate::error::{Error, Result};
use crate::geom::{Rect, Vec2};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Number of RANS state channels `(Ux, Uy, p, k, omega)`.
pub const N_STATE: usize = 5;
/// Width of the per-edge geometric descriptor.
pub const EDGE_GEOM: usize = 6;
/// Rows of the face-type embedding.
pub const N_FACE_TYPES: usize = 4;
/// Scalar node features before the boundary embedding is appended.
pub const NODE_SCALARS: usize = N_STATE + 4 + 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EulerianGraph {
    pub centroids: Vec<Vec2>,
    /// Cell volumes (m^3, including the extrusion depth).
    pub volumes: Vec<f64>,
    pub bc_id: Vec<u8>,
    pub d_wall: Vec<f64>,
    pub wall_normal: Vec<Vec2>,
    pub bbox: Rect,
    /// Directed `(i, j)` pairs; features are expressed from `i`.
    pub edges: Vec<(u32, u32)>,
    pub edge_geom: Vec<[f64; EDGE_GEOM]>,
    /// Face area (m^2) of each directed edge.
    pub edge_area: Vec<f64>,
    pub face_type: Vec<u8>,
    pub inlet_velocity: Vec2,
    /// Carrier state per cell (SI units).
    pub state: Vec<[f64; N_STATE]>,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over rows of equal width. A zero deviation is replaced by
    /// one and logged.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, width: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        for r in rows {
            n += 1;
            for c in 0..width {
                let d = r[c] - mean[c];
                mean[c] += d / n as f64;
                m2[c] += d * (r[c] - mean[c]);
            }
        }
        let std = m2
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let s = if n > 0 { (v / n as f64).sqrt() } else { 0.0 };
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    log::warn!("channel {c} has zero spread; using unit std");
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

impl EulerianGraph {
    pub fn n_cells(&self) -> usize {
        self.centroids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Node scalar features: z-scored state (5), bbox distances over L_ref
    /// (4), inlet vector over U_ref (2). Row-major, `NODE_SCALARS` wide.
    pub fn node_scalars(&self, state: &[[f64; N_STATE]], stats: &ChannelStats) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_cells() * NODE_SCALARS);
        let vin = self.inlet_velocity / U_REF;
        for (c, q) in self.centroids.iter().zip(state) {
            for k in 0..N_STATE {
                out.push((q[k] - stats.mean[k]) / stats.std[k]);
            }
            for d in self.bbox.signed_distances(*c) {
                out.push(d / L_REF);
            }
            out.push(vin.x);
            out.push(vin.y);
        }
        out
    }
}

/// Assemble the graph from a parsed mesh, the per-cell state and the inlet
/// velocity.
pub fn build_eulerian_graph(
    mesh: &PolyMesh,
    state: Vec<[f64; N_STATE]>,
    inlet_velocity: Vec2,
) -> Result<EulerianGraph> {
    mesh.require_cells()?;
    if state.len() != mesh.n_cells() {
        return Err(Error::Shape(format!(
            "state has {} rows for {} cells",
            state.len(),
            mesh.n_cells()
        )));
    }
    let geom = mesh.geometry();
    let classes = boundary::classify_patches(mesh);
    let axes: PlaneAxes = boundary::detect_plane(mesh, &geom, &classes);
    let bc_id = boundary::assign_cell_bc(mesh, &classes)?;
    let centroids: Vec<Vec2> = geom.cell_centroids.iter().map(|&c| axes.project(c)).collect();
    let mids: Vec<Vec2> = geom.face_midpoints.iter().map(|&m| axes.project(m)).collect();
    let walls = boundary::wall_faces(mesh, &classes);
    let (d_wall, wall_normal) = boundary::wall_distance(&centroids, &mids, &walls)?;

    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &mesh.points {
        let q = axes.project(*p);
        lo = Vec2::new(lo.x.min(q.x), lo.y.min(q.y));
        hi = Vec2::new(hi.x.max(q.x), hi.y.max(q.y));
    }
    let bbox = Rect::new(lo, hi);

    let ni = mesh.n_internal_faces();
    let mut edges = Vec::with_capacity(2 * ni);
    let mut edge_geom = Vec::with_capacity(2 * ni);
    let mut edge_area = Vec::with_capacity(2 * ni);
    let mut face_type = Vec::with_capacity(2 * ni);
    for f in 0..ni {
        let (o, n) = (mesh.owner[f], mesh.neighbour[f]);
        let s = geom.face_area_vectors[f];
        let area = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        let normal = Vec2::new(s[axes.a], s[axes.b]).normalized();
        let delta = centroids[n] - centroids[o];
        let dist = delta.norm();
        if !(dist > 0.0) {
            return Err(Error::Structure(format!("face {f} joins coincident centroids")));
        }
        let sep = delta / dist;
        let ft = face_type_id(bc_id[o], bc_id[n]);
        for (i, j, nn, ss) in [(o, n, normal, sep), (n, o, -normal, -sep)] {
            edges.push((i as u32, j as u32));
            edge_geom.push([nn.x, nn.y, area / (L_REF * L_REF), dist / L_REF, ss.x, ss.y]);
            edge_area.push(area);
            face_type.push(ft);
        }
    }

    Ok(EulerianGraph {
        centroids,
        volumes: geom.cell_volumes,
        bc_id,
        d_wall,
        wall_normal,
        bbox,
        edges,
        edge_geom,
        edge_area,
        face_type,
        inlet_velocity,
        state,
    })
}

/// 0 interior-interior, 1 interior-boundary, 2 boundary-boundary.
fn face_type_id(a: u8, b: u8) -> u8 {
    let ia = a == BoundaryClass::Interior.id();
    let ib = b == BoundaryClass::Interior.id();
    match (ia, ib) {
        (true, true) => 0,
        (false, false) => 2,
        _ => 1,
    }
}

const MAGIC: &[u8; 4] = b"EGRF";
const VERSION: u16 = 1;

#[derive(Clone, Copy)]
enum Dtype {
    F64 = 1,
    U8 = 2,
    U32 = 3,
}

fn write_section<W: Write>(w: &mut W, name: &str, dtype: Dtype, count: u64) -> Result<()> {
    w.write_u8(name.len() as u8)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(dtype as u8)?;
    w.write_u64::<LittleEndian>(count)?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, name: &str, vals: &[f64]) -> Result<()> {
    write_section(w, name, Dtype::F64, vals.len() as u64)?;
    for v in vals {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

/// Serialize the graph in the EGRF binary layout.
pub fn write_graph<W: Write>(g: &EulerianGraph, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(g.n_cells() as u32)?;
    w.write_u32::<LittleEndian>(g.n_edges() as u32)?;
    let sections: u16 = 14;
    w.write_u16::<LittleEndian>(sections)?;
    let col = |f: &dyn Fn(usize) -> f64, n: usize| (0..n).map(f).collect::<Vec<f64>>();
    let nc = g.n_cells();
    let ne = g.n_edges();
    write_f64s(w, "centroid_x", &col(&|i| g.centroids[i].x, nc))?;
    write_f64s(w, "centroid_y", &col(&|i| g.centroids[i].y, nc))?;
    write_f64s(w, "volume", &g.volumes)?;
    write_f64s(w, "d_wall", &g.d_wall)?;
    write_f64s(w, "wall_normal_x", &col(&|i| g.wall_normal[i].x, nc))?;
    write_f64s(w, "wall_normal_y", &col(&|i| g.wall_normal[i].y, nc))?;
    let st: Vec<f64> = g.state.iter().flat_map(|q| q.iter().copied()).collect();
    write_f64s(w, "state", &st)?;
    write_f64s(w, "bbox", &[g.bbox.min.x, g.bbox.min.y, g.bbox.max.x, g.bbox.max.y])?;
    write_f64s(w, "inlet_velocity", &[g.inlet_velocity.x, g.inlet_velocity.y])?;
    let eg: Vec<f64> = g.edge_geom.iter().flat_map(|e| e.iter().copied()).collect();
    write_f64s(w, "edge_geom", &eg)?;
    write_f64s(w, "edge_area", &g.edge_area)?;
    write_section(w, "bc_id", Dtype::U8, nc as u64)?;
    w.write_all(&g.bc_id)?;
    write_section(w, "edges", Dtype::U32, 2 * ne as u64)?;
    for (i, j) in &g.edges {
        w.write_u32::<LittleEndian>(*i)?;
        w.write_u32::<LittleEndian>(*j)?;
    }
    write_section(w, "face_type", Dtype::U8, ne as u64)?;
    w.write_all(&g.face_type)?;
    Ok(())
}

enum Section {
    F(Vec<f64>),
    B(Vec<u8>),
    U(Vec<u32>),
}

pub fn read_graph<R: Read>(r: &mut R) -> Result<EulerianGraph> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an EGRF mesh-graph file".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EGRF version {version}")));
    }
    let nc = r.read_u32::<LittleEndian>()? as usize;
    let ne = r.read_u32::<LittleEndian>()? as usize;
    let nsec = r.read_u16::<LittleEndian>()?;
    let mut secs = std::collections::HashMap::new();
    for _ in 0..nsec {
        let len = r.read_u8()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let dtype = r.read_u8()?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        if count > (1 << 34) {
            return Err(Error::Format(format!("section '{name}' too large")));
        }
        let sec = match dtype {
            1 => {
                let mut v = vec![0.0; count];
                r.read_f64_into::<LittleEndian>(&mut v)?;
                Section::F(v)
            }
            2 => {
                let mut v = vec![0u8; count];
                r.read_exact(&mut v)?;
                Section::B(v)
            }
            3 => {
                let mut v = vec![0u32; count];
                r.read_u32_into::<LittleEndian>(&mut v)?;
                Section::U(v)
            }
            d => return Err(Error::Format(format!("unknown dtype {d} in section '{name}'"))),
        };
        secs.insert(name, sec);
    }
    let mut f = |name: &str, n: usize| -> Result<Vec<f64>> {
        match secs.remove(name) {
            Some(Section::F(v)) if v.len() == n => Ok(v),
            Some(_) => Err(Error::Format(format!("section '{name}' has wrong type or length"))),
            None => Err(Error::Format(format!("missing section '{name}'"))),
        }
    };
    let cx = f("centroid_x", nc)?;
    let cy = f("centroid_y", nc)?;
    let volumes = f("volume", nc)?;
    let d_wall = f("d_wall", nc)?;
    let nx = f("wall_normal_x", nc)?;
    let ny = f("wall_normal_y", nc)?;
    let st = f("state", nc * N_STATE)?;
    let bb = f("bbox", 4)?;
    let vin = f("inlet_velocity", 2)?;
    let eg = f("edge_geom", ne * EDGE_GEOM)?;
    let edge_area = f("edge_area", ne)?;
    let bc_id = match secs.remove("bc_id") {
        Some(Section::B(v)) if v.len() == nc => v,
        _ => return Err(Error::Format("bad or missing section 'bc_id'".into())),
    };
    let edges_raw = match secs.remove("edges") {
        Some(Section::U(v)) if v.len() == 2 * ne => v,
        _ => return Err(Error::Format("bad or missing section 'edges'".into())),
    };
    let face_type = match secs.remove("face_type") {
        Some(Section::B(v)) if v.len() == ne => v,
        _ => return Err(Error::Format("bad or missing section 'face_type'".into())),
    };
    if edges_raw.iter().any(|&i| i as usize >= nc) {
        return Err(Error::Format("edge endpoint out of range".into()));
    }
    Ok(EulerianGraph {
        centroids: cx.iter().zip(&cy).map(|(&x, &y)| Vec2::new(x, y)).collect(),
        volumes,
        bc_id,
        d_wall,
        wall_normal: nx.iter().zip(&ny).map(|(&x, &y)| Vec2::new(x, y)).collect(),
        bbox: Rect::new(Vec2::new(bb[0], bb[1]), Vec2::new(bb[2], bb[3])),
        edges: edges_raw.chunks(2).map(|c| (c[0], c[1])).collect(),
        edge_geom: eg
            .chunks(EDGE_GEOM)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect(),
        edge_area,
        face_type,
        inlet_velocity: Vec2::new(vin[0], vin[1]),
        state: st
            .chunks(N_STATE)
            .map(|c| [c[0], c[1], c[2], c[3], c[4]])
            .collect(),
    })
}

pub fn save_graph(g: &EulerianGraph, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    write_graph(g, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: &std::path::Path) -> Result<EulerianGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_graph(&mut bytes.as_slice())
}
