//! OpenFOAM mesh ingestion and the static Eulerian graph.

pub mod boundary;
pub mod fields;
pub(crate) mod foam;
pub mod graph;
pub mod polymesh;
pub mod room;

pub use boundary::{assign_cell_bc, classify_patch, wall_distance, BoundaryClass};
pub use fields::parse_inlet_velocity;
pub use graph::{build_eulerian_graph, ChannelStats, EulerianGraph, N_STATE};
pub use polymesh::{parse_polymesh, write_polymesh, Patch, PolyMesh};
pub use room::{build_room_mesh, RoomSpec};

use crate::error::Result;
use std::path::Path;

/// Parse a case: `mesh_dir` is the `constant/polyMesh` directory, fields
/// `U`, `p`, `k`, `omega` live under `fields_dir`.
pub fn extract_case(mesh_dir: &Path, fields_dir: &Path) -> Result<EulerianGraph> {
    let mesh = parse_polymesh(mesh_dir)?;
    mesh.require_cells()?;
    let n = mesh.n_cells();
    let u = fields::read_internal_field(&fields_dir.join("U"), n, 3)?;
    let p = fields::read_internal_field(&fields_dir.join("p"), n, 1)?;
    let k = fields::read_internal_field(&fields_dir.join("k"), n, 1)?;
    let w = fields::read_internal_field(&fields_dir.join("omega"), n, 1)?;
    let vin = parse_inlet_velocity(&fields_dir.join("U"))?;
    let state = (0..n).map(|i| [u[i][0], u[i][1], p[i][0], k[i][0], w[i][0]]).collect();
    build_eulerian_graph(&mesh, state, vin)
}
