//! Structured builder for the pseudo-2-D treatment room used by the
//! reference simulator and the fixtures.

use super::polymesh::{Patch, PolyMesh};
use crate::error::{Error, Result};
use crate::geom::{cross3, dot3, sub3, Rect, Vec2};
use serde::{Deserialize, Serialize};

pub const ROOM_WIDTH: f64 = 4.0;
pub const ROOM_HEIGHT: f64 = 3.0;
pub const EXTRUSION_DEPTH: f64 = 0.01;
pub const DENTIST: Rect = Rect::new(Vec2::new(1.45, 0.0), Vec2::new(1.65, 1.50));
pub const PATIENT: Rect = Rect::new(Vec2::new(2.45, 0.60), Vec2::new(3.25, 0.78));
/// Ceiling supply opening (x range).
pub const INLET_X: (f64, f64) = (1.90, 2.10);
/// Right-wall exhaust opening (y range).
pub const OUTLET_Y: (f64, f64) = (1.44, 1.56);
/// Handpiece nozzle position.
pub const NOZZLE: Vec2 = Vec2::new(2.40, 0.90);

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    pub depth: f64,
    /// Remove the dentist and patient blocks.
    #[serde(default = "yes")]
    pub obstacles: bool,
}

fn yes() -> bool {
    true
}

impl RoomSpec {
    /// The 80 x 100 production grid (0.05 m x 0.03 m cells).
    pub fn full() -> Self {
        Self::with_cells(80, 100)
    }

    /// Coarse 20 x 15 grid for fast experiments.
    pub fn toy() -> Self {
        Self::with_cells(20, 15)
    }

    pub fn with_cells(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            width: ROOM_WIDTH,
            height: ROOM_HEIGHT,
            depth: EXTRUSION_DEPTH,
            obstacles: true,
        }
    }

    /// Plain rectangular box without obstacles.
    pub fn open_box(nx: usize, ny: usize, width: f64, height: f64) -> Self {
        Self {
            nx,
            ny,
            width,
            height,
            depth: EXTRUSION_DEPTH,
            obstacles: false,
        }
    }

    pub fn bbox(&self) -> Rect {
        Rect::new(Vec2::ZERO, Vec2::new(self.width, self.height))
    }
}

fn inside(r: &Rect, p: Vec2) -> bool {
    p.x >= r.min.x - TOL && p.x <= r.max.x + TOL && p.y >= r.min.y - TOL && p.y <= r.max.y + TOL
}

/// True when `p` lies inside one of the solid obstacles.
pub fn in_obstacle(p: Vec2) -> bool {
    DENTIST.contains(p) || PATIENT.contains(p)
}

/// Analytic distance from `p` to the nearest solid surface of the room.
pub fn analytic_wall_distance(p: Vec2, bbox: &Rect) -> f64 {
    let mut d = bbox.inner_distance(p).max(0.0);
    for r in [DENTIST, PATIENT] {
        let dx = (r.min.x - p.x).max(p.x - r.max.x).max(0.0);
        let dy = (r.min.y - p.y).max(p.y - r.max.y).max(0.0);
        d = d.min(dx.hypot(dy));
    }
    d
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    Inlet,
    Outlet,
    Floor,
    Ceiling,
    Left,
    Right,
    Dentist,
    Patient,
}

const PATCHES: [(&str, &str); 9] = [
    ("ceilingInlet", "patch"),
    ("outlet", "patch"),
    ("floor", "wall"),
    ("ceiling", "wall"),
    ("leftWall", "wall"),
    ("rightWall", "wall"),
    ("dentist", "wall"),
    ("patient", "wall"),
    ("frontAndBack", "empty"),
];

/// Build the extruded room mesh with the obstacle cells removed.
pub fn build_room_mesh(spec: &RoomSpec) -> Result<PolyMesh> {
    let (nx, ny) = (spec.nx, spec.ny);
    if nx < 2 || ny < 2 {
        return Err(Error::Config("room grid needs at least 2 x 2 cells".into()));
    }
    let dx = spec.width / nx as f64;
    let dy = spec.height / ny as f64;
    let center = |i: usize, j: usize| Vec2::new((i as f64 + 0.5) * dx, (j as f64 + 0.5) * dy);

    let mut cell_id = vec![usize::MAX; nx * ny];
    let mut n_cells = 0;
    for j in 0..ny {
        for i in 0..nx {
            let c = center(i, j);
            if !spec.obstacles || !(inside(&DENTIST, c) || inside(&PATIENT, c)) {
                cell_id[j * nx + i] = n_cells;
                n_cells += 1;
            }
        }
    }
    let active = |i: isize, j: isize| -> Option<usize> {
        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
            return None;
        }
        let id = cell_id[j as usize * nx + i as usize];
        (id != usize::MAX).then_some(id)
    };

    let pid = |i: usize, j: usize, k: usize| k * (nx + 1) * (ny + 1) + j * (nx + 1) + i;
    let mut points = Vec::with_capacity(2 * (nx + 1) * (ny + 1));
    for k in 0..2 {
        for j in 0..=ny {
            for i in 0..=nx {
                points.push([i as f64 * dx, j as f64 * dy, k as f64 * spec.depth]);
            }
        }
    }

    // Orient a quad so its normal follows `dir`.
    let orient = |mut q: Vec<usize>, dir: [f64; 3]| -> Vec<usize> {
        let p = |v: usize| points[v];
        let n = cross3(sub3(p(q[1]), p(q[0])), sub3(p(q[2]), p(q[0])));
        if dot3(n, dir) < 0.0 {
            q.reverse();
        }
        q
    };
    let x_face = |i: usize, j: usize| vec![pid(i, j, 0), pid(i, j + 1, 0), pid(i, j + 1, 1), pid(i, j, 1)];
    let y_face = |i: usize, j: usize| vec![pid(i, j, 0), pid(i + 1, j, 0), pid(i + 1, j, 1), pid(i, j, 1)];

    let mut internal: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    let mut boundary: Vec<(Side, usize, Vec<usize>)> = Vec::new();
    let mut empty: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut inlet_cands = Vec::new();
    let mut outlet_cands = Vec::new();

    for j in 0..ny {
        for i in 0..nx {
            let Some(c) = active(i as isize, j as isize) else { continue };
            let cc = center(i, j);
            let (ii, jj) = (i as isize, j as isize);
            // +x
            match active(ii + 1, jj) {
                Some(n) => internal.push((c, n, orient(x_face(i + 1, j), [1.0, 0.0, 0.0]))),
                None => {
                    let side = if i + 1 == nx {
                        outlet_cands.push((cc, boundary.len()));
                        Side::Right
                    } else {
                        obstacle_side(center(i + 1, j))
                    };
                    boundary.push((side, c, orient(x_face(i + 1, j), [1.0, 0.0, 0.0])));
                }
            }
            // -x
            if active(ii - 1, jj).is_none() {
                let side = if i == 0 { Side::Left } else { obstacle_side(center(i - 1, j)) };
                boundary.push((side, c, orient(x_face(i, j), [-1.0, 0.0, 0.0])));
            }
            // +y
            match active(ii, jj + 1) {
                Some(n) => internal.push((c, n, orient(y_face(i, j + 1), [0.0, 1.0, 0.0]))),
                None => {
                    let side = if j + 1 == ny {
                        inlet_cands.push((cc, boundary.len()));
                        Side::Ceiling
                    } else {
                        obstacle_side(center(i, j + 1))
                    };
                    boundary.push((side, c, orient(y_face(i, j + 1), [0.0, 1.0, 0.0])));
                }
            }
            // -y
            if active(ii, jj - 1).is_none() {
                let side = if j == 0 { Side::Floor } else { obstacle_side(center(i, j - 1)) };
                boundary.push((side, c, orient(y_face(i, j), [0.0, -1.0, 0.0])));
            }
            let back = vec![pid(i, j, 0), pid(i + 1, j, 0), pid(i + 1, j + 1, 0), pid(i, j + 1, 0)];
            let front = vec![pid(i, j, 1), pid(i + 1, j, 1), pid(i + 1, j + 1, 1), pid(i, j + 1, 1)];
            empty.push((c, orient(back, [0.0, 0.0, -1.0])));
            empty.push((c, orient(front, [0.0, 0.0, 1.0])));
        }
    }

    mark_opening(&mut boundary, &inlet_cands, |p| p.x, INLET_X, Side::Inlet);
    mark_opening(&mut boundary, &outlet_cands, |p| p.y, OUTLET_Y, Side::Outlet);

    internal.sort_by_key(|(o, n, _)| (*o, *n));
    boundary.sort_by_key(|(s, o, _)| (*s, *o));

    let mut faces = Vec::new();
    let mut owner = Vec::new();
    let mut neighbour = Vec::new();
    for (o, n, f) in internal {
        faces.push(f);
        owner.push(o);
        neighbour.push(n);
    }
    let sides = [
        Side::Inlet,
        Side::Outlet,
        Side::Floor,
        Side::Ceiling,
        Side::Left,
        Side::Right,
        Side::Dentist,
        Side::Patient,
    ];
    let mut patches = Vec::new();
    for (k, side) in sides.iter().enumerate() {
        let start = faces.len();
        for (_, o, f) in boundary.iter().filter(|(s, _, _)| s == side) {
            faces.push(f.clone());
            owner.push(*o);
        }
        patches.push(Patch {
            name: PATCHES[k].0.into(),
            kind: PATCHES[k].1.into(),
            n_faces: faces.len() - start,
            start_face: start,
        });
    }
    let start = faces.len();
    for (o, f) in empty {
        faces.push(f);
        owner.push(o);
    }
    patches.push(Patch {
        name: PATCHES[8].0.into(),
        kind: PATCHES[8].1.into(),
        n_faces: faces.len() - start,
        start_face: start,
    });
    PolyMesh::new(points, faces, owner, neighbour, patches, Some(n_cells))
}

fn obstacle_side(neighbour_center: Vec2) -> Side {
    if inside(&DENTIST, neighbour_center) {
        Side::Dentist
    } else {
        Side::Patient
    }
}

/// Relabel boundary faces whose owner centre falls in the opening range; on
/// grids too coarse to hit the range the nearest face is used.
fn mark_opening(
    boundary: &mut [(Side, usize, Vec<usize>)],
    cands: &[(Vec2, usize)],
    coord: impl Fn(Vec2) -> f64,
    range: (f64, f64),
    side: Side,
) {
    let mut hit = false;
    for &(c, idx) in cands {
        let v = coord(c);
        if v >= range.0 - TOL && v <= range.1 + TOL {
            boundary[idx].0 = side;
            hit = true;
        }
    }
    if !hit {
        let mid = 0.5 * (range.0 + range.1);
        if let Some(&(_, idx)) = cands
            .iter()
            .min_by(|a, b| (coord(a.0) - mid).abs().total_cmp(&(coord(b.0) - mid).abs()))
        {
            boundary[idx].0 = side;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_room_has_7704_cells() {
        let m = build_room_mesh(&RoomSpec::full()).unwrap();
        assert_eq!(m.n_cells(), 7704);
        let inlet = &m.patches[0];
        let outlet = &m.patches[1];
        assert_eq!((inlet.name.as_str(), inlet.n_faces), ("ceilingInlet", 4));
        assert_eq!((outlet.name.as_str(), outlet.n_faces), ("outlet", 4));
        assert_eq!(m.patches[8].n_faces, 2 * 7704);
    }

    #[test]
    fn volumes_and_orientation() {
        let m = build_room_mesh(&RoomSpec::toy()).unwrap();
        let g = m.geometry();
        for v in &g.cell_volumes {
            assert!((v - 0.2 * 0.2 * EXTRUSION_DEPTH).abs() < 1e-15);
        }
        // Owner-outward normals: internal faces point from owner to neighbour.
        for f in 0..m.n_internal_faces() {
            let d = sub3(g.cell_centroids[m.neighbour[f]], g.cell_centroids[m.owner[f]]);
            assert!(dot3(d, g.face_area_vectors[f]) > 0.0);
        }
    }

    #[test]
    fn wall_distance_helper() {
        let bb = RoomSpec::full().bbox();
        assert!((analytic_wall_distance(Vec2::new(2.0, 1.0), &bb) - 0.35).abs() < 1e-12);
        assert_eq!(analytic_wall_distance(Vec2::new(1.5, 1.0), &bb), 0.0);
    }
}
