use super::polymesh::{MeshGeometry, PolyMesh};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::spatial::PointGrid;
use serde::{Deserialize, Serialize};

/// Semantic boundary class of a patch or cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum BoundaryClass {
    Interior = 0,
    Inlet = 1,
    Outlet = 2,
    Wall = 3,
    Floor = 4,
    Ceiling = 5,
    Dentist = 6,
    Patient = 7,
    SymmetryEmpty = 8,
    Unknown = 9,
}

/// Size of the boundary-id embedding domain.
pub const BC_ID_RANGE: usize = 16;

impl BoundaryClass {
    pub const ALL: [BoundaryClass; 10] = [
        BoundaryClass::Interior,
        BoundaryClass::Inlet,
        BoundaryClass::Outlet,
        BoundaryClass::Wall,
        BoundaryClass::Floor,
        BoundaryClass::Ceiling,
        BoundaryClass::Dentist,
        BoundaryClass::Patient,
        BoundaryClass::SymmetryEmpty,
        BoundaryClass::Unknown,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundaryClass::Interior => "interior",
            BoundaryClass::Inlet => "inlet",
            BoundaryClass::Outlet => "outlet",
            BoundaryClass::Wall => "wall",
            BoundaryClass::Floor => "floor",
            BoundaryClass::Ceiling => "ceiling",
            BoundaryClass::Dentist => "dentist",
            BoundaryClass::Patient => "patient",
            BoundaryClass::SymmetryEmpty => "symmetry_empty",
            BoundaryClass::Unknown => "unknown",
        }
    }

    /// Solid surfaces that count towards the wall distance.
    pub fn is_wall_type(self) -> bool {
        matches!(
            self,
            BoundaryClass::Wall
                | BoundaryClass::Floor
                | BoundaryClass::Ceiling
                | BoundaryClass::Dentist
                | BoundaryClass::Patient
        )
    }
}

/// Map a patch to its class. Empty and symmetry types win over names; the
/// name tokens are then checked case-insensitively in a fixed priority.
pub fn classify_patch(name: &str, kind: &str) -> BoundaryClass {
    let kind_l = kind.to_ascii_lowercase();
    if kind_l == "empty" || kind_l == "symmetryplane" || kind_l == "symmetry" {
        return BoundaryClass::SymmetryEmpty;
    }
    let n = name.to_ascii_lowercase();
    const ORDER: [(&str, BoundaryClass); 7] = [
        ("inlet", BoundaryClass::Inlet),
        ("outlet", BoundaryClass::Outlet),
        ("dentist", BoundaryClass::Dentist),
        ("patient", BoundaryClass::Patient),
        ("floor", BoundaryClass::Floor),
        ("ceiling", BoundaryClass::Ceiling),
        ("wall", BoundaryClass::Wall),
    ];
    ORDER
        .iter()
        .find(|(tok, _)| n.contains(tok))
        .map(|&(_, c)| c)
        .unwrap_or(BoundaryClass::Unknown)
}

pub fn classify_patches(mesh: &PolyMesh) -> Vec<BoundaryClass> {
    mesh.patches.iter().map(|p| classify_patch(&p.name, &p.kind)).collect()
}

/// Per-cell boundary id: the first non-empty boundary face in ascending face
/// order decides; everything else is interior.
pub fn assign_cell_bc(mesh: &PolyMesh, classes: &[BoundaryClass]) -> Result<Vec<u8>> {
    if classes.len() != mesh.patches.len() {
        return Err(Error::Config(format!(
            "{} classes given for {} patches",
            classes.len(),
            mesh.patches.len()
        )));
    }
    let mut face_class = vec![BoundaryClass::Interior; mesh.n_faces()];
    for (p, c) in mesh.patches.iter().zip(classes) {
        for f in p.start_face..p.start_face + p.n_faces {
            face_class[f] = *c;
        }
    }
    let mut bc = vec![BoundaryClass::Interior.id(); mesh.n_cells()];
    let mut set = vec![false; mesh.n_cells()];
    for f in mesh.n_internal_faces()..mesh.n_faces() {
        let c = face_class[f];
        if matches!(c, BoundaryClass::Interior | BoundaryClass::SymmetryEmpty) {
            continue;
        }
        let cell = mesh.owner[f];
        if !set[cell] {
            set[cell] = true;
            bc[cell] = c.id();
        }
    }
    Ok(bc)
}

/// Coordinate axes kept after dropping the extrusion axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneAxes {
    pub a: usize,
    pub b: usize,
    pub normal: usize,
}

impl PlaneAxes {
    pub fn project(&self, p: [f64; 3]) -> Vec2 {
        Vec2::new(p[self.a], p[self.b])
    }
}

/// Detect the extrusion axis from the normals of the empty patches,
/// defaulting to z.
pub fn detect_plane(mesh: &PolyMesh, geom: &MeshGeometry, classes: &[BoundaryClass]) -> PlaneAxes {
    let mut acc = [0.0f64; 3];
    for (p, c) in mesh.patches.iter().zip(classes) {
        if *c != BoundaryClass::SymmetryEmpty {
            continue;
        }
        for f in p.start_face..p.start_face + p.n_faces {
            let s = geom.face_area_vectors[f];
            for d in 0..3 {
                acc[d] += s[d].abs();
            }
        }
    }
    let mut normal = 2;
    if acc.iter().any(|&v| v > 0.0) {
        normal = (0..3).max_by(|&i, &j| acc[i].total_cmp(&acc[j])).unwrap_or(2);
    }
    let (a, b) = match normal {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    PlaneAxes { a, b, normal }
}

/// Boundary faces that count as solid for the wall distance.
pub fn wall_faces(mesh: &PolyMesh, classes: &[BoundaryClass]) -> Vec<usize> {
    let mut out = Vec::new();
    for (p, c) in mesh.patches.iter().zip(classes) {
        let solid = c.is_wall_type() || (*c == BoundaryClass::Unknown && p.kind.eq_ignore_ascii_case("wall"));
        if solid {
            out.extend(p.start_face..p.start_face + p.n_faces);
        }
    }
    out.sort_unstable();
    out
}

/// Distance from each cell centroid to the nearest wall-type face midpoint
/// and the unit vector towards it. Ties go to the lower face index; a
/// coincident midpoint yields a zero normal.
pub fn wall_distance(
    centroids: &[Vec2],
    face_midpoints: &[Vec2],
    wall_faces: &[usize],
) -> Result<(Vec<f64>, Vec<Vec2>)> {
    if wall_faces.is_empty() {
        return Err(Error::Config("no wall-type boundary faces".into()));
    }
    let pts: Vec<Vec2> = wall_faces.iter().map(|&f| face_midpoints[f]).collect();
    let grid = PointGrid::new(pts);
    let mut d = Vec::with_capacity(centroids.len());
    let mut n = Vec::with_capacity(centroids.len());
    for &c in centroids {
        let (k, _) = grid.nearest(c).expect("non-empty wall set");
        let delta = grid.points()[k] - c;
        let dist = (delta.x * delta.x + delta.y * delta.y).sqrt();
        d.push(dist);
        n.push(if dist > 0.0 { delta / dist } else { Vec2::ZERO });
    }
    Ok((d, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_examples() {
        assert_eq!(classify_patch("ceilingInlet", "patch"), BoundaryClass::Inlet);
        assert_eq!(classify_patch("frontAndBack", "empty"), BoundaryClass::SymmetryEmpty);
        assert_eq!(classify_patch("mysteryPatch", "patch"), BoundaryClass::Unknown);
        assert_eq!(classify_patch("LEFTWALL", "wall"), BoundaryClass::Wall);
        assert_eq!(classify_patch("dentistChair", "wall"), BoundaryClass::Dentist);
        assert_eq!(classify_patch("mid", "symmetryPlane"), BoundaryClass::SymmetryEmpty);
    }

    #[test]
    fn ids_fit_embedding_domain() {
        for c in BoundaryClass::ALL {
            assert!((c.id() as usize) < BC_ID_RANGE);
            assert_eq!(BoundaryClass::from_id(c.id()), Some(c));
        }
    }

    #[test]
    fn single_face_distance() {
        let (d, n) = wall_distance(&[Vec2::new(0.5, 0.0)], &[Vec2::ZERO], &[0]).unwrap();
        assert_eq!(d[0], 0.5);
        assert_eq!(n[0], Vec2::new(-1.0, 0.0));
        let (d, n) = wall_distance(&[Vec2::ZERO], &[Vec2::ZERO], &[0]).unwrap();
        assert_eq!((d[0], n[0]), (0.0, Vec2::ZERO));
        assert!(wall_distance(&[Vec2::ZERO], &[Vec2::ZERO], &[]).is_err());
    }
}
