use super::foam::{self, Cursor};
use crate::error::{Error, Result};
use crate::geom::{cross3, dot3, norm3, sub3, Vec3};
use std::fmt::Write as _;
use std::path::Path;

/// A named boundary patch: a contiguous face range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub name: String,
    /// OpenFOAM patch type (`patch`, `wall`, `empty`, ...).
    pub kind: String,
    pub n_faces: usize,
    pub start_face: usize,
}

/// Unstructured polyhedral mesh in OpenFOAM `constant/polyMesh` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMesh {
    pub points: Vec<[f64; 3]>,
    pub faces: Vec<Vec<usize>>,
    pub owner: Vec<usize>,
    pub neighbour: Vec<usize>,
    pub patches: Vec<Patch>,
    n_cells: usize,
}

/// Per-face and per-cell geometry derived from a [`PolyMesh`].
#[derive(Debug, Clone)]
pub struct MeshGeometry {
    /// Area-weighted face centroids.
    pub face_centroids: Vec<Vec3>,
    /// Arithmetic mean of face vertices.
    pub face_midpoints: Vec<Vec3>,
    /// Face area vectors, oriented out of the owner cell.
    pub face_area_vectors: Vec<Vec3>,
    pub cell_centroids: Vec<Vec3>,
    pub cell_volumes: Vec<f64>,
}

impl PolyMesh {
    /// Assemble and validate a mesh. The cell count is inferred from the
    /// owner list unless given explicitly.
    pub fn new(
        points: Vec<[f64; 3]>,
        faces: Vec<Vec<usize>>,
        owner: Vec<usize>,
        neighbour: Vec<usize>,
        patches: Vec<Patch>,
        n_cells: Option<usize>,
    ) -> Result<Self> {
        let n_cells = n_cells.unwrap_or_else(|| owner.iter().max().map_or(0, |m| m + 1));
        let mesh = Self {
            points,
            faces,
            owner,
            neighbour,
            patches,
            n_cells,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_internal_faces(&self) -> usize {
        self.neighbour.len()
    }

    /// Patch index of a boundary face.
    pub fn patch_of_face(&self, face: usize) -> Option<usize> {
        self.patches
            .iter()
            .position(|p| face >= p.start_face && face < p.start_face + p.n_faces)
    }

    pub fn validate(&self) -> Result<()> {
        let nf = self.faces.len();
        if self.owner.len() != nf {
            return Err(Error::Structure(format!(
                "owner has {} entries for {} faces",
                self.owner.len(),
                nf
            )));
        }
        if self.neighbour.len() > nf {
            return Err(Error::Structure(format!(
                "neighbour has {} entries for {} faces",
                self.neighbour.len(),
                nf
            )));
        }
        for (f, verts) in self.faces.iter().enumerate() {
            if verts.len() < 3 {
                return Err(Error::Structure(format!("face {f} has {} vertices", verts.len())));
            }
            if let Some(&v) = verts.iter().find(|&&v| v >= self.points.len()) {
                return Err(Error::Structure(format!(
                    "face {f} references point {v} of {}",
                    self.points.len()
                )));
            }
        }
        if let Some((f, &c)) = self.owner.iter().enumerate().find(|(_, &c)| c >= self.n_cells) {
            return Err(Error::Structure(format!(
                "owner of face {f} is cell {c} but mesh has {} cells",
                self.n_cells
            )));
        }
        if let Some((f, &c)) = self
            .neighbour
            .iter()
            .enumerate()
            .find(|(_, &c)| c >= self.n_cells)
        {
            return Err(Error::Structure(format!(
                "neighbour of face {f} is cell {c} but mesh has {} cells",
                self.n_cells
            )));
        }
        let mut ranges: Vec<(usize, usize)> = self
            .patches
            .iter()
            .map(|p| (p.start_face, p.start_face + p.n_faces))
            .filter(|r| r.1 > r.0)
            .collect();
        ranges.sort_unstable();
        let mut next = self.n_internal_faces();
        for (s, e) in ranges {
            if s != next {
                return Err(Error::Structure(format!(
                    "boundary patches do not tile faces: expected start {next}, found {s}"
                )));
            }
            next = e;
        }
        if next != nf {
            return Err(Error::Structure(format!(
                "boundary patches cover faces up to {next} but mesh has {nf} faces"
            )));
        }
        Ok(())
    }

    /// Reject meshes that parse but cannot carry a graph.
    pub fn require_cells(&self) -> Result<()> {
        if self.n_cells == 0 {
            Err(Error::Structure("mesh has no cells".into()))
        } else {
            Ok(())
        }
    }

    pub fn geometry(&self) -> MeshGeometry {
        let nf = self.faces.len();
        let mut face_centroids = Vec::with_capacity(nf);
        let mut face_midpoints = Vec::with_capacity(nf);
        let mut face_area_vectors = Vec::with_capacity(nf);
        for verts in &self.faces {
            let pts: Vec<Vec3> = verts.iter().map(|&v| self.points[v]).collect();
            let n = pts.len() as f64;
            let mid = pts.iter().fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]]);
            let mid = [mid[0] / n, mid[1] / n, mid[2] / n];
            let mut area = [0.0; 3];
            let mut cw = [0.0; 3];
            let mut wsum = 0.0;
            for k in 0..pts.len() {
                let a = pts[k];
                let b = pts[(k + 1) % pts.len()];
                let tri = cross3(sub3(a, mid), sub3(b, mid));
                let tri = [tri[0] * 0.5, tri[1] * 0.5, tri[2] * 0.5];
                let w = norm3(tri);
                for d in 0..3 {
                    area[d] += tri[d];
                    cw[d] += w * (mid[d] + a[d] + b[d]) / 3.0;
                }
                wsum += w;
            }
            let centroid = if wsum > 0.0 {
                [cw[0] / wsum, cw[1] / wsum, cw[2] / wsum]
            } else {
                mid
            };
            face_centroids.push(centroid);
            face_midpoints.push(mid);
            face_area_vectors.push(area);
        }

        let nc = self.n_cells;
        let mut csum = vec![[0.0; 3]; nc];
        let mut wsum = vec![0.0; nc];
        let mut vol = vec![0.0; nc];
        let mut add = |cell: usize, f: usize, sign: f64| {
            let a = norm3(face_area_vectors[f]);
            let c = face_centroids[f];
            for d in 0..3 {
                csum[cell][d] += a * c[d];
            }
            wsum[cell] += a;
            vol[cell] += sign * dot3(c, face_area_vectors[f]) / 3.0;
        };
        for f in 0..nf {
            add(self.owner[f], f, 1.0);
            if f < self.neighbour.len() {
                add(self.neighbour[f], f, -1.0);
            }
        }
        let cell_centroids = csum
            .iter()
            .zip(&wsum)
            .map(|(c, &w)| if w > 0.0 { [c[0] / w, c[1] / w, c[2] / w] } else { *c })
            .collect();
        MeshGeometry {
            face_centroids,
            face_midpoints,
            face_area_vectors,
            cell_centroids,
            cell_volumes: vol,
        }
    }
}

/// Parse `points`, `faces`, `owner`, `neighbour` and `boundary` from a
/// `constant/polyMesh` directory.
pub fn parse_polymesh(dir: &Path) -> Result<PolyMesh> {
    let read = |name: &str| -> Result<(String, String)> {
        let p = dir.join(name);
        Ok((foam::read_file(&p)?, foam::file_label(&p)))
    };

    let (src, label) = read("points")?;
    let toks = foam::tokenize(&src, &label)?;
    let mut cur = Cursor::new(&toks, &label);
    foam::parse_header(&mut cur)?;
    let points = foam::counted_list(&mut cur, foam::vector3)?;

    let (src, label) = read("faces")?;
    let toks = foam::tokenize(&src, &label)?;
    let mut cur = Cursor::new(&toks, &label);
    foam::parse_header(&mut cur)?;
    let faces = foam::counted_list(&mut cur, |c| foam::counted_list(c, |c| c.label()))?;

    let (src, label) = read("owner")?;
    let toks = foam::tokenize(&src, &label)?;
    let mut cur = Cursor::new(&toks, &label);
    let header = foam::parse_header(&mut cur)?;
    let owner = foam::counted_list(&mut cur, |c| c.label())?;
    let n_cells = header.get("note").and_then(|n| note_value(n, "nCells"));

    let (src, label) = read("neighbour")?;
    let toks = foam::tokenize(&src, &label)?;
    let mut cur = Cursor::new(&toks, &label);
    foam::parse_header(&mut cur)?;
    let neighbour = foam::counted_list(&mut cur, |c| c.label())?;

    let (src, label) = read("boundary")?;
    let toks = foam::tokenize(&src, &label)?;
    let mut cur = Cursor::new(&toks, &label);
    foam::parse_header(&mut cur)?;
    let patches = foam::counted_list(&mut cur, parse_patch)?;

    PolyMesh::new(points, faces, owner, neighbour, patches, n_cells)
}

fn note_value(note: &str, key: &str) -> Option<usize> {
    let idx = note.find(key)?;
    let rest = note[idx + key.len()..].trim_start_matches([':', ' ']);
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn parse_patch(cur: &mut Cursor<'_>) -> Result<Patch> {
    let name = cur.word()?;
    cur.expect('{')?;
    let mut kind = None;
    let mut n_faces = None;
    let mut start_face = None;
    while !cur.eat('}') {
        let key = cur.word()?;
        match key.as_str() {
            "type" => {
                kind = Some(cur.word()?);
                cur.expect(';')?;
            }
            "nFaces" => {
                n_faces = Some(cur.label()?);
                cur.expect(';')?;
            }
            "startFace" => {
                start_face = Some(cur.label()?);
                cur.expect(';')?;
            }
            _ => cur.skip_entry_value()?,
        }
    }
    let missing = |k: &str| cur.err(format!("patch '{name}' missing '{k}'"));
    Ok(Patch {
        kind: kind.ok_or_else(|| missing("type"))?,
        n_faces: n_faces.ok_or_else(|| missing("nFaces"))?,
        start_face: start_face.ok_or_else(|| missing("startFace"))?,
        name,
    })
}

/// Write a mesh in canonical ASCII form. Parsing the result reproduces the
/// same arrays exactly.
pub fn write_polymesh(mesh: &PolyMesh, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let loc = "constant/polyMesh";
    let note = format!(
        "nPoints:{} nCells:{} nFaces:{} nInternalFaces:{}",
        mesh.points.len(),
        mesh.n_cells,
        mesh.faces.len(),
        mesh.neighbour.len()
    );

    let mut s = foam::header("vectorField", loc, "points", None);
    let _ = writeln!(s, "{}\n(", mesh.points.len());
    for p in &mesh.points {
        let _ = writeln!(s, "({} {} {})", p[0], p[1], p[2]);
    }
    s.push_str(")\n");
    write(dir, "points", &s)?;

    let mut s = foam::header("faceList", loc, "faces", None);
    let _ = writeln!(s, "{}\n(", mesh.faces.len());
    for f in &mesh.faces {
        let body: Vec<String> = f.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}({})", f.len(), body.join(" "));
    }
    s.push_str(")\n");
    write(dir, "faces", &s)?;

    for (name, list) in [("owner", &mesh.owner), ("neighbour", &mesh.neighbour)] {
        let mut s = foam::header("labelList", loc, name, Some(&note));
        let _ = writeln!(s, "{}\n(", list.len());
        for v in list.iter() {
            let _ = writeln!(s, "{v}");
        }
        s.push_str(")\n");
        write(dir, name, &s)?;
    }

    let mut s = foam::header("polyBoundaryMesh", loc, "boundary", None);
    let _ = writeln!(s, "{}\n(", mesh.patches.len());
    for p in &mesh.patches {
        let _ = writeln!(
            s,
            "    {}\n    {{\n        type            {};\n        nFaces          {};\n        startFace       {};\n    }}",
            p.name, p.kind, p.n_faces, p.start_face
        );
    }
    s.push_str(")\n");
    write(dir, "boundary", &s)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| Error::io(p, e))
}

/// Extract `(name, value-tokens)` of a field file's internal field and the
/// boundaryField dictionary.
pub(crate) fn parse_field_file(path: &Path) -> Result<(String, foam::Entry)> {
    let label = foam::file_label(path);
    let src = foam::read_file(path)?;
    let toks = foam::tokenize(&src, &label)?;
    let mut cur = Cursor::new(&toks, &label);
    foam::parse_header(&mut cur)?;
    let body = foam::parse_dict_body(&mut cur, false)?;
    Ok((label, foam::Entry::Dict(body)))
}
