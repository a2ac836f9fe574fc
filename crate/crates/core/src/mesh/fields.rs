//! `0/<field>` dictionaries: inlet velocity and internal fields.

use super::boundary::{classify_patch, BoundaryClass};
use super::foam::{self, Entry, Tok};
use super::polymesh::parse_field_file;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use std::fmt::Write as _;
use std::path::Path;

fn parse_err(file: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.into(),
        line: 0,
        msg: msg.into(),
    }
}

/// Numbers inside a `uniform (a b c)` or `uniform a` value.
fn uniform_values(file: &str, toks: &[Tok]) -> Result<Vec<f64>> {
    match toks.first() {
        Some(Tok::Word(w)) if w == "uniform" => {}
        _ => return Err(parse_err(file, "expected a 'uniform' value")),
    }
    let mut out = Vec::new();
    for t in &toks[1..] {
        match t {
            Tok::Word(w) => out.push(
                w.parse::<f64>()
                    .map_err(|_| parse_err(file, format!("bad number '{w}'")))?,
            ),
            Tok::Punct('(') | Tok::Punct(')') => {}
            other => return Err(parse_err(file, format!("unexpected token {other:?}"))),
        }
    }
    Ok(out)
}

/// Inlet velocity `(vx, vy)` from the inlet patch of a `0/U` dictionary.
pub fn parse_inlet_velocity(path: &Path) -> Result<Vec2> {
    let (label, root) = parse_field_file(path)?;
    let bf = root
        .get("boundaryField")
        .ok_or_else(|| parse_err(&label, "missing boundaryField"))?;
    let Entry::Dict(items) = bf else {
        return Err(parse_err(&label, "boundaryField is not a dictionary"));
    };
    let patch = items
        .iter()
        .find(|(name, e)| {
            let kind = match e.get("type") {
                Some(Entry::Tokens(t)) => match t.first() {
                    Some(Tok::Word(w)) => w.clone(),
                    _ => String::new(),
                },
                _ => String::new(),
            };
            classify_patch(name, if kind == "empty" { "empty" } else { "patch" }) == BoundaryClass::Inlet
        })
        .ok_or_else(|| parse_err(&label, "no inlet patch in boundaryField"))?;
    let value = match patch.1.get("value") {
        Some(Entry::Tokens(t)) => t,
        _ => return Err(parse_err(&label, format!("patch '{}' has no value entry", patch.0))),
    };
    let v = uniform_values(&label, value)?;
    if v.len() < 2 {
        return Err(parse_err(&label, "inlet value must be a vector"));
    }
    Ok(Vec2::new(v[0], v[1]))
}

/// Internal field as `n_cells` rows of `width` components (1 for scalars,
/// 3 for vectors).
pub fn read_internal_field(path: &Path, n_cells: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    let (label, root) = parse_field_file(path)?;
    let toks = match root.get("internalField") {
        Some(Entry::Tokens(t)) => t.clone(),
        _ => return Err(parse_err(&label, "missing internalField")),
    };
    match toks.first() {
        Some(Tok::Word(w)) if w == "uniform" => {
            let v = uniform_values(&label, &toks)?;
            if v.len() != width {
                return Err(parse_err(&label, format!("uniform value has {} components, expected {width}", v.len())));
            }
            Ok(vec![v; n_cells])
        }
        Some(Tok::Word(w)) if w == "nonuniform" => {
            // nonuniform List<type> N ( ... )
            let body: Vec<foam::Token> = toks[2..]
                .iter()
                .map(|t| foam::Token { tok: t.clone(), line: 0 })
                .collect();
            let mut cur = foam::Cursor::new(&body, &label);
            let rows = if width == 1 {
                foam::counted_list(&mut cur, |c| Ok(vec![c.number()?]))?
            } else {
                foam::counted_list(&mut cur, |c| {
                    c.expect('(')?;
                    let mut v = Vec::with_capacity(width);
                    for _ in 0..width {
                        v.push(c.number()?);
                    }
                    c.expect(')')?;
                    Ok(v)
                })?
            };
            if rows.len() != n_cells {
                return Err(Error::Structure(format!(
                    "{label}: internalField has {} values for {n_cells} cells",
                    rows.len()
                )));
            }
            Ok(rows)
        }
        _ => Err(parse_err(&label, "internalField must be uniform or nonuniform")),
    }
}

/// Write a volume field dictionary with a nonuniform internal field and
/// per-patch boundary entries given as `(patch, type, optional value)`.
pub fn write_field(
    path: &Path,
    object: &str,
    dims: &str,
    rows: &[Vec<f64>],
    patches: &[(String, String, Option<Vec<f64>>)],
) -> Result<()> {
    let width = rows.first().map_or(1, |r| r.len());
    let (class, ty) = if width == 1 {
        ("volScalarField", "scalar")
    } else {
        ("volVectorField", "vector")
    };
    let mut s = foam::header(class, "0", object, None);
    let _ = writeln!(s, "dimensions      {dims};\n");
    let fmt = |v: &[f64]| -> String {
        if v.len() == 1 {
            format!("{}", v[0])
        } else {
            let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("({})", parts.join(" "))
        }
    };
    let _ = writeln!(s, "internalField   nonuniform List<{ty}>\n{}\n(", rows.len());
    for r in rows {
        let _ = writeln!(s, "{}", fmt(r));
    }
    s.push_str(");\n\nboundaryField\n{\n");
    for (name, kind, value) in patches {
        let _ = writeln!(s, "    {name}\n    {{\n        type            {kind};");
        if let Some(v) = value {
            let _ = writeln!(s, "        value           uniform {};", fmt(v));
        }
        s.push_str("    }\n");
    }
    s.push_str("}\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u_file(value: &str) -> String {
        format!(
            "FoamFile\n{{\n version 2.0;\n format ascii;\n class volVectorField;\n object U;\n}}\n\
             dimensions [0 1 -1 0 0 0 0];\ninternalField uniform (0 0 0);\n\
             boundaryField\n{{\n ceilingInlet\n {{\n  type fixedValue;\n  value {value};\n }}\n \
             frontAndBack {{ type empty; }}\n}}\n"
        )
    }

    #[test]
    fn inlet_vector() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("U");
        std::fs::write(&p, u_file("uniform (0 -0.10 0)")).unwrap();
        assert_eq!(parse_inlet_velocity(&p).unwrap(), Vec2::new(0.0, -0.10));
        std::fs::write(&p, u_file("uniform (0 0 0)")).unwrap();
        assert_eq!(parse_inlet_velocity(&p).unwrap(), Vec2::ZERO);
        std::fs::write(&p, u_file("nonuniform List<vector> 1((0 0 0))")).unwrap();
        assert!(matches!(parse_inlet_velocity(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_inlet_patch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("U");
        let src = u_file("uniform (0 -1 0)").replace("ceilingInlet", "sidePatch");
        std::fs::write(&p, src).unwrap();
        assert!(matches!(parse_inlet_velocity(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k");
        let rows = vec![vec![0.5], vec![1.25e-3], vec![-2.0]];
        write_field(&p, "k", "[0 2 -2 0 0 0 0]", &rows, &[("floor".into(), "zeroGradient".into(), None)]).unwrap();
        assert_eq!(read_internal_field(&p, 3, 1).unwrap(), rows);
        let pv = dir.path().join("U");
        let vrows = vec![vec![1.0, 2.0, 0.0], vec![0.1, -0.2, 0.0]];
        write_field(&pv, "U", "[0 1 -1 0 0 0 0]", &vrows, &[]).unwrap();
        assert_eq!(read_internal_field(&pv, 2, 3).unwrap(), vrows);
        assert!(read_internal_field(&pv, 3, 3).is_err());
    }
}
