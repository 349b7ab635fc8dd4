//! ASCII PLY with `x y z score` vertices.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

const PROPERTIES: [&str; 4] = ["x", "y", "z", "score"];

pub fn write_ply<W: Write>(mut w: W, points: &[([f64; 3], f64)]) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for p in PROPERTIES {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "end_header")?;
    for (p, s) in points {
        writeln!(w, "{} {} {} {}", p[0], p[1], p[2], s)?;
    }
    w.flush()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Invalid(format!("ply: {}", msg.into()))
}

pub fn read_ply<R: BufRead>(r: R) -> Result<Vec<([f64; 3], f64)>> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        match lines.next() {
            Some(l) => l.map_err(|e| Error::io("<ply>", e)),
            None => Err(bad("unexpected end of file")),
        }
    };
    if next()?.trim() != "ply" {
        return Err(bad("missing magic"));
    }
    if next()?.trim() != "format ascii 1.0" {
        return Err(bad("only ascii 1.0 is supported"));
    }
    let count: usize = next()?
        .trim()
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("expected vertex element"))?;
    for p in PROPERTIES {
        if next()?.trim() != format!("property double {p}") {
            return Err(bad(format!("expected property {p}")));
        }
    }
    if next()?.trim() != "end_header" {
        return Err(bad("expected end_header"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let line = next()?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("vertex {i}: {e}")))?;
        if v.len() != 4 {
            return Err(bad(format!("vertex {i} has {} values", v.len())));
        }
        out.push(([v[0], v[1], v[2]], v[3]));
    }
    Ok(out)
}
