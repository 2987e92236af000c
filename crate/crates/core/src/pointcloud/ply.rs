//! ASCII PLY reading and writing (`element vertex N`, `x y z` as doubles).

use super::PointCloud;
use crate::geometry::Vec3;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn parse_err(line: usize, message: impl Into<String>) -> PlyError {
    PlyError::Parse { line, message: message.into() }
}

pub fn write_ply<W: Write>(cloud: &PointCloud, mut out: W) -> io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    writeln!(out, "end_header")?;
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn to_ply_string(cloud: &PointCloud) -> String {
    let mut buf = Vec::new();
    write_ply(cloud, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// Reads an ASCII PLY file. Extra vertex properties are skipped; other
/// elements after the vertices are ignored.
pub fn read_ply<R: BufRead>(input: R) -> Result<PointCloud, PlyError> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), PlyError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(parse_err(0, format!("unexpected end of file, expected {what}"))),
        }
    };
    let (n, magic) = next("magic")?;
    if magic.trim() != "ply" {
        return Err(parse_err(n, "missing 'ply' magic"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let (n, line) = next("header")?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(n, format!("unsupported format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse().map_err(|_| parse_err(n, "bad vertex count"))?);
                } else if vertex_count.is_none() {
                    return Err(parse_err(n, "vertex element must come first"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(parse_err(n, "list properties on vertices unsupported")),
            ["property", _, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => break,
            _ => return Err(parse_err(n, format!("unexpected header line '{line}'"))),
        }
    }
    let count = vertex_count.ok_or_else(|| parse_err(0, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
        return Err(parse_err(0, "vertex element lacks x/y/z"));
    };
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = next("vertex")?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(parse_err(n, "too few values"));
        }
        let get = |i: usize| vals[i].parse::<f64>().map_err(|_| parse_err(n, format!("bad number '{}'", vals[i])));
        let p = Vec3::new(get(ix)?, get(iy)?, get(iz)?);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(parse_err(n, "non-finite coordinate"));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn read_ply_file(path: &std::path::Path) -> Result<PointCloud, PlyError> {
    let f = std::fs::File::open(path)?;
    read_ply(io::BufReader::new(f))
}

pub fn write_ply_file(cloud: &PointCloud, path: &std::path::Path) -> io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(f);
    write_ply(cloud, &mut w)?;
    w.flush()
}
