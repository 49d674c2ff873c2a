//! Minimal PLY point writer (ASCII or binary little-endian, `float x y z`)
//! and a reader for the same subset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

impl PlyFormat {
    fn keyword(self) -> &'static str {
        match self {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        }
    }
}

pub fn write_ply(path: &Path, points: &[Point3<f64>], format: PlyFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        write!(
            out,
            "ply\nformat {} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            format.keyword(),
            points.len()
        )?;
        for p in points {
            let xyz = [p.x as f32, p.y as f32, p.z as f32];
            match format {
                PlyFormat::Ascii => writeln!(out, "{} {} {}", xyz[0], xyz[1], xyz[2])?,
                PlyFormat::BinaryLittleEndian => {
                    for c in xyz {
                        out.write_all(&c.to_le_bytes())?;
                    }
                }
            }
        }
        out.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, why: &str) -> Error {
    Error::InvalidInput(format!("{}: {why}", path.display()))
}

/// Reads vertices written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<(PlyFormat, Vec<Point3<f32>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut format = None;
    let mut count = None;
    let mut properties = Vec::new();
    loop {
        let mut line = String::new();
        if input.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(malformed(path, "header ends early"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] | ["comment", ..] => {}
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| malformed(path, "bad vertex count"))?)
            }
            ["property", "float", name] => properties.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(malformed(path, &format!("unsupported header line {:?}", line.trim()))),
        }
    }
    let (Some(format), Some(count)) = (format, count) else {
        return Err(malformed(path, "missing format or vertex element"));
    };
    if properties != ["x", "y", "z"] {
        return Err(malformed(path, "expected float x y z"));
    }
    let mut points = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            for line in input.lines().take(count) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let c: Vec<f32> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| malformed(path, "bad vertex"))?;
                if c.len() != 3 {
                    return Err(malformed(path, "bad vertex"));
                }
                points.push(Point3::new(c[0], c[1], c[2]));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 12];
            for _ in 0..count {
                input.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                let f = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
                points.push(Point3::new(f(0), f(4), f(8)));
            }
        }
    }
    if points.len() != count {
        return Err(malformed(path, "fewer vertices than declared"));
    }
    Ok((format, points))
}
