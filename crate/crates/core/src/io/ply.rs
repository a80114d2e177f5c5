//! Binary little-endian PLY export of point clouds and voxel grids.
//!
//! Every file has one `vertex` element with `float x, y, z` followed by
//! `uchar red, green, blue`; 15 bytes per vertex after the header.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// How vertices are colored.
#[derive(Debug, Clone, PartialEq)]
pub enum Coloring {
    /// Explicit colors, one per point.
    Rgb(Vec<[u8; 3]>),
    /// Scores in `[0, 1]` through [`similarity_color`].
    Similarity(Vec<f32>),
    /// Integer labels through [`label_color`].
    Label(Vec<u32>),
}

impl Coloring {
    fn len(&self) -> usize {
        match self {
            Coloring::Rgb(c) => c.len(),
            Coloring::Similarity(s) => s.len(),
            Coloring::Label(l) => l.len(),
        }
    }

    fn color(&self, i: usize) -> [u8; 3] {
        match self {
            Coloring::Rgb(c) => c[i],
            Coloring::Similarity(s) => similarity_color(s[i]),
            Coloring::Label(l) => label_color(l[i]),
        }
    }
}

/// Diverging map: blue at 0, white at 0.5, red at 1, linear in between:
///
/// ```text
/// r = 255 * min(1, 2s)
/// g = 255 * (1 - |2s - 1|)
/// b = 255 * min(1, 2(1 - s))
/// ```
///
/// with each channel rounded to nearest. Inputs are clamped to `[0, 1]`;
/// NaN maps to 0.
pub fn similarity_color(s: f32) -> [u8; 3] {
    let s = if s.is_nan() { 0.0 } else { f64::from(s).clamp(0.0, 1.0) };
    let q = |x: f64| (255.0 * x).round() as u8;
    [
        q((2.0 * s).min(1.0)),
        q(1.0 - (2.0 * s - 1.0).abs()),
        q((2.0 * (1.0 - s)).min(1.0)),
    ]
}

const PALETTE: [[u8; 3]; 12] = [
    [128, 128, 128],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
];

/// Fixed palette; label 0 is grey. Labels past the palette get a hashed
/// color that avoids the palette entries.
pub fn label_color(label: u32) -> [u8; 3] {
    if let Some(c) = PALETTE.get(label as usize) {
        return *c;
    }
    let mut h = label.wrapping_mul(0x9E37_79B9) ^ 0x5bd1_e995;
    loop {
        h ^= h >> 15;
        h = h.wrapping_mul(0x2c1b_3c6d);
        h ^= h >> 12;
        let c = [(h >> 16) as u8, (h >> 8) as u8, h as u8];
        if !PALETTE.contains(&c) {
            return c;
        }
    }
}

pub fn encode_ply(points: &[[f32; 3]], coloring: &Coloring, out: &mut impl Write) -> std::io::Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\ncomment tokalign\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )?;
    for (i, p) in points.iter().enumerate() {
        for c in p {
            out.write_all(&c.to_le_bytes())?;
        }
        out.write_all(&coloring.color(i))?;
    }
    Ok(())
}

pub fn write_ply(path: impl AsRef<Path>, points: &[[f32; 3]], coloring: &Coloring) -> Result<()> {
    let path = path.as_ref();
    if points.is_empty() {
        return Err(Error::EmptyGeometry(format!("nothing to write to {}", path.display())));
    }
    if coloring.len() != points.len() {
        return Err(Error::validation(format!(
            "{} points but {} colors",
            points.len(),
            coloring.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_ply(points, coloring, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Positions and colors read back from a file in the layout written here.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

const EXPECTED_PROPS: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

pub fn decode_ply(input: impl Read) -> Result<PlyCloud> {
    let mut r = BufReader::new(input);
    let mut offset = 0u64;
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>, offset: &mut u64| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::format(*offset, format!("unreadable header: {e}")))?;
        if n == 0 {
            return Err(Error::format(*offset, "header ends before end_header"));
        }
        *offset += n as u64;
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r, &mut offset)? != "ply" {
        return Err(Error::format(0, "missing ply signature"));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let at = offset;
        let l = next_line(&mut r, &mut offset)?;
        if l == "end_header" {
            break;
        } else if l.starts_with("comment") || l.starts_with("obj_info") {
            continue;
        } else if l.starts_with("format") {
            if l != "format binary_little_endian 1.0" {
                return Err(Error::format(at, format!("unsupported {l:?}")));
            }
        } else if let Some(n) = l.strip_prefix("element vertex ") {
            count = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(at, format!("bad vertex count {n:?}")))?,
            );
        } else if l.starts_with("property") {
            props.push(l);
        } else {
            return Err(Error::format(at, format!("unsupported header line {l:?}")));
        }
    }
    if props != EXPECTED_PROPS {
        return Err(Error::format(offset, format!("unsupported vertex layout {props:?}")));
    }
    let count = count.ok_or_else(|| Error::format(offset, "no vertex element"))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)
        .map_err(|e| Error::format(offset, format!("unreadable body: {e}")))?;
    if body.len() != count * 15 {
        return Err(Error::format(
            offset + body.len().min(count * 15) as u64,
            format!("body holds {} bytes, expected {}", body.len(), count * 15),
        ));
    }
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for rec in body.chunks_exact(15) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        points.push([f(0), f(1), f(2)]);
        colors.push([rec[12], rec[13], rec[14]]);
    }
    Ok(PlyCloud { points, colors })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_ply(file)
}
