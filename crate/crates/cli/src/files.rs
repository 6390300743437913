//! On-disk formats the CLI reads and writes: observation and query CSVs,
//! single-snapshot field files, PPM images.

use std::fs;
use std::io::Write;
use std::path::Path;

use cops_core::pipeline::Observations;
use cops_core::{Error, Result};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { what: "csv", detail: format!("{}: {e}", path.display()) }
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format { what: "csv", detail: format!("{}:{line}: {s:?} is not a number", path.display()) })
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> =
        rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(rec.iter().map(|s| parse_f64(path, i + 2, s)).collect::<Result<Vec<_>>>()?);
    }
    Ok((header, rows))
}

/// `x,y,u0[,u1,...]`.
pub fn read_observations(path: &Path) -> Result<Observations> {
    let (header, rows) = read_rows(path)?;
    let channels = header.len().saturating_sub(2);
    let expected: Vec<String> =
        ["x".to_string(), "y".to_string()].into_iter().chain((0..channels).map(|c| format!("u{c}"))).collect();
    if channels == 0 || header != expected {
        return Err(Error::Format {
            what: "observations",
            detail: format!("{}: header must be x,y,u0[,u1,...], got {}", path.display(), header.join(",")),
        });
    }
    let mut obs = Observations { coords: Vec::new(), values: Vec::new(), channels, nodes: Vec::new() };
    for r in rows {
        obs.coords.push([r[0], r[1]]);
        obs.values.extend_from_slice(&r[2..]);
    }
    Ok(obs)
}

/// `t,x,y`.
pub fn read_queries(path: &Path) -> Result<Vec<(f64, [f64; 2])>> {
    let (header, rows) = read_rows(path)?;
    if header != ["t", "x", "y"] {
        return Err(Error::Format {
            what: "queries",
            detail: format!("{}: header must be t,x,y, got {}", path.display(), header.join(",")),
        });
    }
    Ok(rows.into_iter().map(|r| (r[0], [r[1], r[2]])).collect())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

const FIELD_MAGIC: &[u8; 4] = b"CPSF";

/// One field snapshot: `CPSF`, then height, width, channels as u32 LE,
/// then `H·W·C` f32 LE values, row-major and channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FieldFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = FIELD_MAGIC.to_vec();
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend(self.values.iter().flat_map(|v| v.to_le_bytes()));
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format { what: "field file", detail: format!("{}: {detail}", path.display()) };
        if bytes.len() < 16 || &bytes[..4] != FIELD_MAGIC {
            return Err(bad("missing CPSF header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        let n = height * width * channels;
        if n == 0 || bytes.len() != 16 + 4 * n {
            return Err(bad(format!("{height}x{width}x{channels} does not match {} payload bytes", bytes.len() - 16)));
        }
        let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(FieldFile { height, width, channels, values })
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.values.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Palette {
    Gray,
    /// Blue through white to red.
    Heat,
}

impl Palette {
    fn stops(self) -> &'static [[u8; 3]] {
        match self {
            Palette::Gray => &[[0, 0, 0], [255, 255, 255]],
            Palette::Heat => &[[0, 0, 255], [255, 255, 255], [255, 0, 0]],
        }
    }

    /// Colour at `s ∈ [0, 1]`: 0 is the first stop, 1 the last, linear in
    /// between, rounded to the nearest byte.
    pub fn color(self, s: f64) -> [u8; 3] {
        let stops = self.stops();
        let x = s.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
        let i = (x.floor() as usize).min(stops.len() - 2);
        let f = x - i as f64;
        let (a, b) = (stops[i], stops[i + 1]);
        std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
    }
}

/// Min–max normalization: min maps to 0, max to 1; a constant field maps to 0.
pub fn normalize(values: &[f32]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = hi - lo;
    values.iter().map(|&v| if span > 0.0 { (v as f64 - lo) / span } else { 0.0 }).collect()
}

/// Binary P6 image, one pixel per grid node.
pub fn ppm(height: usize, width: usize, values: &[f32], palette: Palette) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for s in normalize(values) {
        out.extend_from_slice(&palette.color(s));
    }
    out
}

/// `row,col,value`; f32 `Display` is the shortest text that parses back to
/// the same bits.
pub fn field_csv(height: usize, width: usize, values: &[f32]) -> String {
    let mut s = String::from("row,col,value\n");
    for r in 0..height {
        for c in 0..width {
            s.push_str(&format!("{r},{c},{}\n", values[r * width + c]));
        }
    }
    s
}
