//! Pixel-level utilities: PNM IO, hexcone HSV and area resampling, plus
//! directory ingestion for the two real-image tasks.

use std::path::{Path, PathBuf};

use super::{DatasetMeta, ScatteredDataset};
use crate::embedding::build_features;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major interleaved image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!("{} values for a {width}x{height} image", data.len())));
        }
        Ok(Self { width, height, channels: 1, data })
    }

    /// One channel as a plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Channel mean for RGB, identity for gray.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data.chunks_exact(self.channels).map(|p| p.iter().sum::<f64>() / self.channels as f64).collect()
    }
}

/// Hexcone RGB to HSV with `h` in degrees `[0, 360)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let v = max;
    let s = if max > 0.0 { c / max } else { 0.0 };
    if c == 0.0 {
        return (0.0, s, v);
    }
    let mut h = if max == r {
        60.0 * ((g - b) / c)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    (h, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Overlap weights of each output cell with each input sample along one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Area-average resampling of a single plane to `out_w x out_h`. Each output
/// cell averages the input weighted by fractional overlap.
pub fn area_resize(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    if src.len() != w * h {
        return Err(Error::Dimension(format!("{} values for a {w}x{h} plane", src.len())));
    }
    if out_w == 0 || out_h == 0 || out_w > w || out_h > h {
        return Err(Error::Parameter(format!("cannot area-resize {w}x{h} to {out_w}x{out_h}")));
    }
    let wx = axis_weights(w, out_w);
    let wy = axis_weights(h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for row_w in &wy {
        for col_w in &wx {
            let mut acc = 0.0;
            for &(y, a) in row_w {
                let line = &src[y * w..(y + 1) * w];
                for &(x, b) in col_w {
                    acc += a * b * line[x];
                }
            }
            out.push(acc);
        }
    }
    Ok(out)
}

/// Area-average a gray plane down to a `side x side` field.
pub fn downsample_field(src: &[f64], w: usize, h: usize, side: usize) -> Result<Vec<f64>> {
    if w < side || h < side {
        return Err(Error::Parameter(format!("image {w}x{h} is smaller than the {side}x{side} field")));
    }
    Ok(area_resize(src, w, h, side, side)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn next(&mut self) -> Result<usize> {
        loop {
            match self.buf.get(self.pos) {
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format { offset: start as u64, message: "expected an unsigned integer".into() })
    }
}

/// Reads binary or ASCII PGM/PPM (`P2`, `P3`, `P5`, `P6`), scaling by maxval.
pub fn read_pnm(buf: &[u8]) -> Result<Image> {
    let magic = buf.get(..2).ok_or(Error::Format { offset: 0, message: "empty file".into() })?;
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P5" => (1, true),
        b"P3" => (3, false),
        b"P6" => (3, true),
        _ => return Err(Error::Format { offset: 0, message: "not a PGM/PPM file".into() }),
    };
    let mut t = Tokens { buf, pos: 2 };
    let width = t.next()?;
    let height = t.next()?;
    let maxval = t.next()?;
    if maxval == 0 || maxval > 65535 || width == 0 || height == 0 {
        return Err(Error::Format { offset: t.pos as u64, message: format!("bad header {width}x{height} max {maxval}") });
    }
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or(Error::Format { offset: t.pos as u64, message: "image too large".into() })?;
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(count);
    if binary {
        let start = t.pos + 1;
        let bytes = if maxval < 256 { 1 } else { 2 };
        let end = start + count * bytes;
        if buf.len() < end {
            return Err(Error::Format { offset: buf.len() as u64, message: "truncated pixel data".into() });
        }
        for c in buf[start..end].chunks_exact(bytes) {
            let v = if bytes == 1 { c[0] as usize } else { (c[0] as usize) << 8 | c[1] as usize };
            data.push(v.min(maxval) as f64 / scale);
        }
    } else {
        for _ in 0..count {
            data.push(t.next()?.min(maxval) as f64 / scale);
        }
    }
    Ok(Image { width, height, channels, data })
}

/// Writes an 8-bit binary PGM, clamping to [0, 1].
pub fn write_pgm(path: &Path, width: usize, height: usize, plane: &[f64]) -> Result<()> {
    if plane.len() != width * height {
        return Err(Error::Dimension(format!("{} values for a {width}x{height} image", plane.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

fn load_pnm(path: &Path) -> Result<Image> {
    read_pnm(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.sort();
    Ok(paths)
}

fn is_pnm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

fn find_sibling(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["pgm", "ppm"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

/// Label maps are PGMs whose raw integer value is the class index.
fn load_labels(path: &Path) -> Result<(Vec<usize>, usize, usize)> {
    let buf = std::fs::read(path)?;
    let img = read_pnm(&buf)?;
    if img.channels != 1 {
        return Err(Error::Format { offset: 0, message: format!("{}: label map must be gray", path.display()) });
    }
    let maxval = {
        let mut t = Tokens { buf: &buf, pos: 2 };
        t.next()?;
        t.next()?;
        t.next()? as f64
    };
    Ok((img.data.iter().map(|v| (v * maxval).round() as usize).collect(), img.width, img.height))
}

struct Example {
    cond: Image,
    gen_plane: Vec<f64>,
    labels: Option<Vec<usize>>,
}

fn assemble(examples: Vec<Example>, side: usize, task: &str, dir: &Path) -> Result<ScatteredDataset> {
    if examples.is_empty() {
        return Err(Error::Parameter(format!("no usable images in {}", dir.display())));
    }
    let num_classes = examples.iter().filter_map(|e| e.labels.as_ref()).flatten().max().map_or(0, |m| m + 1);
    let n = examples.len();
    let d = side * side;
    let (mut xc, mut xg, mut feats) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::new());
    let mut all_labelled = true;
    let mut fdim = 0;
    for e in &examples {
        let plane = e.cond.luminance();
        let f = build_features(&plane, e.cond.width, e.cond.height, e.labels.as_deref(), num_classes)?;
        all_labelled &= f.has_labels;
        fdim = f.values.len();
        xc.extend(downsample_field(&plane, e.cond.width, e.cond.height, side)?);
        xg.extend(downsample_field(&e.gen_plane, e.cond.width, e.cond.height, side)?);
        feats.extend(f.values);
    }
    ScatteredDataset::new(
        Tensor::matrix(n, d, xc),
        Tensor::matrix(n, d, xg),
        Tensor::matrix(n, fdim, feats),
        DatasetMeta {
            task: task.into(),
            side,
            generator: None,
            source: Some(dir.display().to_string()),
            has_labels: all_labelled && num_classes > 0,
        },
    )
}

fn optional_labels(dir: &Path, stem: &str, w: usize, h: usize) -> Result<Option<Vec<usize>>> {
    let Some(path) = find_sibling(dir, &format!("{stem}_labels")) else { return Ok(None) };
    let (labels, lw, lh) = load_labels(&path)?;
    if (lw, lh) != (w, h) {
        return Err(Error::Dimension(format!("{}: label map {lw}x{lh} vs image {w}x{h}", path.display())));
    }
    Ok(Some(labels))
}

/// Relighting pairs: `<name>_albedo.{pgm,ppm}` with `<name>_shading.{pgm,ppm}`
/// and an optional `<name>_labels.pgm`. Color inputs are reduced to the
/// channel mean.
pub fn ingest_relight_dir(dir: &Path, side: usize) -> Result<ScatteredDataset> {
    let mut examples = Vec::new();
    for path in sorted_entries(dir)? {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Some(name) = stem.strip_suffix("_albedo") else { continue };
        if !is_pnm(&path) {
            continue;
        }
        let shading_path = find_sibling(dir, &format!("{name}_shading"))
            .ok_or_else(|| Error::Parameter(format!("{}: no matching shading image", path.display())))?;
        let albedo = load_pnm(&path)?;
        let shading = load_pnm(&shading_path)?;
        if (albedo.width, albedo.height) != (shading.width, shading.height) {
            return Err(Error::Dimension(format!("{name}: albedo and shading sizes differ")));
        }
        let labels = optional_labels(dir, name, albedo.width, albedo.height)?;
        examples.push(Example { gen_plane: shading.luminance(), cond: albedo, labels });
    }
    assemble(examples, side, "relight", dir)
}

/// Resaturation: each RGB `*.ppm` becomes (value, saturation) planes.
pub fn ingest_resaturation_dir(dir: &Path, side: usize) -> Result<ScatteredDataset> {
    let mut examples = Vec::new();
    for path in sorted_entries(dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let img = load_pnm(&path)?;
        let (mut v, mut s) = (Vec::with_capacity(img.data.len() / 3), Vec::with_capacity(img.data.len() / 3));
        for p in img.data.chunks_exact(3) {
            let (_, sat, val) = rgb_to_hsv(p[0], p[1], p[2]);
            s.push(sat);
            v.push(val);
        }
        let labels = optional_labels(dir, stem, img.width, img.height)?;
        let cond = Image::gray(img.width, img.height, v)?;
        examples.push(Example { cond, gen_plane: s, labels });
    }
    assemble(examples, side, "resaturation", dir)
}
