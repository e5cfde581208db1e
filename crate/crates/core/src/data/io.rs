//! Binary PGM images, `VOL1` volumes and tab-separated manifests.
//!
//! Intensities are normalized to `[0, 1]` on read. Masks are written as
//! 8-bit `{0, 255}` and read back as `{0, 1}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Header token scanner that tracks byte offsets.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(start as u64, format!("{what} is not ASCII")))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let at = self.pos as u64;
        let tok = self.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::parse(at, format!("{what} `{tok}` is not a positive integer"))),
        }
    }

    /// Consume the single whitespace byte that ends a header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::parse(self.pos as u64, "header must end with a whitespace byte")),
        }
    }
}

/// Raw 8-bit PGM: `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_pgm(&fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut h = Header { bytes, pos: 0 };
    if h.token("magic")? != "P5" {
        return Err(Error::parse(0, "not a binary PGM (magic must be P5)"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let at = h.pos as u64;
    let maxval = h.number("maxval")?;
    if maxval > 255 {
        return Err(Error::parse(at, format!("maxval {maxval}: only 8-bit PGM is supported")));
    }
    let start = h.end()?;
    let need = width * height;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("payload has {} bytes, header promises {need}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::parse((start + need) as u64, "trailing bytes after pixel data"));
    }
    let data = if maxval == 255 {
        payload.to_vec()
    } else {
        payload.iter().map(|&v| ((v as f64 / maxval as f64) * 255.0).round() as u8).collect()
    };
    Ok((height, width, data))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::dim(format!("{} pixels for a {height}x{width} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn plane_dims(t: &Tensor<f32>, rank: usize, what: &str) -> Result<Vec<usize>> {
    let d = t.dims();
    if d.len() != rank + 1 || d[0] != 1 {
        return Err(Error::dim(format!("{what} expects a [1, {rank} spatial axes] tensor, got {d:?}")));
    }
    Ok(d[1..].to_vec())
}

/// Image as `[1, H, W]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let (h, w, px) = read_pgm(path)?;
    Tensor::from_vec(vec![1, h, w], px.into_iter().map(|v| v as f32 / 255.0).collect())
}

/// Mask as `[1, H, W]` in `{0, 1}` (pixels >= 128 are foreground).
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let (h, w, px) = read_pgm(path)?;
    Tensor::from_vec(vec![1, h, w], px.into_iter().map(|v| if v >= 128 { 1.0 } else { 0.0 }).collect())
}

pub fn write_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let d = plane_dims(t, 2, "write_image")?;
    write_pgm(path, d[0], d[1], &t.data().iter().map(|&v| to_u8(v)).collect::<Vec<_>>())
}

pub fn write_mask(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let d = plane_dims(t, 2, "write_mask")?;
    let px: Vec<u8> = t.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_pgm(path, d[0], d[1], &px)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeDtype {
    F32Le,
    U8,
}

impl VolumeDtype {
    fn name(self) -> &'static str {
        match self {
            VolumeDtype::F32Le => "f32le",
            VolumeDtype::U8 => "u8",
        }
    }
}

/// `VOL1` volume: `(dims [H, W, D], dtype, values)`; u8 payloads are scaled to `[0, 1]`.
pub fn parse_volume(bytes: &[u8]) -> Result<([usize; 3], VolumeDtype, Vec<f32>)> {
    let mut h = Header { bytes, pos: 0 };
    if h.token("magic")? != "VOL1" {
        return Err(Error::parse(0, "not a VOL1 volume"));
    }
    let dims = [h.number("height")?, h.number("width")?, h.number("depth")?];
    h.skip_space_and_comments();
    let at = h.pos as u64;
    let dtype = match h.token("dtype")? {
        "f32le" => VolumeDtype::F32Le,
        "u8" => VolumeDtype::U8,
        other => return Err(Error::parse(at, format!("unknown dtype `{other}` (expected f32le or u8)"))),
    };
    let start = h.end()?;
    let n = dims[0] * dims[1] * dims[2];
    let width = if dtype == VolumeDtype::U8 { 1 } else { 4 };
    let payload = &bytes[start..];
    if payload.len() < n * width {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("payload has {} bytes, header promises {}", payload.len(), n * width),
        ));
    }
    if payload.len() > n * width {
        return Err(Error::parse((start + n * width) as u64, "trailing bytes after voxel data"));
    }
    let values = match dtype {
        VolumeDtype::U8 => payload.iter().map(|&v| v as f32 / 255.0).collect(),
        VolumeDtype::F32Le => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Ok((dims, dtype, values))
}

pub fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let (d, _, v) = parse_volume(&fs::read(path)?)?;
    Tensor::from_vec(vec![1, d[0], d[1], d[2]], v)
}

/// Mask volume as `{0, 1}` (values >= 0.5 are foreground).
pub fn read_volume_mask(path: &Path) -> Result<Tensor<f32>> {
    Ok(read_volume(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

pub fn write_volume(path: &Path, t: &Tensor<f32>, dtype: VolumeDtype) -> Result<()> {
    let d = plane_dims(t, 3, "write_volume")?;
    let mut out = format!("VOL1\n{} {} {}\n{}\n", d[0], d[1], d[2], dtype.name()).into_bytes();
    match dtype {
        VolumeDtype::U8 => out.extend(t.data().iter().map(|&v| to_u8(v))),
        VolumeDtype::F32Le => {
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_volume_mask(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_volume(path, &t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }), VolumeDtype::U8)
}

/// One manifest line: input, mask and optional centerline paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub mask: PathBuf,
    pub centerline: Option<PathBuf>,
}

/// Read a tab-separated manifest. Relative paths resolve against the
/// manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::parse(at, format!("manifest line needs 2 or 3 tab-separated paths: `{line}`")));
        }
        out.push(ManifestEntry {
            input: base.join(cols[0]),
            mask: base.join(cols[1]),
            centerline: cols.get(2).map(|c| base.join(c)),
        });
    }
    Ok(out)
}

/// Write a manifest with paths as given (typically relative file names).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.input.to_string_lossy());
        out.push('\t');
        out.push_str(&e.mask.to_string_lossy());
        if let Some(c) = &e.centerline {
            out.push('\t');
            out.push_str(&c.to_string_lossy());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn is_volume(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("vol"))
}

/// Read an input by extension: `.vol` as a volume, anything else as PGM.
pub fn read_input(path: &Path) -> Result<Tensor<f32>> {
    if is_volume(path) {
        read_volume(path)
    } else {
        read_image(path)
    }
}

/// Read a binary label plane by extension.
pub fn read_label(path: &Path) -> Result<Tensor<f32>> {
    if is_volume(path) {
        read_volume_mask(path)
    } else {
        read_mask(path)
    }
}

/// Write a probability map or intensity plane: 8-bit PGM for 2D, `f32le`
/// volume for 3D. Returns the file name used (`stem` plus extension).
pub fn write_input(dir: &Path, stem: &str, t: &Tensor<f32>) -> Result<PathBuf> {
    let name = PathBuf::from(format!("{stem}.{}", if t.dims().len() == 4 { "vol" } else { "pgm" }));
    if t.dims().len() == 4 {
        write_volume(&dir.join(&name), t, VolumeDtype::F32Le)?;
    } else {
        write_image(&dir.join(&name), t)?;
    }
    Ok(name)
}

/// Write a binary plane as an 8-bit `{0, 255}` PGM or `u8` volume.
pub fn write_label(dir: &Path, stem: &str, t: &Tensor<f32>) -> Result<PathBuf> {
    let name = PathBuf::from(format!("{stem}.{}", if t.dims().len() == 4 { "vol" } else { "pgm" }));
    if t.dims().len() == 4 {
        write_volume_mask(&dir.join(&name), t)?;
    } else {
        write_mask(&dir.join(&name), t)?;
    }
    Ok(name)
}

pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
    let sample = Sample {
        input: read_input(&entry.input)?,
        mask: read_label(&entry.mask)?,
        centerline: entry.centerline.as_deref().map(read_label).transpose()?,
        meta: SampleMeta::default(),
    };
    sample.validate()?;
    Ok(sample)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    read_manifest(manifest)?.iter().map(load_sample).collect()
}

/// Write a sample's planes into `dir` as `{stem}_input`, `{stem}_mask` and
/// `{stem}_centerline`, returning a manifest entry with relative names.
pub fn save_sample(dir: &Path, stem: &str, sample: &Sample) -> Result<ManifestEntry> {
    Ok(ManifestEntry {
        input: write_input(dir, &format!("{stem}_input"), &sample.input)?,
        mask: write_label(dir, &format!("{stem}_mask"), &sample.mask)?,
        centerline: sample
            .centerline
            .as_ref()
            .map(|c| write_label(dir, &format!("{stem}_centerline"), c))
            .transpose()?,
    })
}
