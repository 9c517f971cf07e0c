//! On-disk formats: Middlebury `.flo`, the `RCFF` feature container, and binary PGM/PPM.

use std::fs;
use std::path::Path;

use super::types::{FeatureMap, FlowField, Frame, Mask};
use crate::error::{RcfError, Result};

/// Middlebury sanity tag, the bytes "PIEH" read as a little-endian f32.
pub const FLO_MAGIC: f32 = 202021.25;
pub const FEATURE_MAGIC: &[u8; 4] = b"RCFF";

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(RcfError::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn encode_flo(field: &FlowField) -> Result<Vec<u8>> {
    field.check_finite()?;
    let mut out = Vec::with_capacity(12 + 8 * field.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width as i32).to_le_bytes());
    out.extend_from_slice(&(field.height as i32).to_le_bytes());
    for p in 0..field.len() {
        out.extend_from_slice(&(field.u[p] as f32).to_le_bytes());
        out.extend_from_slice(&(field.v[p] as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let mut cur = Cursor::new(bytes, ".flo");
    let magic = cur.f32()?;
    if magic != FLO_MAGIC {
        return Err(RcfError::Format(format!(".flo: bad magic {magic}")));
    }
    let width = cur.i32()?;
    let height = cur.i32()?;
    if width < 1 || height < 1 {
        return Err(RcfError::Format(format!(".flo: invalid dimensions {width}x{height}")));
    }
    let n = width as usize * height as usize;
    if cur.remaining() < n * 8 {
        return Err(RcfError::Format(format!(".flo: truncated payload, need {} bytes, have {}", n * 8, cur.remaining())));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(cur.f32()? as f64);
        v.push(cur.f32()? as f64);
    }
    FlowField::new(height as usize, width as usize, u, v)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

/// Validates before touching the filesystem, so a bad field never leaves a partial file.
pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_flo(field)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_features(map: &FeatureMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut out = Vec::with_capacity(16 + 4 * map.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for d in [map.height, map.width, map.dim] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &map.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    let mut cur = Cursor::new(bytes, "RCFF");
    if cur.take(4)? != FEATURE_MAGIC {
        return Err(RcfError::Format("RCFF: bad magic".into()));
    }
    let height = cur.u32()? as usize;
    let width = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let n = height * width * dim;
    if cur.remaining() != n * 4 {
        return Err(RcfError::Format(format!(
            "RCFF: header declares {height}x{width}x{dim} = {n} floats, payload holds {} bytes",
            cur.remaining()
        )));
    }
    let data = (0..n).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    FeatureMap::new(height, width, dim, data)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_features(&fs::read(path)?)
}

pub fn write_features(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_features(map)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.data.iter().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Masks are written with values {0, 255}; soft masks are thresholded at 0.5.
pub fn write_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

/// Parses a binary PNM header, returning (magic, width, height, payload).
fn parse_pnm(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RcfError::Format("PNM: truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| RcfError::Format(format!("PNM: bad header field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(RcfError::Format(format!("PNM: unsupported maxval {maxval}")));
    }
    Ok((fields[0].clone(), w, h, bytes.get(pos..).unwrap_or(&[])))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Frame> {
    let bytes = fs::read(path)?;
    let (magic, w, h, payload) = parse_pnm(&bytes)?;
    if magic != "P6" {
        return Err(RcfError::Format(format!("expected P6, found {magic}")));
    }
    if payload.len() < w * h * 3 {
        return Err(RcfError::Format("PPM: truncated raster".into()));
    }
    Frame::new(h, w, payload[..w * h * 3].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Reads a PGM mask, mapping any nonzero byte to 1.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (magic, w, h, payload) = parse_pnm(&bytes)?;
    if magic != "P5" {
        return Err(RcfError::Format(format!("expected P5, found {magic}")));
    }
    if payload.len() < w * h {
        return Err(RcfError::Format("PGM: truncated raster".into()));
    }
    Mask::new(h, w, payload[..w * h].iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pixel_flo_decodes() {
        let field = FlowField::new(1, 1, vec![1.5], vec![-2.0]).unwrap();
        let bytes = encode_flo(&field).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        let back = decode_flo(&bytes).unwrap();
        assert_eq!((back.height, back.width, back.u[0], back.v[0]), (1, 1, 1.5, -2.0));
    }

    #[test]
    fn zero_magic_is_rejected() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2)).unwrap();
        bytes[..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(decode_flo(&bytes), Err(RcfError::Format(_))));
    }

    #[test]
    fn truncated_flo_is_rejected() {
        let bytes = encode_flo(&FlowField::zeros(3, 3)).unwrap();
        assert!(matches!(decode_flo(&bytes[..bytes.len() - 1]), Err(RcfError::Format(_))));
        assert!(matches!(decode_flo(&bytes[..6]), Err(RcfError::Format(_))));
    }

    #[test]
    fn non_finite_flo_payload_is_value_error() {
        let mut bytes = encode_flo(&FlowField::zeros(1, 1)).unwrap();
        bytes[12..16].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_flo(&bytes), Err(RcfError::Value(_))));
    }

    #[test]
    fn two_by_two_flo_is_44_bytes() {
        assert_eq!(encode_flo(&FlowField::zeros(2, 2)).unwrap().len(), 44);
    }

    #[test]
    fn nan_flow_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.flo");
        let field = FlowField { height: 1, width: 1, u: vec![f64::NAN], v: vec![0.0] };
        assert!(matches!(write_flo(&field, &path), Err(RcfError::Value(_))));
        assert!(!path.exists());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let r = write_flo(&FlowField::zeros(1, 1), "/nonexistent-dir/x/y.flo");
        assert!(matches!(r, Err(RcfError::Io(_))));
    }

    #[test]
    fn single_feature_is_20_bytes() {
        let map = FeatureMap::new(1, 1, 1, vec![7.0]).unwrap();
        let bytes = encode_features(&map).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode_features(&bytes).unwrap(), map);
    }

    #[test]
    fn short_feature_payload_is_rejected() {
        let mut bytes = b"RCFF".to_vec();
        for d in [2u32, 2, 3] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for i in 0..10 {
            bytes.extend_from_slice(&(i as f32 + 1.0).to_le_bytes());
        }
        assert!(matches!(decode_features(&bytes), Err(RcfError::Format(_))));
    }

    #[test]
    fn bad_feature_magic_is_rejected() {
        let map = FeatureMap::new(1, 1, 1, vec![7.0]).unwrap();
        let mut bytes = encode_features(&map).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(RcfError::Format(_))));
    }

    #[test]
    fn pnm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        write_ppm(&frame, dir.path().join("f.ppm")).unwrap();
        let back = read_ppm(dir.path().join("f.ppm")).unwrap();
        for (a, b) in frame.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mask = Mask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        write_pgm(&mask, dir.path().join("m.pgm")).unwrap();
        assert_eq!(read_pgm(dir.path().join("m.pgm")).unwrap(), mask);
    }
}
