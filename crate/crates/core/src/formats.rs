//! File codecs: MVS camera text files, PPM/PGM, PFM and track lists.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{io_err, ReconError, Result};
use crate::geometry::Camera;
use crate::vcscore::{Track, TrackSet};

/// Hypothesis count written into camera files.
pub const CAM_DEPTH_NUM: usize = 192;

fn format_err(path: &Path, msg: impl Into<String>) -> ReconError {
    ReconError::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn camera_to_string(cam: &Camera) -> String {
    let mut s = String::from("extrinsic\n");
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", cam.extrinsic[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s.push_str("\nintrinsic\n");
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{}", cam.k[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let interval = (cam.depth_max - cam.depth_min) / (CAM_DEPTH_NUM - 1) as f64;
    let _ = writeln!(s, "\n{} {} {} {}", cam.depth_min, interval, CAM_DEPTH_NUM, cam.depth_max);
    s
}

/// Parses a camera file. The image extent is not part of the format and
/// must be supplied.
pub fn parse_camera(text: &str, width: usize, height: usize, path: &Path) -> Result<Camera> {
    let mut it = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let section = |it: &mut dyn Iterator<Item = &str>, tag: &str| -> Result<()> {
        match it.next() {
            Some(l) if l.eq_ignore_ascii_case(tag) => Ok(()),
            other => Err(format_err(path, format!("expected `{tag}`, found {other:?}"))),
        }
    };
    let nums = |line: Option<&str>, n: usize| -> Result<Vec<f64>> {
        let line = line.ok_or_else(|| format_err(path, "unexpected end of file"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format_err(path, format!("bad number `{t}`"))))
            .collect::<Result<_>>()?;
        if v.len() < n {
            return Err(format_err(path, format!("expected {n} numbers in `{line}`")));
        }
        Ok(v)
    };
    section(&mut it, "extrinsic")?;
    let mut e = Matrix4::zeros();
    for r in 0..4 {
        let v = nums(it.next(), 4)?;
        for c in 0..4 {
            e[(r, c)] = v[c];
        }
    }
    section(&mut it, "intrinsic")?;
    let mut k = Matrix3::zeros();
    for r in 0..3 {
        let v = nums(it.next(), 3)?;
        for c in 0..3 {
            k[(r, c)] = v[c];
        }
    }
    let d = nums(it.next(), 2)?;
    let depth_min = d[0];
    let depth_max = match d.len() {
        2 => d[0] + d[1] * (CAM_DEPTH_NUM - 1) as f64,
        3 => d[0] + d[1] * (d[2] - 1.0),
        _ => d[3],
    };
    Camera::new(k, e, depth_min, depth_max, width, height)
        .map_err(|err| format_err(path, err.to_string()))
}

pub fn write_camera(path: impl AsRef<Path>, cam: &Camera) -> Result<()> {
    write(path.as_ref(), camera_to_string(cam).as_bytes())
}

pub fn read_camera(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Camera> {
    let path = path.as_ref();
    let text = String::from_utf8(read(path)?).map_err(|_| format_err(path, "not UTF-8"))?;
    parse_camera(&text, width, height, path)
}

/// 8-bit RGB or gray image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ByteImage {
    /// Quantizes a planar `[C, H, W]` buffer in `[0, 1]`.
    pub fn from_planar(values: &[f32], channels: usize, height: usize, width: usize) -> Self {
        let mut data = vec![0u8; values.len()];
        for c in 0..channels {
            for p in 0..height * width {
                let v = values[c * height * width + p].clamp(0.0, 1.0);
                data[p * channels + c] = (v * 255.0).round() as u8;
            }
        }
        Self { width, height, channels, data }
    }

    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c] as f32 / 255.0;
            }
        }
        out
    }
}

fn pnm_header(bytes: &[u8], path: &Path) -> Result<(String, Vec<usize>, usize)> {
    // Magic plus three integer fields separated by whitespace (comments allowed).
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
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let nums = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>().map_err(|_| format_err(path, format!("bad header field `{f}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((fields[0].clone(), nums, pos))
}

pub fn encode_pnm(img: &ByteImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<ByteImage> {
    let (magic, nums, pos) = pnm_header(bytes, path)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format_err(path, format!("unsupported magic `{m}`"))),
    };
    let (width, height, maxval) = (nums[0], nums[1], nums[2]);
    if maxval != 255 {
        return Err(format_err(path, format!("only 8-bit images are supported, maxval {maxval}")));
    }
    let n = width * height * channels;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_err(path, "truncated raster"))?
        .to_vec();
    Ok(ByteImage { width, height, channels, data })
}

pub fn write_pnm(path: impl AsRef<Path>, img: &ByteImage) -> Result<()> {
    write(path.as_ref(), &encode_pnm(img))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<ByteImage> {
    let path = path.as_ref();
    decode_pnm(&read(path)?, path)
}

/// Single-channel float map, row-major with row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Grayscale PFM, little-endian (scale -1.0), rows stored bottom-up.
pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for y in (0..map.height).rev() {
        for &v in &map.data[y * map.width..(y + 1) * map.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(format_err(path, format!("expected grayscale `Pf`, found `{}`", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad extent `{s}`")));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| format_err(path, "bad scale"))?;
    let little = scale < 0.0;
    let raster = bytes
        .get(pos..pos + width * height * 4)
        .ok_or_else(|| format_err(path, "truncated raster"))?;
    let mut data = vec![0.0f32; width * height];
    for (i, c) in raster.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v;
    }
    Ok(FloatMap { width, height, data })
}

pub fn write_pfm(path: impl AsRef<Path>, map: &FloatMap) -> Result<()> {
    write(path.as_ref(), &encode_pfm(map))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatMap> {
    let path = path.as_ref();
    decode_pfm(&read(path)?, path)
}

pub fn tracks_to_string(tracks: &TrackSet) -> String {
    let mut s = String::new();
    for t in &tracks.tracks {
        let _ = write!(s, "{} {} {}", t.position.x, t.position.y, t.position.z);
        for v in &t.views {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_tracks(text: &str, path: &Path) -> Result<TrackSet> {
    let mut tracks = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 5 {
            return Err(format_err(path, format!("line {}: need x y z and at least two view ids", n + 1)));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| format_err(path, format!("line {}: bad coordinate `{s}`", n + 1)));
        let position = Vector3::new(f(tok[0])?, f(tok[1])?, f(tok[2])?);
        let views = tok[3..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| format_err(path, format!("line {}: bad view id `{s}`", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        tracks.push(Track { position, views });
    }
    Ok(TrackSet { tracks })
}

pub fn write_tracks(path: impl AsRef<Path>, tracks: &TrackSet) -> Result<()> {
    write(path.as_ref(), tracks_to_string(tracks).as_bytes())
}

pub fn read_tracks(path: impl AsRef<Path>) -> Result<TrackSet> {
    let path = path.as_ref();
    let text = String::from_utf8(read(path)?).map_err(|_| format_err(path, "not UTF-8"))?;
    parse_tracks(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_rows_are_bottom_up() {
        let map = FloatMap { width: 2, height: 2, data: vec![1.0, 2.0, 3.0, 4.0] };
        let bytes = encode_pfm(&map);
        let header = b"Pf\n2 2\n-1.0\n".len();
        assert_eq!(&bytes[header..header + 4], &3.0f32.to_le_bytes());
        assert_eq!(decode_pfm(&bytes, Path::new("m.pfm")).unwrap(), map);
    }

    #[test]
    fn camera_file_requires_sections() {
        let err = parse_camera("intrinsic\n1 0 0\n", 4, 4, Path::new("c.txt")).unwrap_err();
        assert!(err.to_string().contains("extrinsic"));
    }

    #[test]
    fn track_lines_need_two_views() {
        assert!(parse_tracks("0 0 0 1\n", Path::new("t.txt")).is_err());
        let t = parse_tracks("# comment\n0.5 1 -2 0 3\n", Path::new("t.txt")).unwrap();
        assert_eq!(t.tracks[0].views, vec![0, 3]);
    }
}
