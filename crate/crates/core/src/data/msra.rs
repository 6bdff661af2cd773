//! MSRA hand-gesture binary frames and per-gesture pose files.
//!
//! Frame file: six little-endian `i32` (image width, height, box left, top,
//! right, bottom) followed by `(right−left)·(bottom−top)` little-endian `f32`
//! depths for the box, row-major. Pose file: a frame count on the first line,
//! then `3·J` whitespace-separated floats per frame.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::Pose;
use crate::voxel::{DepthFrame, PixelBox};

const HEADER_BYTES: usize = 24;

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Decodes one frame; `path` is only used for error messages.
pub fn decode_msra_frame(bytes: &[u8], path: &Path) -> Result<DepthFrame> {
    if bytes.len() < HEADER_BYTES {
        return Err(parse_err(path, bytes.len() as u64, format!("header needs {HEADER_BYTES} bytes, file has {}", bytes.len())));
    }
    let h: Vec<i32> = bytes[..HEADER_BYTES]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (width, height, left, top, right, bottom) = (h[0], h[1], h[2], h[3], h[4], h[5]);
    if width <= 0 || height <= 0 {
        return Err(parse_err(path, 0, format!("image size {width}x{height} is not positive")));
    }
    if !(0 <= left && left < right && right <= width && 0 <= top && top < bottom && bottom <= height) {
        return Err(parse_err(
            path,
            8,
            format!("box ({left}, {top})-({right}, {bottom}) is empty or outside the {width}x{height} image"),
        ));
    }
    let (bw, bh) = ((right - left) as usize, (bottom - top) as usize);
    let need = HEADER_BYTES + 4 * bw * bh;
    if bytes.len() != need {
        let at = bytes.len().min(need) as u64;
        return Err(parse_err(path, at, format!("expected {need} bytes for a {bw}x{bh} box, found {}", bytes.len())));
    }
    let (w, hgt) = (width as usize, height as usize);
    let mut depth = vec![0.0f32; w * hgt];
    for (n, c) in bytes[HEADER_BYTES..].chunks_exact(4).enumerate() {
        let d = f32::from_le_bytes(c.try_into().unwrap());
        if !(d.is_finite() && d >= 0.0) {
            return Err(parse_err(path, (HEADER_BYTES + 4 * n) as u64, format!("invalid depth value {d}")));
        }
        let (r, col) = (n / bw, n % bw);
        depth[(top as usize + r) * w + left as usize + col] = d;
    }
    let bbox = PixelBox {
        left: left as u32,
        top: top as u32,
        right: right as u32,
        bottom: bottom as u32,
    };
    DepthFrame::new(width as u32, height as u32, depth, Some(bbox))
}

pub fn read_msra_frame(path: &Path) -> Result<DepthFrame> {
    decode_msra_frame(&fs::read(path)?, path)
}

/// Inverse of [`decode_msra_frame`]; frames without a box store the whole image.
pub fn encode_msra_frame(frame: &DepthFrame) -> Vec<u8> {
    let b = frame.bbox.unwrap_or(PixelBox {
        left: 0,
        top: 0,
        right: frame.width,
        bottom: frame.height,
    });
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * (b.width() * b.height()) as usize);
    for v in [frame.width, frame.height, b.left, b.top, b.right, b.bottom] {
        out.extend_from_slice(&(v as i32).to_le_bytes());
    }
    for v in b.top..b.bottom {
        for u in b.left..b.right {
            out.extend_from_slice(&frame.at(u, v).to_le_bytes());
        }
    }
    out
}

pub fn write_msra_frame(path: &Path, frame: &DepthFrame) -> Result<()> {
    fs::write(path, encode_msra_frame(frame))?;
    Ok(())
}

/// Parses a pose file with `joints` joints per frame.
pub fn parse_pose_file(text: &str, joints: usize, path: &Path) -> Result<Vec<Pose>> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| parse_err(path, 0, "empty pose file"))?;
    let count: usize = first
        .trim()
        .parse()
        .map_err(|_| parse_err(path, 0, format!("first line `{}` is not a frame count", first.trim())))?;
    offset += first.len() as u64;
    let mut poses = Vec::with_capacity(count);
    for line in lines {
        if line.trim().is_empty() {
            offset += line.len() as u64;
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, offset, "malformed number"))?;
        if vals.len() != 3 * joints {
            return Err(parse_err(path, offset, format!("expected {} values, found {}", 3 * joints, vals.len())));
        }
        poses.push(Pose::new(vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()));
        offset += line.len() as u64;
    }
    if poses.len() != count {
        return Err(parse_err(path, offset, format!("header declares {count} frames, file has {}", poses.len())));
    }
    Ok(poses)
}

pub fn read_pose_file(path: &Path, joints: usize) -> Result<Vec<Pose>> {
    parse_pose_file(&fs::read_to_string(path)?, joints, path)
}

pub fn format_pose_file(poses: &[Pose]) -> String {
    let mut s = format!("{}\n", poses.len());
    for p in poses {
        let line: Vec<String> = p.joints.iter().flat_map(|j| j.iter().map(|v| format!("{v}"))).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
