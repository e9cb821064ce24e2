//! Frame I/O: PNG, binary PPM (P6) and PFM, selected by file extension.
//!
//! Frames are `(H, W, 3)` tensors in `[0, 1]`. Writing to the 8-bit formats
//! clamps and rounds; PFM keeps full float precision (rows bottom-to-top,
//! little-endian, per the format).

use std::path::Path;

use sepconv_core::tensor::Tensor;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
    Pfm,
}

fn format_of(path: &Path) -> CliResult<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        Some("pfm") => Ok(Format::Pfm),
        other => Err(CliError::Config(format!(
            "{}: unsupported image extension {:?} (png, ppm, pfm)",
            path.display(),
            other
        ))),
    }
}

pub fn read_image(path: &Path) -> CliResult<Tensor<f32>> {
    match format_of(path)? {
        Format::Png => read_png(path),
        Format::Ppm => read_ppm(path),
        Format::Pfm => read_pfm(path),
    }
}

pub fn write_image(path: &Path, frame: &Tensor<f32>) -> CliResult<()> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(CliError::Config(format!(
            "can only write (H, W, 3) frames, got {s:?}"
        )));
    }
    match format_of(path)? {
        Format::Png => write_png(path, frame),
        Format::Ppm => write_ppm(path, frame),
        Format::Pfm => write_pfm(path, frame),
    }
}

fn read_png(path: &Path) -> CliResult<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| CliError::io(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[h, w, 3], data).map_err(CliError::from)
}

fn write_png(path: &Path, frame: &Tensor<f32>) -> CliResult<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| CliError::io(path, e))
}

/// Kernel visualizations: a single-channel `(n, n)` tensor to gray PNG.
pub fn write_gray_png(path: &Path, plane: &Tensor<f32>) -> CliResult<()> {
    let s = plane.shape();
    if s.len() != 2 {
        return Err(CliError::Config(format!(
            "grayscale writer expects an (H, W) tensor, got {s:?}"
        )));
    }
    let bytes: Vec<u8> = plane
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(s[1] as u32, s[0] as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| CliError::io(path, e))
}

/// Pulls the next whitespace-delimited token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> CliResult<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CliError::io(path, "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(token: &[u8], path: &Path) -> CliResult<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::io(path, "malformed header number"))
}

fn read_ppm(path: &Path) -> CliResult<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos, path)?;
    if magic != b"P6" {
        return Err(CliError::io(path, "not a binary PPM (P6)"));
    }
    let w = parse_usize(next_token(&bytes, &mut pos, path)?, path)?;
    let h = parse_usize(next_token(&bytes, &mut pos, path)?, path)?;
    let maxval = parse_usize(next_token(&bytes, &mut pos, path)?, path)?;
    if maxval == 0 || maxval > 255 {
        return Err(CliError::io(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(CliError::io(path, "pixel data truncated"));
    }
    let data: Vec<f32> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Tensor::new(&[h, w, 3], data).map_err(CliError::from)
}

fn write_ppm(path: &Path, frame: &Tensor<f32>) -> CliResult<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        frame
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

fn read_pfm(path: &Path) -> CliResult<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos, path)?;
    let channels = match magic {
        b"PF" => 3usize,
        b"Pf" => 1usize,
        _ => return Err(CliError::io(path, "not a PFM file")),
    };
    let w = parse_usize(next_token(&bytes, &mut pos, path)?, path)?;
    let h = parse_usize(next_token(&bytes, &mut pos, path)?, path)?;
    let scale_token = next_token(&bytes, &mut pos, path)?;
    let scale: f32 = std::str::from_utf8(scale_token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::io(path, "malformed scale"))?;
    let little_endian = scale < 0.0;
    pos += 1; // single whitespace after scale
    let need = w * h * channels * 4;
    if bytes.len() < pos + need {
        return Err(CliError::io(path, "pixel data truncated"));
    }
    let mut data = vec![0f32; w * h * 3];
    // PFM stores rows bottom-to-top.
    for row in 0..h {
        let src_row = h - 1 - row;
        for x in 0..w {
            for c in 0..channels {
                let at = pos + ((src_row * w + x) * channels + c) * 4;
                let raw: [u8; 4] = bytes[at..at + 4].try_into().expect("4 bytes");
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                let v = v * scale.abs();
                if channels == 1 {
                    for cc in 0..3 {
                        data[(row * w + x) * 3 + cc] = v;
                    }
                } else {
                    data[(row * w + x) * 3 + c] = v;
                }
            }
        }
    }
    Tensor::new(&[h, w, 3], data).map_err(CliError::from)
}

fn write_pfm(path: &Path, frame: &Tensor<f32>) -> CliResult<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    let src = frame.data();
    for row in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                out.extend_from_slice(&src[(row * w + x) * 3 + c].to_le_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// All decodable frames in a directory, sorted by file name; they must share
/// one size.
pub fn read_frame_dir(dir: &Path) -> CliResult<Vec<Tensor<f32>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| format_of(p).is_ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Io(format!(
            "{}: no frames (png/ppm/pfm) found",
            dir.display()
        )));
    }
    let frames: CliResult<Vec<_>> = paths.iter().map(|p| read_image(p)).collect();
    let frames = frames?;
    let shape = frames[0].shape().to_vec();
    if frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(CliError::Config(format!(
            "{}: frames differ in size",
            dir.display()
        )));
    }
    Ok(frames)
}
