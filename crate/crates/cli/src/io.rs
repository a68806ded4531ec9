//! Image and checkpoint file handling: PNG (8-bit RGB), binary PPM (P6),
//! `.evck` checkpoints, and `.evcb` banks.

use std::fs;
use std::path::Path;

use evc_core::checkpoint;
use evc_core::image::ImageU8;
use evc_core::model::Model;
use evc_core::scalable::EncoderBank;

use crate::{CliError, CliResult};

pub fn load_image(path: &Path) -> CliResult<ImageU8> {
    match extension(path) {
        Some("png") => load_png(path),
        Some("ppm") => load_ppm(path),
        _ => Err(CliError::Usage(format!(
            "unsupported image extension on {} (use .png or .ppm)",
            path.display()
        ))),
    }
}

pub fn save_image(path: &Path, img: &ImageU8) -> CliResult<()> {
    match extension(path) {
        Some("png") => save_png(path, img),
        Some("ppm") => save_ppm(path, img),
        _ => Err(CliError::Usage(format!(
            "unsupported image extension on {} (use .png or .ppm)",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn load_png(path: &Path) -> CliResult<ImageU8> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::Data(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => pixels.to_vec(),
        png::ColorType::Rgba => pixels
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => pixels
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => {
            return Err(CliError::Data(format!(
                "{}: unsupported PNG color type {other:?}",
                path.display()
            )))
        }
    };
    ImageU8::from_rgb(w, h, rgb).map_err(|e| CliError::Data(e.to_string()))
}

fn save_png(path: &Path, img: &ImageU8) -> CliResult<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(
        std::io::BufWriter::new(file),
        img.width as u32,
        img.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| CliError::Data(e.to_string()))?;
    writer
        .write_image_data(&img.rgb)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn load_ppm(path: &Path) -> CliResult<ImageU8> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Binary PPM parser: `P6`, whitespace/comment-separated width, height,
/// maxval (must be 255), then raw RGB triples.
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageU8, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<Vec<u8>, String> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(bytes[start..pos].to_vec())
    };
    if token(bytes)? != b"P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let parse = |t: Vec<u8>| -> Result<usize, String> {
        std::str::from_utf8(&t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "bad header number".into())
    };
    let w = parse(token(bytes)?)?;
    let h = parse(token(bytes)?)?;
    let maxval = parse(token(bytes)?)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the pixel data
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    ImageU8::from_rgb(w, h, bytes[pos..pos + need].to_vec()).map_err(|e| e.to_string())
}

fn save_ppm(path: &Path, img: &ImageU8) -> CliResult<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> CliResult<Model<f32>> {
    let bytes = fs::read(path)?;
    Ok(checkpoint::load_model(&bytes)?)
}

pub fn save_model(path: &Path, model: &Model<f32>) -> CliResult<()> {
    fs::write(path, checkpoint::save_model(model))?;
    Ok(())
}

pub fn load_bank(path: &Path) -> CliResult<EncoderBank<f32>> {
    let bytes = fs::read(path)?;
    Ok(checkpoint::load_bank(&bytes)?)
}

pub fn save_bank(path: &Path, bank: &EncoderBank<f32>) -> CliResult<()> {
    fs::write(path, checkpoint::save_bank(bank))?;
    Ok(())
}

/// All images in a directory, sorted by file name for determinism.
pub fn load_corpus(dir: &Path) -> CliResult<Vec<(String, ImageU8)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(extension(p), Some("png") | Some("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no .png or .ppm images under {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, load_image(&p)?));
    }
    Ok(out)
}
