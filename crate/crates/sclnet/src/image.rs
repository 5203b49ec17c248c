//! 8-bit PNG IO for `[3, H, W]` images in `[0, 1]` and grey heatmaps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sclnet_core::Tensor;

use crate::error::{CliError, CliResult};

/// Nearest 8-bit level of a `[0, 1]` value.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> CliResult<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut wr = enc.write_header().map_err(err)?;
    wr.write_image_data(data).map_err(err)?;
    wr.finish().map_err(err)
}

/// Writes planar `[3, H, W]` pixels as interleaved RGB.
pub fn write_rgb(path: &Path, pixels: &Tensor<f32>) -> CliResult<()> {
    let (h, w) = (pixels.dim(1), pixels.dim(2));
    let d = pixels.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            buf.push(quantize(d[c * h * w + i]));
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &buf)
}

pub fn write_gray(path: &Path, w: usize, h: usize, data: &[u8]) -> CliResult<()> {
    write_png(path, w, h, png::ColorType::Grayscale, data)
}

/// Reads an 8-bit RGB, RGBA, grey or grey-alpha PNG into planar `[3, H, W]`.
pub fn read_rgb(path: &Path) -> CliResult<Tensor<f32>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let err = |e: png::DecodingError| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::Runtime(format!("{}: expected 8-bit samples", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let ch = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => unreachable!("expanded by the decoder"),
    };
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let src = if ch >= 3 { c } else { 0 };
            out[c * h * w + i] = buf[i * ch + src] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], out).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let t = Tensor::from_vec(&[3, 4, 5], data).unwrap();
        let p = dir.path().join("x.png");
        write_rgb(&p, &t).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), t);
    }
}
