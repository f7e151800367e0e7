//! 8-bit RGB PNG <-> `3 x H x W` latent in `[-1, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Pixel `p` maps to `p / 127.5 - 1`.
pub fn load_image_as_latent(path: impl AsRef<Path>) -> Result<Latent> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{}: expected 8-bit RGB, found {color:?} at {depth:?}",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    interleaved_to_latent(&buf, w, h, stride)
}

fn interleaved_to_latent(buf: &[u8], w: usize, h: usize, stride: usize) -> Result<Latent> {
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..h {
        let row = &buf[y * stride..y * stride + 3 * w];
        for x in 0..w {
            for c in 0..3 {
                data[c * plane + y * w + x] = pixel_to_value(row[3 * x + c]);
            }
        }
    }
    Latent::new(vec![3, h, w], data)
}

#[inline]
pub fn pixel_to_value(p: u8) -> f32 {
    (p as f64 / 127.5 - 1.0) as f32
}

/// Clamps to `[-1, 1]` and rounds `(v + 1) * 127.5`.
#[inline]
pub fn value_to_pixel(v: f32) -> u8 {
    let v = (v as f64).clamp(-1.0, 1.0);
    ((v + 1.0) * 127.5).round() as u8
}

/// Row-major interleaved RGB bytes for a `3 x H x W` latent.
pub fn latent_to_rgb8(x: &Latent) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = image_dims(x)?;
    let plane = w * h;
    let src = x.data();
    let mut out = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            out[3 * i + c] = value_to_pixel(src[c * plane + i]);
        }
    }
    Ok((w, h, out))
}

pub fn save_latent_as_image(x: &Latent, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h, rgb) = latent_to_rgb8(x)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&rgb)?;
    writer.finish()?;
    Ok(())
}

/// `(H, W)` of a `3 x H x W` latent.
pub fn image_dims(x: &Latent) -> Result<(usize, usize)> {
    match x.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::ShapeMismatch {
            expected: vec![3, 0, 0],
            actual: other.to_vec(),
        }),
    }
}
