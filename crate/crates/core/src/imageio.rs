//! Reading and writing slices (16-bit binary PGM) and exported ROIs (8-bit PNG).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::data_model::SliceImage;
use crate::error::{Error, Result};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_pgm16(path: &Path, slice: &SliceImage) -> Result<()> {
    create_parent(path)?;
    let (h, w) = (slice.height(), slice.width());
    // The image crate's PNM encoder has no 16-bit path; the format is trivial.
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    bytes.reserve(h * w * 2);
    for &v in slice.pixels().iter() {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let mut out = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_pgm16(path: &Path) -> Result<SliceImage> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.into(),
            source,
        },
    })?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let pixels = Array2::from_shape_vec((h as usize, w as usize), luma.into_raw()).expect("buffer matches dimensions");
    SliceImage::new(pixels)
}

pub fn write_png8(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    create_parent(path)?;
    let (h, w) = pixels.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels.iter().copied().collect()).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

pub fn read_png8(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), luma.into_raw()).expect("dims"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_round_trip_preserves_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let px = Array2::from_shape_fn((3, 5), |(r, c)| ((r * 5 + c + 1) * 4369) as u16);
        let slice = SliceImage::new(px).unwrap();
        write_pgm16(&path, &slice).unwrap();
        let back = read_pgm16(&path).unwrap();
        assert_eq!(back, slice);
        assert_eq!(back.pixels()[[2, 4]], 65535);
        let head = std::fs::read(&path).unwrap();
        assert_eq!(&head[..2], b"P5");
    }

    #[test]
    fn png8_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let px = Array2::from_shape_fn((7, 4), |(r, c)| (r * 37 + c * 11) as u8);
        write_png8(&path, &px).unwrap();
        assert_eq!(read_png8(&path).unwrap(), px);
    }
}
