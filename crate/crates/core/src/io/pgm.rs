//! Binary greyscale PGM (`P5`) export of sampler images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sampler::EXPORT_CLAMP;
use crate::tensor::Tensor;

/// Maps `[-3, 3]` onto `0..=255`, rounding halves up.
pub fn pixel_byte(v: f64) -> u8 {
    range_byte(v, -EXPORT_CLAMP, EXPORT_CLAMP)
}

fn range_byte(v: f64, lo: f64, hi: f64) -> u8 {
    let x = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (x * 255.0 + 0.5).floor() as u8
}

/// PGM bytes for a sampler image (values in `[-3, 3]`).
pub fn pgm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    pgm_bytes_range(img, -EXPORT_CLAMP, EXPORT_CLAMP)
}

/// PGM bytes with `lo` mapped to 0 and `hi` to 255.
pub fn pgm_bytes_range(img: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty pixel range [{lo}, {hi}]")));
    }
    if img.shape().len() != 2 {
        return Err(Error::Shape(format!("PGM needs a 2-D image, got {:?}", img.shape())));
    }
    if !img.is_finite() {
        return Err(Error::InvalidArgument("PGM image has non-finite pixels".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(img.data().iter().map(|&v| range_byte(v, lo, hi)));
    Ok(out)
}

pub fn write_pgm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &pgm_bytes(img)?)
}

/// Images of equal height side by side, separated by `gap` columns of
/// `fill`.
pub fn tile_row(images: &[Tensor], gap: usize, fill: f64) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to tile".into()))?;
    let h = first.rows();
    let mut parts = Vec::with_capacity(images.len() * 2);
    for (i, img) in images.iter().enumerate() {
        if img.shape().len() != 2 || img.rows() != h {
            return Err(Error::Shape(format!("tile {:?} vs height {h}", img.shape())));
        }
        if i > 0 && gap > 0 {
            parts.push(Tensor::full(&[h, gap], fill));
        }
        parts.push(img.clone());
    }
    Tensor::hconcat(&parts)
}

/// Parses a `P5` file written by [`write_pgm`] back into raw byte values.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::InvalidArgument("not a binary PGM written by this tool".into());
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
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?;
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_range_endpoints() {
        let lo = pgm_bytes(&Tensor::full(&[16, 16], -3.0)).unwrap();
        let hi = pgm_bytes(&Tensor::full(&[16, 16], 3.0)).unwrap();
        let mid = pgm_bytes(&Tensor::full(&[16, 16], 0.0)).unwrap();
        assert_eq!(&lo[..13], b"P5\n16 16\n255\n");
        assert_eq!(lo.len(), 13 + 256);
        assert!(lo[13..].iter().all(|&b| b == 0));
        assert!(hi[13..].iter().all(|&b| b == 255));
        assert!(mid[13..].iter().all(|&b| b == 128));
        assert_eq!(pixel_byte(-10.0), 0);
        assert_eq!(pixel_byte(10.0), 255);
    }

    #[test]
    fn tiles_side_by_side() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 3], 2.0);
        let t = tile_row(&[a, b], 1, -3.0).unwrap();
        assert_eq!(t.shape(), &[2, 6]);
        assert_eq!(t.row(0), &[1.0, 1.0, -3.0, 2.0, 2.0, 2.0]);
        assert!(tile_row(&[], 0, 0.0).is_err());
    }

    #[test]
    fn unit_range() {
        let img = Tensor::from_rows(&[&[0.0, 1.0, 0.5]]);
        let px = pgm_bytes_range(&img, 0.0, 1.0).unwrap();
        assert_eq!(&px[px.len() - 3..], &[0, 255, 128]);
    }

    #[test]
    fn parses_back() {
        let mut img = Tensor::zeros(&[16, 16]);
        img.set(0, 1, 3.0);
        let (w, h, px) = read_pgm(&pgm_bytes(&img).unwrap()).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(px[1], 255);
        assert_eq!(px[0], 128);
    }
}
