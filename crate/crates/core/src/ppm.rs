//! Binary PPM (P6, 8-bit) image files.
//!
//! Images in memory are `[h, w, 3]` tensors with values in `[0, 1]`. Saving
//! quantizes with round-half-up (`⌊255·v + 0.5⌋`, clamped); loading divides
//! by 255. The format is deliberately plain so fixtures can be inspected
//! with standard tools.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Writes an `[h, w, 3]` tensor as binary PPM.
pub fn save_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let (h, w) = image_dims(image)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| {
            let q = (v.as_f64() * 255.0 + 0.5).floor();
            q.clamp(0.0, 255.0) as u8
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads a binary PPM into an `[h, w, 3]` tensor with values in `[0, 1]`.
pub fn load_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_ppm(&buf)
}

fn parse_ppm<S: Scalar>(buf: &[u8]) -> Result<Tensor<S>> {
    let mut pos = 0;
    let magic = next_token(buf, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::malformed("ppm", format!("expected P6, got {:?}", String::from_utf8_lossy(magic))));
    }
    let w: usize = parse_number(buf, &mut pos)?;
    let h: usize = parse_number(buf, &mut pos)?;
    let maxval: usize = parse_number(buf, &mut pos)?;
    if maxval != 255 {
        return Err(Error::malformed("ppm", format!("only maxval 255 is supported, got {maxval}")));
    }
    // A single whitespace byte separates the header from the payload.
    pos += 1;
    let need = h * w * 3;
    let payload = buf
        .get(pos..pos + need)
        .ok_or_else(|| Error::malformed("ppm", format!("payload truncated: need {need} bytes")))?;
    let data = payload
        .iter()
        .map(|b| S::of_f64(f64::from(*b) / 255.0))
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Skips whitespace and `#` comments, returning the next header token.
fn next_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::malformed("ppm", "truncated header".to_string()));
    }
    Ok(&buf[start..*pos])
}

fn parse_number(buf: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::malformed("ppm", format!("bad number {:?}", String::from_utf8_lossy(tok))))
}

fn image_dims<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::shape("ppm", format!("expected [h, w, 3], got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        // 0.5/255 quantizes to 1, just below it quantizes to 0.
        let t = Tensor::<f64>::new(
            vec![1, 2, 3],
            vec![0.4 / 255.0, 0.5 / 255.0, 1.0, 0.0, 254.49 / 255.0, 254.5 / 255.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ppm");
        save_ppm(&path, &t).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let payload = &raw[raw.len() - 6..];
        assert_eq!(payload, &[0, 1, 255, 0, 254, 255]);
    }

    #[test]
    fn round_trip_preserves_quantized_values_exactly() {
        let t = Tensor::<f32>::from_fn(vec![4, 5, 3], |i| (i % 256) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        save_ppm(&path, &t).unwrap();
        let back: Tensor<f32> = load_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[4, 5, 3]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a, b, "values on the 1/255 lattice survive unchanged");
        }
    }

    #[test]
    fn out_of_range_values_clamp_instead_of_wrapping() {
        let t = Tensor::<f32>::new(vec![1, 1, 3], vec![-0.5, 1.5, 0.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        save_ppm(&path, &t).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let payload = &raw[raw.len() - 3..];
        assert_eq!(payload, &[0, 255, 128]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P6\n# a comment\n2 1\n# another\n255\n".to_vec();
        buf.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let t: Tensor<f32> = parse_ppm(&buf).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert!((t.data()[0] - 10.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn wrong_magic_and_truncation_are_rejected() {
        assert!(parse_ppm::<f32>(b"P5\n1 1\n255\nxxx").is_err());
        assert!(parse_ppm::<f32>(b"P6\n2 2\n255\nshort").is_err());
        assert!(parse_ppm::<f32>(b"P6\n1 1\n65535\n").is_err());
    }

    #[test]
    fn non_rgb_tensor_is_rejected_on_save() {
        let t = Tensor::<f32>::zeros(vec![4, 4]);
        let dir = tempfile::tempdir().unwrap();
        assert!(save_ppm(&dir.path().join("bad.ppm"), &t).is_err());
    }
}
