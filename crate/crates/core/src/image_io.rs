//! Binary PPM (P6, 8-bit RGB) and PGM (P5, 8-bit gray) readers and writers.
//! Pixel values map to floats as value / 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Skip whitespace and `#` comments, then read one ASCII token.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(Error::data("truncated netpbm header".to_string()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let found = next_token(bytes, &mut pos)?;
    if found != magic {
        return Err(Error::data(format!(
            "expected {magic} image, found magic {found:?}"
        )));
    }
    let w: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::data("bad width".to_string()))?;
    let h: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::data("bad height".to_string()))?;
    let maxval: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::data("bad maxval".to_string()))?;
    if maxval != 255 {
        return Err(Error::data(format!("only maxval 255 supported, got {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    Ok((w, h, pos))
}

/// Read an 8-bit RGB PPM into a (1, 3, H, W) tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let (w, h, start) = parse_header(&bytes, "P6")?;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err(Error::data(format!(
            "{}: truncated pixel payload",
            path.display()
        )));
    }
    let mut t = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = start + (y * w + x) * 3;
            for c in 0..3 {
                t.set(0, c, y, x, bytes[p + c] as f32 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Write a (N=1, 3, H, W) tensor as an 8-bit PPM, clamping to [0, 1].
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return Err(Error::invalid(format!(
            "write_ppm expects a (1,3,H,W) tensor, got {:?}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(32 + w * h * 3);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(t.at(0, ch, y, x)));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an 8-bit PGM into a (1, 1, H, W) tensor in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let (w, h, start) = parse_header(&bytes, "P5")?;
    if bytes.len() < start + w * h {
        return Err(Error::data(format!(
            "{}: truncated pixel payload",
            path.display()
        )));
    }
    let mut t = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set(0, 0, y, x, bytes[start + y * w + x] as f32 / 255.0);
        }
    }
    Ok(t)
}

/// Write a (1, 1, H, W) tensor as an 8-bit PGM, clamping to [0, 1].
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!(
            "write_pgm expects a (1,1,H,W) tensor, got {:?}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(32 + w * h);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            out.push(quantize(t.at(0, 0, y, x)));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let dir = std::env::temp_dir().join("dehaze_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ppm");
        let mut rng = Rng::seed(1);
        let mut t = Tensor::zeros([1, 3, 5, 7]);
        for v in t.data_mut() {
            *v = (rng.below(256) as f32) / 255.0;
        }
        write_ppm(&path, &t).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = std::env::temp_dir().join("dehaze_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.pgm");
        let mut rng = Rng::seed(2);
        let mut t = Tensor::zeros([1, 1, 4, 6]);
        for v in t.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        write_pgm(&path, &t).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = std::env::temp_dir().join("dehaze_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("comment.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        std::fs::write(&path, bytes).unwrap();
        let t = read_pgm(&path).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 2]);
        assert!((t.at(0, 0, 1, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = std::env::temp_dir().join("dehaze_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Data(_))));
    }
}
