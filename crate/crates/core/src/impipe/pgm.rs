//! Binary PGM (`P5`). Samples are one byte when maxval < 256, otherwise two
//! bytes big-endian.

use std::path::Path;

use super::RawImage;
use crate::error::{Error, Result};

pub fn encode_pgm(img: &RawImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval);
    let wide = img.maxval > 255;
    let mut out = Vec::with_capacity(header.len() + img.pixels.len() * if wide { 2 } else { 1 });
    out.extend_from_slice(header.as_bytes());
    for &p in &img.pixels {
        if wide {
            out.extend_from_slice(&p.to_be_bytes());
        } else {
            out.push(p as u8);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Parses a `P5` image; `origin` is only used in error messages.
pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<RawImage> {
    let bad = |msg: &str| Error::format(origin, msg);
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number().ok_or_else(|| bad("missing width"))?;
    let height = c.number().ok_or_else(|| bad("missing height"))?;
    let maxval = c.number().ok_or_else(|| bad("missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(&format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(bad("header must end with a single whitespace byte")),
    }
    let n = width.checked_mul(height).ok_or_else(|| bad("image too large"))?;
    let wide = maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    let body = &bytes[c.pos..];
    if body.len() != need {
        return Err(bad(&format!("expected {need} sample bytes, found {}", body.len())));
    }
    let pixels: Vec<u16> = if wide {
        body.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        body.iter().map(|&b| b as u16).collect()
    };
    if let Some(p) = pixels.iter().find(|&&p| p as usize > maxval) {
        return Err(bad(&format!("sample {p} exceeds maxval {maxval}")));
    }
    RawImage::new(width, height, maxval as u16, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Binary mask stored as an 8-bit PGM with values 0 and 255.
pub fn write_mask(path: impl AsRef<Path>, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let img = RawImage::new(width, height, 255, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())?;
    write_pgm(path, &img)
}

/// Any non-zero sample counts as inside.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let img = read_pgm(path)?;
    Ok((img.width, img.height, img.pixels.iter().map(|&p| p > 0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn roundtrip_16bit_on_disk() {
        let mut rng = substream(1, "pgm");
        let img = RawImage::new(7, 5, 65535, (0..35).map(|_| rng.gen()).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n7 5\n65535\n"));
        assert_eq!(bytes.len(), 13 + 70);
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn big_endian_samples() {
        let img = RawImage::new(2, 1, 65535, vec![0x0102, 0xfffe]).unwrap();
        let b = encode_pgm(&img);
        assert_eq!(&b[b.len() - 4..], &[0x01, 0x02, 0xff, 0xfe]);
    }

    #[test]
    fn eight_bit_is_widened() {
        let mut bytes = b"P5\n# comment line\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let img = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.maxval, 255);
        assert_eq!(img.pixels, vec![0u16, 128, 255]);
    }

    #[test]
    fn errors_name_the_path() {
        let e = decode_pgm(b"P2\n1 1\n255\n0", Path::new("bad/magic.pgm")).unwrap_err();
        assert!(e.to_string().contains("bad/magic.pgm"), "{e}");
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00", Path::new("t.pgm")).unwrap_err().to_string().contains("t.pgm"));
        assert!(decode_pgm(b"P5\n1 1\n100\n\xff", Path::new("t.pgm")).is_err());
        assert!(decode_pgm(b"P5\n1 1\n70000\n\x00\x00", Path::new("t.pgm")).is_err());
        let e = read_pgm("/nonexistent/dir/file.pgm").unwrap_err();
        assert!(e.to_string().contains("/nonexistent/dir/file.pgm"));
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = vec![true, false, false, true, true, false];
        write_mask(dir.path().join("m.pgm"), 3, 2, &m).unwrap();
        assert_eq!(read_mask(dir.path().join("m.pgm")).unwrap(), (3, 2, m));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(w in 1usize..9, h in 1usize..9, maxval in 1u16..=65535, seed in any::<u64>()) {
            let mut rng = substream(seed, "p");
            let img = RawImage::new(w, h, maxval, (0..w * h).map(|_| rng.gen_range(0..=maxval)).collect()).unwrap();
            let bytes = encode_pgm(&img);
            prop_assert_eq!(decode_pgm(&bytes, Path::new("p")).unwrap(), img.clone());
            prop_assert_eq!(encode_pgm(&decode_pgm(&bytes, Path::new("p")).unwrap()), bytes);
        }
    }
}
