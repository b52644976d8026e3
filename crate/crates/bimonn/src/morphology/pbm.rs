//! Binary PBM (magic `P4`) import/export.
//!
//! The raw variant of the Netpbm bitmap format: ASCII header, then rows of
//! pixels packed 8 per byte, most significant bit first, each row padded to a
//! whole byte. A 1 bit means black; we map it to a set pixel.

use std::io::{Read, Write};

use super::{BitImage, MorphologyError};

pub fn write_pbm<W: Write>(img: &BitImage, mut out: W) -> Result<(), MorphologyError> {
    write!(out, "P4\n{} {}\n", img.width(), img.height())?;
    let bytes_per_row = img.width().div_ceil(8);
    let mut row = vec![0u8; bytes_per_row];
    for r in 0..img.height() {
        row.iter_mut().for_each(|b| *b = 0);
        for c in 0..img.width() {
            if img.get(r, c) {
                row[c / 8] |= 0x80 >> (c % 8);
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}

pub fn read_pbm<R: Read>(mut input: R) -> Result<BitImage, MorphologyError> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut pos = 0usize;

    let magic = take_token(&data, &mut pos).ok_or_else(|| bad("missing magic"))?;
    if magic != b"P4" {
        return Err(bad(&format!("expected magic P4, got {:?}", String::from_utf8_lossy(&magic))));
    }
    let width = parse_dim(&data, &mut pos, "width")?;
    let height = parse_dim(&data, &mut pos, "height")?;
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(bad("missing separator before raster"));
    }
    pos += 1;

    let bytes_per_row = width.div_ceil(8);
    let need = bytes_per_row * height;
    if data.len() - pos < need {
        return Err(bad(&format!("raster truncated: need {need} bytes, have {}", data.len() - pos)));
    }
    let raster = &data[pos..pos + need];
    Ok(BitImage::from_fn(width, height, |r, c| {
        raster[r * bytes_per_row + c / 8] & (0x80 >> (c % 8)) != 0
    }))
}

fn bad(msg: &str) -> MorphologyError {
    MorphologyError::Pbm(msg.to_string())
}

/// Next whitespace-delimited token, skipping `#` comments.
fn take_token(data: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| data[start..*pos].to_vec())
}

fn parse_dim(data: &[u8], pos: &mut usize, what: &str) -> Result<usize, MorphologyError> {
    let tok = take_token(data, pos).ok_or_else(|| bad(&format!("missing {what}")))?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| bad(&format!("invalid {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn golden_bytes_for_tiny_image() {
        // 2x2 with only the top-left pixel set: header then one byte per row.
        let mut img = BitImage::new(2, 2);
        img.set(0, 0, true);
        let mut buf = Vec::new();
        write_pbm(&img, &mut buf).unwrap();
        assert_eq!(buf, b"P4\n2 2\n\x80\x00");
    }

    #[test]
    fn round_trip_random_odd_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(w, h) in &[(1usize, 1usize), (7, 3), (8, 2), (9, 4), (70, 70)] {
            let img = BitImage::from_fn(w, h, |_, _| rng.gen_bool(0.5));
            let mut buf = Vec::new();
            write_pbm(&img, &mut buf).unwrap();
            let back = read_pbm(buf.as_slice()).unwrap();
            assert_eq!(back, img, "{w}x{h}");
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_pbm(&b"P1\n2 2\n0 1 1 0"[..]).is_err());
        assert!(read_pbm(&b"P4\n4 4\n\xff"[..]).is_err());
        assert!(read_pbm(&b""[..]).is_err());
    }

    #[test]
    fn accepts_comments_in_header() {
        let img = read_pbm(&b"P4\n# comment line\n2 1\n\x40"[..]).unwrap();
        assert!(!img.get(0, 0));
        assert!(img.get(0, 1));
    }
}
