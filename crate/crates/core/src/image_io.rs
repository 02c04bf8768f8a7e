//! Binary netpbm reading and writing (P6 color images, P5 grayscale) and the
//! write-temp-then-rename helper used for every artifact the crate produces.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` atomically: the data goes to a temporary file in
/// the same directory, which is then renamed over the destination. Readers
/// never observe a truncated file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let stem = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.tmp", stem.to_string_lossy())),
        None => Path::new(&format!(".{}.tmp", stem.to_string_lossy())).to_path_buf(),
    };
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encode an RGB image as binary PPM (P6, maxval 255). Pixels are row-major
/// interleaved RGB.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size mismatch");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    atomic_write(path, &encode_ppm(width, height, rgb))
}

/// Encode a grayscale image as binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pixel buffer size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    atomic_write(path, &encode_pgm(width, height, gray))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub pixels: Vec<u8>,
}

/// Parse a binary PPM (P6, maxval 255) from bytes; `origin` names the file in
/// errors.
pub fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<PpmImage> {
    let bad = |msg: &str| Error::data(origin, msg);
    let mut pos = 0usize;

    // Header tokens are separated by whitespace; `#` starts a comment.
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if next_token(bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6) file"));
    }
    let width: usize = next_token(bytes)?
        .parse()
        .map_err(|_| bad("bad width"))?;
    let height: usize = next_token(bytes)?
        .parse()
        .map_err(|_| bad("bad height"))?;
    let maxval: usize = next_token(bytes)?
        .parse()
        .map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| bad("image dimensions overflow"))?;
    if pos > bytes.len() || bytes.len() - pos < need {
        return Err(bad(&format!(
            "truncated pixel data: expected {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    if bytes.len() - pos > need {
        return Err(bad("trailing bytes after pixel data"));
    }
    Ok(PpmImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}
