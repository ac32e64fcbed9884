//! File helpers shared by every writer: atomic replace, binary PGM, raw f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes to `<path>.tmp` and renames over `path`, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = Path::new(&tmp_name);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = read_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Encodes an 8-bit binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes a binary P5 PGM with maxval 255. Header comments are allowed.
pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::parse(path, 1, msg.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in PGM header"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h;
    if w == 0 || h == 0 || bytes.len() < pos + need {
        return Err(bad("PGM raster shorter than header dimensions"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// `round(255 * v)` for `v` in [0, 1].
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_f64_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64_le(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(path, 1, "raw f64 file length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let enc = encode_pgm(4, 3, &px);
        let (w, h, back) = decode_pgm(Path::new("x.pgm"), &enc).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, px);

        let mut commented = b"P5\n# made by hand\n4 3\n255\n".to_vec();
        commented.extend_from_slice(&px);
        assert_eq!(decode_pgm(Path::new("x.pgm"), &commented).unwrap().2, px);
    }

    #[test]
    fn pgm_rejects_ascii_and_truncation() {
        assert!(decode_pgm(Path::new("a"), b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(Path::new("a"), b"P5\n4 4\n255\n\x00\x01").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"hello");
        assert!(!dir.path().join("sub/out.txt.tmp").exists());
    }
}
