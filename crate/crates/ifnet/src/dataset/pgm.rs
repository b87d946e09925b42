//! Binary PGM (P5, maxval 255) read/write. The store keeps every patch
//! as one of these files, so they stay inspectable with stock viewers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::BadPgm {
            path: path.to_path_buf(),
            detail: format!("{}x{} needs {} bytes, got {}", width, height, width * height, data.len()),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", width, height).and_then(|_| w.write_all(data)).map_err(|e| {
        Error::io(format!("writing {}", path.display()), e)
    })
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|_| Error::MissingPatchFile(path.to_path_buf()))?;
    let bad = |detail: &str| Error::BadPgm { path: path.to_path_buf(), detail: detail.into() };

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // '#' comments allowed, then exactly one whitespace byte before data.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
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
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad(&format!("expected P5 magic, got {}", tokens[0])));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {}", maxval)));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(bad(&format!("expected {} data bytes, found {}", need, bytes.len().saturating_sub(pos))));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let data: Vec<u8> = (0..64u32 * 64).map(|i| (i % 251) as u8).collect();
        write_pgm(&path, 64, 64, &data).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (64, 64));
        assert_eq!(back, data);
    }

    #[test]
    fn missing_file_is_named() {
        let err = read_pgm(Path::new("/nonexistent/p.pgm")).unwrap_err();
        assert!(matches!(err, Error::MissingPatchFile(_)));
    }
}
