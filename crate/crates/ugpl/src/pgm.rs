//! Binary PGM (P5) images, the on-disk format for datasets, uncertainty-map
//! dumps and extracted patches. 8-bit grayscale, values scaled to [0,1].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::DataError;
use crate::tensor::Tensor;

/// Write a [h, w] or [h, w, 1] tensor of values in [0,1] as an 8-bit PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let shape = image.shape();
    let (h, w) = match shape {
        [h, w] => (*h, *w),
        [h, w, 1] => (*h, *w),
        _ => {
            return Err(DataError::BadPgm {
                path: path.display().to_string(),
                reason: format!("cannot write shape {shape:?} as PGM"),
            })
        }
    };
    let file = fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    let io_err = |e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    write!(out, "P5\n{w} {h}\n255\n").map_err(io_err)?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Read an 8-bit binary PGM into a [h, w] tensor scaled to [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |reason: &str| DataError::BadPgm {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::BadPgm {
                path: String::new(),
                reason: "unexpected end of header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes).map_err(|_| bad("missing magic"))?;
    if magic != "P5" {
        return Err(bad(&format!("magic {magic:?}, expected P5")));
    }
    let w: usize = token(&bytes)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let h: usize = token(&bytes)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    let maxval: usize = token(&bytes)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, expected 255")));
    }
    // single whitespace byte after maxval
    pos += 1;
    if bytes.len() < pos + h * w {
        return Err(bad("truncated pixel data"));
    }
    let data: Vec<f64> = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Tensor::new(vec![h, w], data).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let dir = std::env::temp_dir().join("ugpl_pgm_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.pgm");
        let img = Tensor::new(
            vec![5, 7],
            (0..35).map(|i| i as f64 / 34.0).collect(),
        )
        .unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[5, 7]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_non_pgm() {
        let dir = std::env::temp_dir().join("ugpl_pgm_test2");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pgm");
        fs::write(&path, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(read_pgm(&path), Err(DataError::BadPgm { .. })));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = std::env::temp_dir().join("ugpl_pgm_test3");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.pgm");
        fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x00\xff").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.shape(), &[1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0]);
        fs::remove_dir_all(&dir).ok();
    }
}
