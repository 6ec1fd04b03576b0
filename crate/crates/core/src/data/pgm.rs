//! Binary (P5) PGM, maxval 255, header `P5\n<w> <h>\n255\n`, no comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn encode_pgm(image: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.cols(), image.rows()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what.to_string(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn whitespace(&mut self) -> Result<()> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                what: self.what.to_string(),
                offset: start,
                detail: "integer overflow".into(),
            })
    }
}

/// Parses a P5 image; `what` labels errors (usually the path).
pub fn decode_pgm(bytes: &[u8], what: &str) -> Result<Grid<u8>> {
    let mut cur = Cursor { bytes, pos: 0, what };
    if !bytes.starts_with(b"P5") {
        return Err(cur.err("missing P5 magic"));
    }
    cur.pos = 2;
    cur.whitespace()?;
    let width = cur.number()?;
    cur.whitespace()?;
    let height = cur.number()?;
    cur.whitespace()?;
    let max_at = cur.pos;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: max_at,
            detail: format!("maxval {maxval}, only 255 is supported"),
        });
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace before payload"));
    }
    cur.pos += 1;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image extent"));
    }
    let need = width * height;
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: bytes.len(),
            detail: format!("payload truncated: {have} of {need} bytes"),
        });
    }
    if have > need {
        return Err(Error::Parse {
            what: what.to_string(),
            offset: cur.pos + need,
            detail: format!("{} trailing bytes after payload", have - need),
        });
    }
    Ok(Grid::new(height, width, bytes[cur.pos..].to_vec()))
}

pub fn write_pgm(image: &Grid<u8>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}
