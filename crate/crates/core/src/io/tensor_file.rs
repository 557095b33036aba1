//! Single-file tensor container: a text header followed by a binary payload.
//!
//! ```text
//! SLRK-TENSORS 1
//! kind <kind>
//! meta <key> <value...>
//! tensor <name> f32 <rows>x<cols> <offset> <length>
//! end
//! ```
//!
//! The header is zero-padded to a 64-byte boundary. Offsets count from the
//! start of the payload, are multiples of 64 and address little-endian
//! `f32` data in row-major order.

use crate::error::{Result, SlimError};
use crate::linalg::Matrix;

pub const MAGIC: &str = "SLRK-TENSORS";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    /// Ordered; keys may repeat.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl TensorFile {
    pub fn new(kind: impl Into<String>) -> Self {
        TensorFile {
            kind: kind.into(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    /// Stores a vector as a single-row tensor.
    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push_tensor(name, Matrix::new(1, v.len(), v.to_vec()).expect("nonempty vector"));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_values<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.meta.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta_value(key)
            .ok_or_else(|| SlimError::corrupt(format!("missing meta key {key:?}")))
    }

    pub fn parse_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require_meta(key)?;
        v.parse()
            .map_err(|_| SlimError::corrupt(format!("meta {key:?} has unparsable value {v:?}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensor(name)
            .ok_or_else(|| SlimError::corrupt(format!("missing tensor {name:?}")))
    }

    pub fn require_vector(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.require_tensor(name)?;
        if m.rows() != 1 {
            return Err(SlimError::corrupt(format!("tensor {name:?} is not a vector")));
        }
        Ok(m.data().to_vec())
    }

    fn layout(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(_, m)| {
                let len = 4 * m.rows() * m.cols();
                let at = offset;
                offset = align_up(at + len);
                (at, len)
            })
            .collect()
    }

    fn header_text(&self, layout: &[(usize, usize)]) -> String {
        let mut h = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            h.push_str(&format!("meta {k} {v}\n"));
        }
        for ((name, m), (off, len)) in self.tensors.iter().zip(layout) {
            h.push_str(&format!("tensor {name} f32 {}x{} {off} {len}\n", m.rows(), m.cols()));
        }
        h.push_str("end\n");
        h
    }

    /// The payload alone: every tensor as `f32`, each starting on a 64-byte
    /// boundary.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let layout = self.layout();
        let size = layout.last().map_or(0, |(o, l)| o + l);
        let mut out = vec![0u8; size];
        for ((_, m), (off, _)) in self.tensors.iter().zip(&layout) {
            for (i, v) in m.data().iter().enumerate() {
                let at = off + 4 * i;
                out[at..at + 4].copy_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !valid_token(&self.kind) {
            return Err(SlimError::input(format!("invalid kind {:?}", self.kind)));
        }
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(SlimError::input(format!("invalid meta entry {k:?}")));
            }
        }
        for (name, m) in &self.tensors {
            if !valid_token(name) {
                return Err(SlimError::input(format!("invalid tensor name {name:?}")));
            }
            if !m.is_all_finite() {
                return Err(SlimError::NonFinite("tensor written to file"));
            }
        }
        let layout = self.layout();
        let header = self.header_text(&layout);
        let mut out = header.into_bytes();
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&self.payload_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(SlimError::corrupt("empty file"));
        }
        let end = find_header_end(bytes)?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| SlimError::corrupt("header is not UTF-8"))?;
        let payload_start = align_up(end);
        if bytes.len() < payload_start {
            return Err(SlimError::Truncated {
                needed: payload_start,
                found: bytes.len(),
            });
        }
        if bytes[end..payload_start].iter().any(|&b| b != 0) {
            return Err(SlimError::corrupt("nonzero header padding"));
        }
        let payload = &bytes[payload_start..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        let mut parts = first.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(SlimError::corrupt("bad magic"));
        }
        let version = parts.next().unwrap_or_default();
        if version.parse::<u32>().ok() != Some(FORMAT_VERSION) || parts.next().is_some() {
            return Err(SlimError::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION,
            });
        }
        let kind = lines
            .next()
            .and_then(|l| l.strip_prefix("kind "))
            .filter(|k| valid_token(k))
            .ok_or_else(|| SlimError::corrupt("missing kind line"))?
            .to_string();

        let mut meta = Vec::new();
        let mut entries: Vec<(String, usize, usize, usize, usize)> = Vec::new();
        let mut saw_end = false;
        for line in lines {
            if saw_end {
                return Err(SlimError::corrupt("content after end marker"));
            }
            if line == "end" {
                saw_end = true;
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if !valid_token(k) {
                    return Err(SlimError::corrupt(format!("bad meta line {line:?}")));
                }
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                entries.push(parse_tensor_line(rest)?);
            } else {
                return Err(SlimError::corrupt(format!("unrecognized header line {line:?}")));
            }
        }
        if !saw_end {
            return Err(SlimError::corrupt("missing end marker"));
        }

        // validate the directory before touching the payload
        let mut needed = 0usize;
        let mut prev_end = 0usize;
        for (name, rows, cols, off, len) in &entries {
            if *len != 4 * rows * cols {
                return Err(SlimError::corrupt(format!(
                    "tensor {name}: length {len} does not match shape {rows}x{cols}"
                )));
            }
            if off % ALIGN != 0 {
                return Err(SlimError::corrupt(format!("tensor {name}: misaligned offset {off}")));
            }
            if *off < prev_end {
                return Err(SlimError::corrupt(format!("tensor {name}: overlapping offset {off}")));
            }
            prev_end = off + len;
            needed = needed.max(prev_end);
        }
        if payload.len() < needed {
            return Err(SlimError::Truncated {
                needed: payload_start + needed,
                found: bytes.len(),
            });
        }
        if payload.len() > align_up(needed) {
            return Err(SlimError::corrupt("trailing bytes after payload"));
        }

        let mut tensors = Vec::with_capacity(entries.len());
        for (name, rows, cols, off, len) in entries {
            let data: Vec<f64> = payload[off..off + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(SlimError::corrupt(format!("tensor {name} holds non-finite values")));
            }
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        Ok(TensorFile { kind, meta, tensors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| SlimError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SlimError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let marker = b"\nend\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| {
            if bytes.starts_with(MAGIC.as_bytes()) {
                SlimError::corrupt("header has no end marker")
            } else {
                SlimError::corrupt("bad magic")
            }
        })
}

fn parse_tensor_line(rest: &str) -> Result<(String, usize, usize, usize, usize)> {
    let bad = || SlimError::corrupt(format!("bad tensor line {rest:?}"));
    let f: Vec<&str> = rest.split(' ').collect();
    if f.len() != 5 || f[1] != "f32" || !valid_token(f[0]) {
        return Err(bad());
    }
    let (r, c) = f[2].split_once('x').ok_or_else(bad)?;
    let rows: usize = r.parse().map_err(|_| bad())?;
    let cols: usize = c.parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    let off: usize = f[3].parse().map_err(|_| bad())?;
    let len: usize = f[4].parse().map_err(|_| bad())?;
    Ok((f[0].to_string(), rows, cols, off, len))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new("test");
        f.push_meta("alpha", "1.5");
        f.push_meta("note", "two words");
        f.push_tensor("a", Matrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 * 0.25));
        f.push_vector("v", &[1.0, -2.0, 3.0]);
        f
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let g = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.meta_value("note"), Some("two words"));
        assert_eq!(g.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn offsets_are_aligned() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("tensor a f32 3x5 0 60\n"));
        assert!(text.contains("tensor v f32 1x3 64 12\n"));
        let header_len = text.find("end\n").unwrap() + 4;
        assert_eq!(bytes.len(), align_up(header_len) + 64 + 12);
    }

    #[test]
    fn tampered_length_is_corrupt_header() {
        let bytes = sample().to_bytes().unwrap();
        let text =
            String::from_utf8(bytes.clone()).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned());
        let pos = text.find("3x5 0 60").unwrap() + "3x5 0 6".len();
        let mut tampered = bytes.clone();
        tampered[pos] = b'4';
        assert!(matches!(
            TensorFile::from_bytes(&tampered),
            Err(SlimError::CorruptHeader(_))
        ));
    }

    #[test]
    fn version_and_truncation_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut v2 = bytes.clone();
        v2[MAGIC.len() + 1] = b'2';
        assert!(matches!(TensorFile::from_bytes(&v2), Err(SlimError::Version { .. })));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(TensorFile::from_bytes(cut), Err(SlimError::Truncated { .. })));
        assert!(matches!(TensorFile::from_bytes(&[]), Err(SlimError::CorruptHeader(_))));
        assert!(matches!(
            TensorFile::from_bytes(b"garbage"),
            Err(SlimError::CorruptHeader(_))
        ));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
