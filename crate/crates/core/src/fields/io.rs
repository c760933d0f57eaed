//! `.grd` container and the plain-text dataset manifest.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! 0..4   magic "GRD1"
//! 4      version (1)
//! 5      channel count
//! 6..8   reserved, zero
//! per channel, in canonical order:
//!        u16 variable id, u32 ny, u32 nx, f64 spacing in metres,
//!        ny·nx f64 values (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{FieldError, FieldStack, GridField, VariableId};

pub const GRD_MAGIC: [u8; 4] = *b"GRD1";
pub const GRD_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn encode_grid(stack: &FieldStack) -> Vec<u8> {
    let cells = stack.ny() * stack.nx();
    let mut out = Vec::with_capacity(8 + stack.len() * (18 + 8 * cells));
    out.extend_from_slice(&GRD_MAGIC);
    out.push(GRD_VERSION);
    out.push(stack.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for f in stack.fields() {
        out.extend_from_slice(&(f.var().index() as u16).to_le_bytes());
        out.extend_from_slice(&(f.ny() as u32).to_le_bytes());
        out.extend_from_slice(&(f.nx() as u32).to_le_bytes());
        out.extend_from_slice(&f.spacing_m().to_le_bytes());
        for v in f.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FieldError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len(),
            }),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FieldError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_grid(bytes: &[u8]) -> Result<FieldStack, FieldError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != GRD_MAGIC {
        return Err(FieldError::BadMagic {
            expected: GRD_MAGIC,
            found: magic,
        });
    }
    let [version, channels, _, _] = r.array::<4>()?;
    if version != GRD_VERSION {
        return Err(FieldError::VersionMismatch {
            expected: GRD_VERSION,
            found: version,
        });
    }
    let mut fields = Vec::with_capacity(channels as usize);
    for _ in 0..channels {
        let id = u16::from_le_bytes(r.array()?);
        let ny = u32::from_le_bytes(r.array()?) as u64;
        let nx = u32::from_le_bytes(r.array()?) as u64;
        let spacing = f64::from_le_bytes(r.array()?);
        let var = VariableId::from_index(id as usize)
            .ok_or_else(|| FieldError::UnknownVariable(format!("id {id}")))?;
        let nbytes = ny
            .checked_mul(nx)
            .and_then(|c| c.checked_mul(8))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or(FieldError::DimensionOverflow { ny, nx })?;
        let raw = r.take(nbytes)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        fields.push(GridField::new(var, ny as usize, nx as usize, spacing, values)?);
    }
    if r.pos != bytes.len() {
        return Err(FieldError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    FieldStack::new(fields)
}

pub fn save_grid(path: &Path, stack: &FieldStack) -> Result<(), FieldError> {
    fs::write(path, encode_grid(stack))?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<FieldStack, FieldError> {
    decode_grid(&fs::read(path)?)
}

/// Ordered `key=value` sidecar.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, FieldError> {
        let mut m = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FieldError::Malformed(format!("manifest line {}: {line}", n + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

pub fn sample_file_name(i: usize) -> String {
    format!("sample_{i:04}.grd")
}

/// Sorted `.grd` files of a dataset directory.
pub fn list_samples(dir: &Path) -> Result<Vec<PathBuf>, FieldError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "grd"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<FieldStack>, FieldError> {
    let files = list_samples(dir)?;
    if files.is_empty() {
        return Err(FieldError::Malformed(format!(
            "no .grd samples in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| load_grid(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{synth_stack, SynthProfile};

    fn stack() -> FieldStack {
        synth_stack(8, 12, 3, &SynthProfile::default_profile()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = stack();
        let bytes = encode_grid(&s);
        assert_eq!(&bytes[..4], b"GRD1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 19);
        let back = decode_grid(&bytes).unwrap();
        assert_eq!(encode_grid(&back), bytes);
        for (a, b) in s.fields().iter().zip(back.fields()) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_grid(&stack());
        bytes[0] = b'X';
        assert!(matches!(decode_grid(&bytes), Err(FieldError::BadMagic { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_grid(&stack());
        bytes[4] = 2;
        assert!(matches!(
            decode_grid(&bytes),
            Err(FieldError::VersionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn declared_size_beyond_payload_is_truncation() {
        let mut bytes = encode_grid(&stack());
        bytes.truncate(8 + 18 + 8 * 10);
        assert!(matches!(decode_grid(&bytes), Err(FieldError::Truncated { .. })));
    }

    #[test]
    fn huge_dimensions_overflow() {
        let mut bytes = encode_grid(&stack());
        bytes[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_grid(&bytes),
            Err(FieldError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn manifest_parses_its_rendering() {
        let mut m = Manifest::default();
        m.set("seed", 7);
        m.set("profile", "default");
        let back = Manifest::parse(&m.render()).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("no equals sign").is_err());
    }
}
