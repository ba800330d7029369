//! Minimal NPY (v1.0) array interchange: enough to persist impression
//! tensors and raw anomaly maps, and to ingest backbone weights exported
//! from other toolchains. Little-endian f8/f4 only, C order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

pub fn write_npy(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let shape = array
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape_str = if array.ndim() == 1 {
        format!("({shape},)")
    } else {
        format!("({shape})")
    };
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}"
    );
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(unpadded + pad + array.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[0x01, 0x00]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let std_layout = array.as_standard_layout();
    for v in std_layout.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<ArrayD<f64>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    parse_npy(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_npy(bytes: &[u8]) -> std::result::Result<ArrayD<f64>, String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("not an npy file".into());
    }
    let (major, _minor) = (bytes[6], bytes[7]);
    let (header, data_start) = match major {
        1 => {
            let len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            (&bytes[10..10 + len], 10 + len)
        }
        2 | 3 => {
            let len =
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            (&bytes[12..12 + len], 12 + len)
        }
        v => return Err(format!("unsupported npy version {v}")),
    };
    let header = std::str::from_utf8(header).map_err(|e| e.to_string())?;

    let descr = extract_field(header, "descr").ok_or("missing descr")?;
    let fortran = extract_field(header, "fortran_order").ok_or("missing fortran_order")?;
    if fortran.trim() != "False" {
        return Err("fortran_order arrays are not supported".into());
    }
    let shape_text = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or("missing shape")?;
    let shape: Vec<usize> = shape_text
        .split(',')
        .filter_map(|t| {
            let t = t.trim();
            if t.is_empty() {
                None
            } else {
                Some(t.parse::<usize>())
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad shape: {e}"))?;
    let count: usize = shape.iter().product::<usize>().max(1);
    let count = if shape.is_empty() { 1 } else { count };

    let data = &bytes[data_start..];
    let values: Vec<f64> = match descr.trim_matches(['\'', ' ']) {
        "<f8" => {
            if data.len() < count * 8 {
                return Err("truncated f8 payload".into());
            }
            data[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        "<f4" => {
            if data.len() < count * 4 {
                return Err("truncated f4 payload".into());
            }
            data[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        other => return Err(format!("unsupported dtype {other}")),
    };
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| e.to_string())
}

fn extract_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    header
        .split(&format!("'{key}':"))
        .nth(1)
        .map(|s| s.split(',').next().unwrap_or("").trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_shape_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 4, 5]), |ix| {
            (ix[0] as f64 * 0.1 - ix[1] as f64 * 0.3) * (ix[2] as f64 + 0.7)
        });
        write_npy(&path, &a).unwrap();
        let b = read_npy(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reads_f32_payloads() {
        // hand-built v1.0 header with <f4 payload
        let mut header =
            "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }".to_string();
        let pad = (64 - (6 + 4 + header.len() + 1) % 64) % 64;
        header.push_str(&" ".repeat(pad));
        header.push('\n');
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.25f32).to_le_bytes());
        let arr = parse_npy(&bytes).unwrap();
        assert_eq!(arr.shape(), &[2]);
        assert_eq!(arr[[0]], 1.5);
        assert_eq!(arr[[1]], -2.25);
    }
}
