//! Binary container framing shared by model, codebook, and extractor files:
//! 4-byte magic, little-endian u16 format version, u32 header length, JSON
//! header, then little-endian f32 payload in header-declared order.
//! Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;

pub fn write_container<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    arrays: &[&[f32]],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::format(format!("header serialization: {e}")))?;
    let mut buf = Vec::with_capacity(
        14 + header_bytes.len() + arrays.iter().map(|a| a.len() * 4).sum::<usize>(),
    );
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for arr in arrays {
        for v in *arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a container; returns the parsed header and the flat payload. The
/// caller splits the payload per its header's declared shapes.
pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let loc = || path.display().to_string();
    if bytes.len() < 10 {
        return Err(Error::format_in(loc(), "file too short for container frame"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format_in(
            loc(),
            format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::format_in(
            loc(),
            format!("unsupported format version {version}"),
        ));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + header_len {
        return Err(Error::format_in(loc(), "truncated header"));
    }
    let header: H = serde_json::from_slice(&bytes[10..10 + header_len])
        .map_err(|e| Error::format_in(loc(), format!("header parse: {e}")))?;
    let payload_bytes = &bytes[10 + header_len..];
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::format_in(loc(), "payload not a multiple of 4 bytes"));
    }
    let payload = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

/// Split a flat payload into arrays of the given lengths, erroring if the
/// total does not match exactly.
pub fn split_payload(payload: Vec<f32>, lens: &[usize], what: &str) -> Result<Vec<Vec<f32>>> {
    let total: usize = lens.iter().sum();
    if payload.len() != total {
        return Err(Error::format(format!(
            "{what}: payload has {} floats, header declares {total}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(lens.len());
    let mut offset = 0;
    for &len in lens {
        out.push(payload[offset..offset + len].to_vec());
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct TestHeader {
        name: String,
        lens: Vec<usize>,
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let header = TestHeader {
            name: "x".into(),
            lens: vec![3, 2],
        };
        // Values chosen to stress float round-tripping (subnormal, -0.0).
        let a = [1.0f32, -0.0, f32::MIN_POSITIVE / 2.0];
        let b = [std::f32::consts::PI, -1e-38];
        write_container(&path, b"TSTC", &header, &[&a, &b]).unwrap();
        let (h, payload): (TestHeader, Vec<f32>) = read_container(&path, b"TSTC").unwrap();
        assert_eq!(h, header);
        let arrays = split_payload(payload, &h.lens, "test").unwrap();
        assert_eq!(arrays[0].len(), 3);
        for (x, y) in arrays[0].iter().zip(&a) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in arrays[1].iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let header = TestHeader {
            name: "x".into(),
            lens: vec![],
        };
        write_container(&path, b"AAAA", &header, &[]).unwrap();
        let err = read_container::<TestHeader>(&path, b"BBBB").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = split_payload(vec![0.0; 5], &[3, 3], "test").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
