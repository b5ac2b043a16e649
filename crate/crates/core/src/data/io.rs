//! Little-endian dataset interchange format.
//!
//! ```text
//! header : "CSID" | version u16 = 1 | sample_count u32 | F u16 | T u16
//! sample : activity u8 | domain u16 | valid_length u16
//!          | id_len u16 | id bytes (UTF-8) | F*T f32, subcarrier-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CsiSample, MAX_LEN, N_SUBCARRIERS};
use crate::error::{DattaError, Result};

pub const FORMAT_MAGIC: &[u8; 4] = b"CSID";
pub const FORMAT_VERSION: u16 = 1;

pub fn write_dataset(samples: &[CsiSample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(samples, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(samples: &[CsiSample], w: &mut impl Write) -> Result<()> {
    let count = u32::try_from(samples.len()).map_err(|_| DattaError::Format("too many samples".into()))?;
    w.write_all(FORMAT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&(N_SUBCARRIERS as u16).to_le_bytes())?;
    w.write_all(&(MAX_LEN as u16).to_le_bytes())?;
    for s in samples {
        if s.amplitudes.len() != N_SUBCARRIERS * MAX_LEN {
            return Err(DattaError::Format(format!("sample `{}` has the wrong size", s.sample_id)));
        }
        let id = s.sample_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| DattaError::Format("sample id too long".into()))?;
        w.write_all(&[s.activity])?;
        w.write_all(&s.domain.to_le_bytes())?;
        w.write_all(&s.valid_length.to_le_bytes())?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        let mut buf = Vec::with_capacity(s.amplitudes.len() * 4);
        for v in &s.amplitudes {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<CsiSample>> {
    read_dataset_from(&mut BufReader::new(File::open(path)?))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DattaError::Format(format!("truncated while reading {what}")),
        _ => DattaError::Io(e),
    })
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Vec<CsiSample>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != FORMAT_MAGIC {
        return Err(DattaError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u16(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(DattaError::Format(format!("unsupported version {version}")));
    }
    let mut count = [0u8; 4];
    read_exact(r, &mut count, "sample count")?;
    let count = u32::from_le_bytes(count) as usize;
    let f = read_u16(r, "subcarrier count")? as usize;
    let t = read_u16(r, "time steps")? as usize;
    if f != N_SUBCARRIERS || t != MAX_LEN {
        return Err(DattaError::Format(format!(
            "dimensions {f}x{t}, expected {N_SUBCARRIERS}x{MAX_LEN}"
        )));
    }

    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; f * t * 4];
    for i in 0..count {
        let mut activity = [0u8; 1];
        read_exact(r, &mut activity, "activity")?;
        let domain = read_u16(r, "domain")?;
        let valid_length = read_u16(r, "valid length")?;
        let id_len = read_u16(r, "id length")? as usize;
        let mut id = vec![0u8; id_len];
        read_exact(r, &mut id, "sample id")?;
        let sample_id = String::from_utf8(id).map_err(|_| DattaError::Format(format!("sample {i}: id is not UTF-8")))?;
        read_exact(r, &mut buf, "amplitudes")?;
        let amplitudes = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        samples.push(CsiSample {
            amplitudes,
            activity: activity[0],
            domain,
            valid_length,
            sample_id,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_sample() -> impl Strategy<Value = CsiSample> {
        (
            any::<u8>(),
            any::<u16>(),
            120u16..=220,
            "[a-z0-9_-]{0,12}",
            prop::collection::vec(0.0f32..=1.0, N_SUBCARRIERS * MAX_LEN),
        )
            .prop_map(|(activity, domain, valid_length, sample_id, amplitudes)| CsiSample {
                amplitudes,
                activity,
                domain,
                valid_length,
                sample_id,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_lossless(samples in prop::collection::vec(arb_sample(), 0..4)) {
            let mut bytes = Vec::new();
            write_dataset_to(&samples, &mut bytes).unwrap();
            let back = read_dataset_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, samples);
        }
    }

    fn encoded(n: usize) -> Vec<u8> {
        let samples: Vec<CsiSample> = (0..n)
            .map(|i| CsiSample {
                amplitudes: vec![0.25; N_SUBCARRIERS * MAX_LEN],
                activity: 1,
                domain: i as u16,
                valid_length: 200,
                sample_id: format!("x{i}"),
            })
            .collect();
        let mut bytes = Vec::new();
        write_dataset_to(&samples, &mut bytes).unwrap();
        bytes
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encoded(1);
        assert_eq!(&bytes[0..4], b"CSID");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[10..12], &30u16.to_le_bytes());
        assert_eq!(&bytes[12..14], &220u16.to_le_bytes());
        // activity, domain, valid length, id length, 2 id bytes, F*T floats
        assert_eq!(bytes.len(), 14 + 1 + 2 + 2 + 2 + 2 + 30 * 220 * 4);
    }

    #[test]
    fn truncated_input_is_a_format_error() {
        let bytes = encoded(2);
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(read_dataset_from(&mut &cut[..]), Err(DattaError::Format(_))));
    }

    #[test]
    fn wrong_subcarrier_count_is_a_format_error() {
        let mut bytes = encoded(1);
        bytes[10..12].copy_from_slice(&31u16.to_le_bytes());
        assert!(matches!(read_dataset_from(&mut bytes.as_slice()), Err(DattaError::Format(_))));
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = encoded(1);
        bytes[0] = b'X';
        assert!(matches!(read_dataset_from(&mut bytes.as_slice()), Err(DattaError::Format(_))));
        let mut bytes = encoded(1);
        bytes[4] = 2;
        assert!(matches!(read_dataset_from(&mut bytes.as_slice()), Err(DattaError::Format(_))));
    }
}
