use super::{CsiSample, PreprocessError, MAX_LEN, MIN_LEN, N_SUBCARRIERS, TARGET_RATE_HZ};

/// Labels attached to a recording before it becomes a [`CsiSample`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleMeta {
    pub activity: u8,
    pub domain: u16,
    pub sample_id: String,
}

/// Keeps every `floor(rate_hz / 100)`-th packet starting at index 0.
pub fn subsample<P: Clone>(packets: &[P], rate_hz: u32) -> Result<Vec<P>, PreprocessError> {
    if rate_hz < TARGET_RATE_HZ {
        return Err(PreprocessError::InvalidRate(rate_hz));
    }
    let stride = (rate_hz / TARGET_RATE_HZ) as usize;
    Ok(packets.iter().step_by(stride).cloned().collect())
}

/// Sub-samples a packet stream to 100 Hz, rejects out-of-range durations,
/// min-max normalizes the real entries and zero-pads to [`MAX_LEN`].
pub fn preprocess_stream(raw: &[Vec<f32>], rate_hz: u32, meta: SampleMeta) -> Result<CsiSample, PreprocessError> {
    if let Some((index, p)) = raw.iter().enumerate().find(|(_, p)| p.len() != N_SUBCARRIERS) {
        return Err(PreprocessError::PacketWidth { index, width: p.len() });
    }
    let kept = subsample(raw, rate_hz)?;
    let len = kept.len();
    if len < MIN_LEN {
        return Err(PreprocessError::RejectTooShort { len });
    }
    if len > MAX_LEN {
        return Err(PreprocessError::RejectTooLong { len });
    }

    let mut amplitudes = vec![0.0f32; N_SUBCARRIERS * MAX_LEN];
    for (t, packet) in kept.iter().enumerate() {
        for (f, &v) in packet.iter().enumerate() {
            amplitudes[f * MAX_LEN + t] = v;
        }
    }
    let degenerate = !normalize_padded(&mut amplitudes, len);
    let sample = CsiSample {
        amplitudes,
        activity: meta.activity,
        domain: meta.domain,
        valid_length: len as u16,
        sample_id: meta.sample_id,
    };
    if degenerate {
        return Err(PreprocessError::DegenerateRange {
            sample: Box::new(sample),
        });
    }
    Ok(sample)
}

/// Min-max normalizes the first `valid_length` columns of a subcarrier-major
/// `N_SUBCARRIERS × MAX_LEN` buffer in place and zeroes the rest. Returns
/// `false` for a constant sample, whose entries all become zero.
pub fn normalize_padded(amplitudes: &mut [f32], valid_length: usize) -> bool {
    debug_assert_eq!(amplitudes.len(), N_SUBCARRIERS * MAX_LEN);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for row in amplitudes.chunks(MAX_LEN) {
        for &v in &row[..valid_length] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    let ok = range > 0.0 && range.is_finite();
    for row in amplitudes.chunks_mut(MAX_LEN) {
        let (real, pad) = row.split_at_mut(valid_length);
        for v in real {
            *v = if ok { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
        pad.fill(0.0);
    }
    ok
}
