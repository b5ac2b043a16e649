//! CSI amplitude spectrograms: preprocessing, splits, synthesis and the
//! binary interchange format.

mod io;
mod preprocess;
mod splits;
mod synth;

use thiserror::Error;

use crate::error::{DattaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, FORMAT_MAGIC, FORMAT_VERSION};
pub use preprocess::{normalize_padded, preprocess_stream, subsample, SampleMeta};
pub use splits::{build_splits, DatasetSplit, DomainAssignment, SplitName, WIDAR_G6D_SPLIT_SIZES};
pub use synth::{
    synthesize_domain, synthesize_raw, ActivityGenerator, PatternGenerator, RawStream, SyntheticDomainSpec,
};

/// Subcarriers of the first receive antenna.
pub const N_SUBCARRIERS: usize = 30;
/// Padded length of every spectrogram, in time steps.
pub const MAX_LEN: usize = 220;
/// Shortest accepted recording after sub-sampling.
pub const MIN_LEN: usize = 120;
pub const TARGET_RATE_HZ: u32 = 100;
pub const N_ACTIVITIES: usize = 6;

/// One amplitude spectrogram with its labels.
///
/// `amplitudes` is subcarrier-major: entry `(f, t)` lives at
/// `f * MAX_LEN + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub amplitudes: Vec<f32>,
    pub activity: u8,
    pub domain: u16,
    pub valid_length: u16,
    pub sample_id: String,
}

impl CsiSample {
    #[inline]
    pub fn at(&self, subcarrier: usize, t: usize) -> f32 {
        self.amplitudes[subcarrier * MAX_LEN + t]
    }

    pub fn valid_len(&self) -> usize {
        self.valid_length as usize
    }

    /// `N_SUBCARRIERS × MAX_LEN` tensor of the amplitudes.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.amplitudes.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec(N_SUBCARRIERS, MAX_LEN, data).expect("sample has F x T entries")
    }

    /// Checks the range, padding and length invariants.
    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != N_SUBCARRIERS * MAX_LEN {
            return Err(DattaError::Shape(format!(
                "sample `{}` has {} amplitudes",
                self.sample_id,
                self.amplitudes.len()
            )));
        }
        let len = self.valid_len();
        if !(MIN_LEN..=MAX_LEN).contains(&len) {
            return Err(DattaError::Shape(format!(
                "sample `{}` has valid length {len}",
                self.sample_id
            )));
        }
        for f in 0..N_SUBCARRIERS {
            for t in 0..MAX_LEN {
                let v = self.at(f, t);
                if !(0.0..=1.0).contains(&v) || (t >= len && v != 0.0) {
                    return Err(DattaError::Shape(format!(
                        "sample `{}` entry ({f}, {t}) = {v} violates range or padding",
                        self.sample_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reasons a recording is not turned into a sample.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("recording too short: {len} time steps after sub-sampling")]
    RejectTooShort { len: usize },

    #[error("recording too long: {len} time steps after sub-sampling")]
    RejectTooLong { len: usize },

    /// All amplitudes are equal. The sample is still produced with every
    /// entry set to zero.
    #[error("constant amplitudes in sample `{}`", sample.sample_id)]
    DegenerateRange { sample: Box<CsiSample> },

    #[error("packet rate {0} Hz is below 100 Hz")]
    InvalidRate(u32),

    #[error("packet {index} has {width} subcarriers")]
    PacketWidth { index: usize, width: usize },
}
