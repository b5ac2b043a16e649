use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CsiSample;
use crate::error::{DattaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    ValTta,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::Val, SplitName::ValTta, SplitName::Test];

    /// Train and Val form the source group; Val_TTA and Test the target group.
    pub fn is_source(self) -> bool {
        matches!(self, SplitName::Train | SplitName::Val)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "Train",
            SplitName::Val => "Val",
            SplitName::ValTta => "Val_TTA",
            SplitName::Test => "Test",
        })
    }
}

impl FromStr for SplitName {
    type Err = DattaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "val_tta" | "valtta" => Ok(SplitName::ValTta),
            "test" => Ok(SplitName::Test),
            other => Err(DattaError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Sample counts of the Widar3.0-G6D subsets (Train, Val, Val_TTA, Test).
pub const WIDAR_G6D_SPLIT_SIZES: [(SplitName, usize); 4] = [
    (SplitName::Train, 19_586),
    (SplitName::Val, 4_896),
    (SplitName::ValTta, 3_417),
    (SplitName::Test, 30_749),
];

/// Where the samples of one domain go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainAssignment {
    Single(SplitName),
    /// The domain's samples, ordered by `sample_id`, are divided: the last
    /// `round(n * secondary_fraction)` go to `secondary`, the rest to
    /// `primary`. This is how Train/Val and Val_TTA/Test share domains.
    Shared {
        primary: SplitName,
        secondary: SplitName,
        secondary_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<CsiSample>,
    pub domain_set: BTreeSet<u16>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, samples: Vec<CsiSample>) -> Self {
        let domain_set = samples.iter().map(|s| s.domain).collect();
        Self {
            name,
            samples,
            domain_set,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Partitions samples into the four splits. Sample order within a split
/// follows input order.
pub fn build_splits(
    samples: Vec<CsiSample>,
    assignment: &BTreeMap<u16, DomainAssignment>,
) -> Result<BTreeMap<SplitName, DatasetSplit>> {
    for (&domain, a) in assignment {
        if let DomainAssignment::Shared {
            primary,
            secondary,
            secondary_fraction,
        } = a
        {
            if primary.is_source() != secondary.is_source() {
                return Err(DattaError::DomainOverlap { domain });
            }
            if !(0.0..=1.0).contains(secondary_fraction) {
                return Err(DattaError::Config(format!(
                    "secondary fraction {secondary_fraction} for domain {domain} outside [0, 1]"
                )));
            }
        }
    }

    let mut per_domain: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !assignment.contains_key(&s.domain) {
            return Err(DattaError::UnassignedDomain { domain: s.domain });
        }
        per_domain.entry(s.domain).or_default().push(i);
    }

    let mut target = vec![SplitName::Train; samples.len()];
    for (domain, mut idx) in per_domain {
        match &assignment[&domain] {
            DomainAssignment::Single(name) => idx.iter().for_each(|&i| target[i] = *name),
            DomainAssignment::Shared {
                primary,
                secondary,
                secondary_fraction,
            } => {
                idx.sort_by(|&a, &b| samples[a].sample_id.cmp(&samples[b].sample_id).then(a.cmp(&b)));
                let n_secondary = (idx.len() as f64 * secondary_fraction).round() as usize;
                let cut = idx.len() - n_secondary;
                for (k, &i) in idx.iter().enumerate() {
                    target[i] = if k < cut { *primary } else { *secondary };
                }
            }
        }
    }

    let mut buckets: BTreeMap<SplitName, Vec<CsiSample>> = SplitName::ALL.iter().map(|&n| (n, Vec::new())).collect();
    for (s, name) in samples.into_iter().zip(target) {
        buckets.get_mut(&name).expect("all splits present").push(s);
    }
    Ok(buckets
        .into_iter()
        .map(|(name, samples)| (name, DatasetSplit::new(name, samples)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MAX_LEN, N_SUBCARRIERS};

    fn sample(id: usize, domain: u16) -> CsiSample {
        CsiSample {
            amplitudes: vec![0.0; N_SUBCARRIERS * MAX_LEN],
            activity: (id % 6) as u8,
            domain,
            valid_length: 150,
            sample_id: format!("s{id:03}"),
        }
    }

    #[test]
    fn empty_input_gives_four_empty_splits() {
        let splits = build_splits(Vec::new(), &BTreeMap::new()).unwrap();
        assert_eq!(splits.len(), 4);
        assert!(splits.values().all(DatasetSplit::is_empty));
    }

    #[test]
    fn single_assignments_count_correctly() {
        let samples: Vec<_> = (0..10).map(|i| sample(i, if i < 4 { 0 } else { 1 })).collect();
        let assignment = BTreeMap::from([
            (0, DomainAssignment::Single(SplitName::Train)),
            (1, DomainAssignment::Single(SplitName::Test)),
        ]);
        // Counting oracle.
        let expected_train = samples.iter().filter(|s| s.domain == 0).count();
        let expected_test = samples.iter().filter(|s| s.domain == 1).count();
        let splits = build_splits(samples, &assignment).unwrap();
        assert_eq!(splits[&SplitName::Train].len(), expected_train);
        assert_eq!(splits[&SplitName::Test].len(), expected_test);
        assert!(splits[&SplitName::Val].is_empty());
        assert!(splits[&SplitName::ValTta].is_empty());
        assert_eq!(splits[&SplitName::Train].domain_set, BTreeSet::from([0]));
    }

    #[test]
    fn shared_assignment_divides_a_domain() {
        let samples: Vec<_> = (0..10).map(|i| sample(i, 3)).collect();
        let assignment = BTreeMap::from([(
            3,
            DomainAssignment::Shared {
                primary: SplitName::Train,
                secondary: SplitName::Val,
                secondary_fraction: 0.2,
            },
        )]);
        let splits = build_splits(samples, &assignment).unwrap();
        assert_eq!(splits[&SplitName::Train].len(), 8);
        assert_eq!(splits[&SplitName::Val].len(), 2);
        assert_eq!(splits[&SplitName::Val].samples[0].sample_id, "s008");
    }

    #[test]
    fn cross_group_sharing_is_an_overlap() {
        let assignment = BTreeMap::from([(
            5,
            DomainAssignment::Shared {
                primary: SplitName::Train,
                secondary: SplitName::Test,
                secondary_fraction: 0.5,
            },
        )]);
        assert!(matches!(
            build_splits(vec![sample(0, 5)], &assignment),
            Err(DattaError::DomainOverlap { domain: 5 })
        ));
    }

    #[test]
    fn unassigned_domain_is_an_error() {
        assert!(matches!(
            build_splits(vec![sample(0, 9)], &BTreeMap::new()),
            Err(DattaError::UnassignedDomain { domain: 9 })
        ));
    }

    #[test]
    fn widar_split_sizes_sum_to_the_dataset_total() {
        assert_eq!(WIDAR_G6D_SPLIT_SIZES.iter().map(|(_, n)| n).sum::<usize>(), 58_648);
    }
}
