//! Seeded case selection.
//!
//! The case is `eligible[seed mod |eligible|]`, with `eligible` keeping
//! catalog order. Over any complete residue class of seeds every case is
//! chosen exactly equally often.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::model::{ExamCase, ModelError, Validate};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CaseError {
    #[error("no eligible cases: catalog has {total} cases, {excluded} excluded")]
    NoEligibleCases { total: usize, excluded: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseCatalog {
    pub cases: Vec<ExamCase>,
    #[serde(default)]
    pub exclusions: BTreeSet<String>,
}

impl CaseCatalog {
    pub fn new(cases: Vec<ExamCase>) -> Self {
        Self {
            cases,
            exclusions: BTreeSet::new(),
        }
    }

    pub fn excluding<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.exclusions.extend(ids.into_iter().map(Into::into));
        self
    }

    pub fn eligible(&self) -> Vec<&ExamCase> {
        self.cases
            .iter()
            .filter(|c| !self.exclusions.contains(&c.id))
            .collect()
    }
}

impl Validate for CaseCatalog {
    fn validate(&self) -> Result<(), ModelError> {
        let mut ids = BTreeSet::new();
        for (i, case) in self.cases.iter().enumerate() {
            if case.id.trim().is_empty() {
                return Err(ModelError::schema(format!("cases[{i}].id"), "must be non-empty"));
            }
            if !ids.insert(case.id.as_str()) {
                return Err(ModelError::schema(format!("cases[{i}].id"), "duplicate case id"));
            }
        }
        Ok(())
    }
}

/// The selected case and its position among the eligible cases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub case: ExamCase,
    pub index: usize,
}

pub fn select_case(seed: u64, catalog: &CaseCatalog) -> Result<Selection, CaseError> {
    let eligible = catalog.eligible();
    if eligible.is_empty() {
        return Err(CaseError::NoEligibleCases {
            total: catalog.cases.len(),
            excluded: catalog.exclusions.len(),
        });
    }
    let index = (seed % eligible.len() as u64) as usize;
    Ok(Selection {
        case: eligible[index].clone(),
        index,
    })
}

/// Default seed for a session: the first eight bytes of SHA-256(session_id).
pub fn seed_from_session_id(session_id: &str) -> u64 {
    let digest = Sha256::digest(session_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    /// (case id, count) in eligible order.
    pub counts: Vec<(String, u64)>,
    pub draws: u64,
    pub chi_square: f64,
    pub degrees_of_freedom: u64,
    pub p_value: f64,
}

/// Per-case selection counts over `seeds`, with Pearson's chi-square
/// statistic against the uniform distribution.
pub fn distribution_report(catalog: &CaseCatalog, seeds: &[u64]) -> Result<DistributionReport, CaseError> {
    let eligible = catalog.eligible();
    if eligible.is_empty() {
        return Err(CaseError::NoEligibleCases {
            total: catalog.cases.len(),
            excluded: catalog.exclusions.len(),
        });
    }
    let mut counts = vec![0u64; eligible.len()];
    for &seed in seeds {
        counts[select_case(seed, catalog)?.index] += 1;
    }
    let draws = seeds.len() as u64;
    let expected = draws as f64 / eligible.len() as f64;
    let chi_square = if draws == 0 {
        0.0
    } else {
        counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum()
    };
    let degrees_of_freedom = eligible.len() as u64 - 1;
    let p_value = if degrees_of_freedom == 0 || draws == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(degrees_of_freedom as f64).expect("positive degrees of freedom");
        1.0 - dist.cdf(chi_square)
    };
    Ok(DistributionReport {
        counts: eligible
            .iter()
            .zip(counts)
            .map(|(case, n)| (case.id.clone(), n))
            .collect(),
        draws,
        chi_square,
        degrees_of_freedom,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog(n: usize) -> CaseCatalog {
        CaseCatalog::new(
            (0..n)
                .map(|i| ExamCase {
                    id: format!("case-{i}"),
                    title: format!("Case {i}"),
                    topic_tags: vec![],
                    brief: String::new(),
                })
                .collect(),
        )
    }

    #[test]
    fn modular_selection() {
        let c = catalog(8);
        assert_eq!(select_case(0, &c).unwrap().index, 0);
        assert_eq!(select_case(13, &c).unwrap().index, 5);
        let excluded = c.clone().excluding(["case-2"]);
        let s = select_case(13, &excluded).unwrap();
        assert_eq!(s.index, 6);
        assert_eq!(s.case.id, "case-7");
    }

    #[test]
    fn empty_eligible_set_errors() {
        assert!(select_case(1, &catalog(0)).is_err());
        let all = catalog(2).excluding(["case-0", "case-1"]);
        assert_eq!(
            select_case(1, &all),
            Err(CaseError::NoEligibleCases { total: 2, excluded: 2 })
        );
    }

    #[test]
    fn exhaustive_residues() {
        let c = catalog(8);
        let seeds: Vec<u64> = (0..8).collect();
        let report = distribution_report(&c, &seeds).unwrap();
        assert!(report.counts.iter().all(|(_, n)| *n == 1));
        assert_eq!(report.chi_square, 0.0);

        let seeds: Vec<u64> = (0..10_000).collect();
        let report = distribution_report(&c, &seeds).unwrap();
        assert!(report.counts.iter().all(|(_, n)| *n == 1250));
    }

    #[test]
    fn session_seed_is_stable() {
        assert_eq!(seed_from_session_id("abc"), seed_from_session_id("abc"));
        assert_ne!(seed_from_session_id("abc"), seed_from_session_id("abd"));
    }

    proptest! {
        #[test]
        fn selection_depends_only_on_eligible_list(seed: u64, n in 1usize..12, drop in 0usize..12) {
            let full = catalog(n + 1);
            let drop = drop % (n + 1);
            let dropped_id = full.cases[drop].id.clone();
            let excluded = full.clone().excluding([dropped_id]);
            let mut pruned = full.clone();
            pruned.cases.remove(drop);
            prop_assert_eq!(select_case(seed, &excluded).unwrap(), select_case(seed, &pruned).unwrap());
        }

        #[test]
        fn stable_under_reserialization(seed: u64, n in 1usize..10) {
            let c = catalog(n);
            let back: CaseCatalog = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            prop_assert_eq!(select_case(seed, &c).unwrap(), select_case(seed, &back).unwrap());
        }

        #[test]
        fn full_residue_class_is_uniform(start in 0u64..1_000_000, n in 1usize..10, reps in 1u64..20) {
            let c = catalog(n);
            let seeds: Vec<u64> = (start..start + n as u64 * reps).collect();
            let report = distribution_report(&c, &seeds).unwrap();
            prop_assert!(report.counts.iter().all(|(_, k)| *k == reps));
        }
    }
}
