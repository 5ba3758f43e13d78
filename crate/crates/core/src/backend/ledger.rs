use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Usage;

/// Per-unit prices in micro-currency units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitPrices {
    pub input_micro: u64,
    pub output_micro: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub rater_id: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub per_backend: BTreeMap<String, u64>,
    pub total_micro: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("no price configured for backend `{0}`")]
    MissingPrice(String),
    #[error("cost overflow for backend `{0}`")]
    Overflow(String),
}

/// Sums usage cost per backend in integer micro-units.
pub fn usage_ledger(
    entries: &[UsageEntry],
    prices: &BTreeMap<String, UnitPrices>,
) -> Result<CostSummary, LedgerError> {
    let mut summary = CostSummary::default();
    for entry in entries {
        let price = prices
            .get(&entry.rater_id)
            .ok_or_else(|| LedgerError::MissingPrice(entry.rater_id.clone()))?;
        let overflow = || LedgerError::Overflow(entry.rater_id.clone());
        let cost = entry
            .usage
            .input_units
            .checked_mul(price.input_micro)
            .and_then(|i| entry.usage.output_units.checked_mul(price.output_micro).and_then(|o| i.checked_add(o)))
            .ok_or_else(overflow)?;
        let slot = summary.per_backend.entry(entry.rater_id.clone()).or_insert(0);
        *slot = slot.checked_add(cost).ok_or_else(overflow)?;
        summary.total_micro = summary.total_micro.checked_add(cost).ok_or_else(overflow)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, input: u64, output: u64) -> UsageEntry {
        UsageEntry {
            rater_id: id.into(),
            usage: Usage {
                input_units: input,
                output_units: output,
            },
        }
    }

    fn prices(pairs: &[(&str, u64, u64)]) -> BTreeMap<String, UnitPrices> {
        pairs
            .iter()
            .map(|(id, i, o)| {
                (
                    id.to_string(),
                    UnitPrices {
                        input_micro: *i,
                        output_micro: *o,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn empty_ledger_costs_nothing() {
        let s = usage_ledger(&[], &BTreeMap::new()).unwrap();
        assert_eq!(s.total_micro, 0);
        assert!(s.per_backend.is_empty());
    }

    #[test]
    fn linear_pricing() {
        let s = usage_ledger(&[entry("a", 1000, 500)], &prices(&[("a", 1, 2)])).unwrap();
        assert_eq!(s.total_micro, 2000);
    }

    #[test]
    fn three_backend_fixture_matches_hand_sum() {
        let entries = [
            entry("claude", 12_000, 3_000),
            entry("gemini", 12_500, 2_800),
            entry("gpt", 11_900, 1_200),
            entry("claude", 30_000, 4_000),
        ];
        let p = prices(&[("claude", 3, 15), ("gemini", 1, 5), ("gpt", 2, 8)]);
        let s = usage_ledger(&entries, &p).unwrap();
        // claude: 12000*3 + 3000*15 + 30000*3 + 4000*15 = 36000+45000+90000+60000
        assert_eq!(s.per_backend["claude"], 231_000);
        // gemini: 12500 + 14000
        assert_eq!(s.per_backend["gemini"], 26_500);
        // gpt: 23800 + 9600
        assert_eq!(s.per_backend["gpt"], 33_400);
        assert_eq!(s.total_micro, 231_000 + 26_500 + 33_400);
    }

    #[test]
    fn missing_price_names_backend() {
        let err = usage_ledger(&[entry("x", 1, 1)], &BTreeMap::new()).unwrap_err();
        assert_eq!(err, LedgerError::MissingPrice("x".into()));
    }
}
