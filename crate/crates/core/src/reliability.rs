//! Agreement and convergence statistics over council results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::model::{Assessment, CouncilResult, Flag, FlagKind, Round, SCALE_MAX, TOTAL_MAX};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("no pairable values: alpha is undefined")]
    NoPairableValues,
    #[error("empty input")]
    Empty,
    #[error("unit {0} has fewer than two scores")]
    TooFewScores(usize),
    #[error("value {value} outside scale {min}-{max}")]
    OutOfScale { value: u32, min: u32, max: u32 },
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero variance: correlation is undefined")]
    ZeroVariance,
    #[error("rounds do not pair up: {0}")]
    Unpaired(String),
    #[error("matrix shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ordinal,
    Interval,
}

/// Ratings by unit (rows) and rater (columns). Missing ratings are `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub units: Vec<String>,
    pub raters: Vec<String>,
    pub values: Vec<Vec<Option<u32>>>,
    pub scale_min: u32,
    pub scale_max: u32,
}

impl RatingMatrix {
    pub fn new(
        units: Vec<String>,
        raters: Vec<String>,
        values: Vec<Vec<Option<u32>>>,
        scale_min: u32,
        scale_max: u32,
    ) -> Result<Self, StatsError> {
        if scale_min > scale_max {
            return Err(StatsError::Shape("scale_min exceeds scale_max".into()));
        }
        if values.len() != units.len() {
            return Err(StatsError::Shape(format!("{} rows for {} units", values.len(), units.len())));
        }
        for row in &values {
            if row.len() != raters.len() {
                return Err(StatsError::Shape(format!("row of {} for {} raters", row.len(), raters.len())));
            }
            for &v in row.iter().flatten() {
                if v < scale_min || v > scale_max {
                    return Err(StatsError::OutOfScale {
                        value: v,
                        min: scale_min,
                        max: scale_max,
                    });
                }
            }
        }
        Ok(Self {
            units,
            raters,
            values,
            scale_min,
            scale_max,
        })
    }

    /// Dimension-level matrix for one round: one unit per (council, dimension).
    pub fn dimension_level(councils: &[CouncilResult], round: Round) -> Result<Self, StatsError> {
        let raters = rater_ids(councils, round);
        let mut units = Vec::new();
        let mut values = Vec::new();
        for c in councils {
            let items = round_items(c, round);
            let Some(first) = items.first() else { continue };
            for dim in first.scores.iter().map(|s| s.dimension_id.as_str()) {
                units.push(format!("{}/{dim}", c.transcript_ref));
                values.push(
                    raters
                        .iter()
                        .map(|r| {
                            items
                                .iter()
                                .find(|a| &a.rater_id == r)
                                .and_then(|a| a.score_for(dim))
                                .map(u32::from)
                        })
                        .collect(),
                );
            }
        }
        Self::new(units, raters, values, 0, u32::from(SCALE_MAX))
    }

    /// Overall matrix for one round: one unit per council, values are totals.
    pub fn overall(councils: &[CouncilResult], round: Round) -> Result<Self, StatsError> {
        let raters = rater_ids(councils, round);
        let units = councils.iter().map(|c| c.transcript_ref.clone()).collect();
        let values = councils
            .iter()
            .map(|c| {
                let items = round_items(c, round);
                raters
                    .iter()
                    .map(|r| items.iter().find(|a| &a.rater_id == r).map(|a| u32::from(a.total)))
                    .collect()
            })
            .collect();
        Self::new(units, raters, values, 0, u32::from(TOTAL_MAX))
    }

    /// The non-missing scores of each unit.
    pub fn unit_scores(&self) -> Vec<Vec<u32>> {
        self.values.iter().map(|row| row.iter().flatten().copied().collect()).collect()
    }
}

fn round_items(c: &CouncilResult, round: Round) -> &[Assessment] {
    match round {
        Round::R1 => &c.round1,
        Round::R2 => &c.round2,
        Round::Chair => std::slice::from_ref(&c.chair),
    }
}

fn rater_ids(councils: &[CouncilResult], round: Round) -> Vec<String> {
    let mut ids: Vec<String> = councils
        .iter()
        .flat_map(|c| round_items(c, round).iter().map(|a| a.rater_id.clone()))
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Krippendorff's alpha via the coincidence matrix.
///
/// When every pairable value is identical the expected disagreement is
/// zero; this returns 1.0 for that case.
pub fn krippendorff_alpha(matrix: &RatingMatrix, metric: Metric) -> Result<f64, StatsError> {
    let size = (matrix.scale_max - matrix.scale_min + 1) as usize;
    let mut coincidence = vec![vec![0.0f64; size]; size];
    for row in &matrix.values {
        let vals: Vec<usize> = row.iter().flatten().map(|&v| (v - matrix.scale_min) as usize).collect();
        let m = vals.len();
        if m < 2 {
            continue;
        }
        let weight = 1.0 / (m as f64 - 1.0);
        for (i, &c) in vals.iter().enumerate() {
            for (j, &k) in vals.iter().enumerate() {
                if i != j {
                    coincidence[c][k] += weight;
                }
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|r| r.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    if n == 0.0 {
        return Err(StatsError::NoPairableValues);
    }
    let delta = |c: usize, k: usize| -> f64 {
        match metric {
            Metric::Interval => {
                let d = c as f64 - k as f64;
                d * d
            }
            Metric::Ordinal => {
                let (lo, hi) = (c.min(k), c.max(k));
                let between: f64 = marginals[lo..=hi].iter().sum();
                let d = between - (marginals[c] + marginals[k]) / 2.0;
                d * d
            }
        }
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..size {
        for k in 0..size {
            if c == k {
                continue;
            }
            let d = delta(c, k);
            observed += coincidence[c][k] * d;
            expected += marginals[c] * marginals[k] * d;
        }
    }
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

fn spreads(units: &[Vec<u32>]) -> Result<Vec<u32>, StatsError> {
    if units.is_empty() {
        return Err(StatsError::Empty);
    }
    units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let (Some(min), Some(max)) = (u.iter().min(), u.iter().max()) else {
                return Err(StatsError::TooFewScores(i));
            };
            if u.len() < 2 {
                return Err(StatsError::TooFewScores(i));
            }
            Ok(max - min)
        })
        .collect()
}

/// Fraction of units whose scores span at most `k` points.
pub fn agreement_within_k(units: &[Vec<u32>], k: u32) -> Result<f64, StatsError> {
    let s = spreads(units)?;
    Ok(s.iter().filter(|&&d| d <= k).count() as f64 / s.len() as f64)
}

/// Mean over units of (max − min).
pub fn mean_max_difference(units: &[Vec<u32>]) -> Result<f64, StatsError> {
    let s = spreads(units)?;
    Ok(s.iter().map(|&d| f64::from(d)).sum::<f64>() / s.len() as f64)
}

/// Per rater, the mean of (Round 2 total − Round 1 total) over units.
/// Inputs are `(unit, assessment)` pairs.
pub fn convergence_shift(
    r1: &[(String, Assessment)],
    r2: &[(String, Assessment)],
) -> Result<BTreeMap<String, f64>, StatsError> {
    let key = |(unit, a): &(String, Assessment)| (a.rater_id.clone(), unit.clone());
    let first: BTreeMap<_, _> = r1.iter().map(|p| (key(p), i64::from(p.1.total))).collect();
    let second: BTreeMap<_, _> = r2.iter().map(|p| (key(p), i64::from(p.1.total))).collect();
    if first.len() != r1.len() || second.len() != r2.len() {
        return Err(StatsError::Unpaired("duplicate (unit, rater) pair".into()));
    }
    if first.keys().ne(second.keys()) {
        return Err(StatsError::Unpaired("round 1 and round 2 cover different (unit, rater) pairs".into()));
    }
    let mut sums: BTreeMap<String, (i64, u32)> = BTreeMap::new();
    for (k, before) in &first {
        let slot = sums.entry(k.0.clone()).or_insert((0, 0));
        slot.0 += second[k] - before;
        slot.1 += 1;
    }
    Ok(sums.into_iter().map(|(r, (s, n))| (r, s as f64 / f64::from(n))).collect())
}

/// Mean chair score per dimension.
pub fn dimension_means(chair: &[Assessment]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    for a in chair {
        for s in &a.scores {
            let slot = sums.entry(s.dimension_id.clone()).or_insert((0, 0));
            slot.0 += u32::from(s.score);
            slot.1 += 1;
        }
    }
    sums.into_iter().map(|(d, (s, n))| (d, f64::from(s) / f64::from(n))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub r: f64,
    pub ci95: (f64, f64),
    /// Two-sided.
    pub p: f64,
}

const Z_975: f64 = 1.959_963_984_540_054;

/// Pearson correlation with a Fisher-z 95% interval and a t-test p-value.
pub fn duration_score_correlation(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewObservations { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    if r.abs() == 1.0 {
        return Ok(Correlation {
            n,
            r,
            ci95: (r, r),
            p: 0.0,
        });
    }
    let ci95 = if n > 3 {
        let z = r.atanh();
        let se = 1.0 / (nf - 3.0).sqrt();
        ((z - Z_975 * se).tanh(), (z + Z_975 * se).tanh())
    } else {
        (-1.0, 1.0)
    };
    let df = nf - 2.0;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(Correlation { n, r, ci95, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagThresholds {
    /// Minimum per-dimension max−min that raises a flag.
    pub dimension_spread: u8,
    /// Minimum total max−min that raises a flag.
    pub total_spread: u8,
}

impl Default for FlagThresholds {
    fn default() -> Self {
        Self {
            dimension_spread: 2,
            total_spread: 3,
        }
    }
}

/// Disagreement flags over one round of assessments.
pub fn flag_assessments(assessments: &[Assessment], thresholds: &FlagThresholds) -> Vec<Flag> {
    let mut flags = Vec::new();
    if assessments.len() < 2 {
        return flags;
    }
    let mut dims: Vec<&str> = Vec::new();
    for a in assessments {
        for s in &a.scores {
            if !dims.contains(&s.dimension_id.as_str()) {
                dims.push(&s.dimension_id);
            }
        }
    }
    for dim in dims {
        let scores: Vec<u8> = assessments.iter().filter_map(|a| a.score_for(dim)).collect();
        let (Some(&lo), Some(&hi)) = (scores.iter().min(), scores.iter().max()) else { continue };
        if hi - lo >= thresholds.dimension_spread {
            flags.push(Flag::new(
                FlagKind::DimensionDisagreement,
                format!("{dim}: scores {scores:?} span {} points", hi - lo),
                f64::from(thresholds.dimension_spread),
            ));
        }
    }
    let totals: Vec<u8> = assessments.iter().map(|a| a.total).collect();
    let lo = totals.iter().min().copied().unwrap_or(0);
    let hi = totals.iter().max().copied().unwrap_or(0);
    if hi - lo >= thresholds.total_spread {
        flags.push(Flag::new(
            FlagKind::OverallDivergence,
            format!("totals {totals:?} span {} points", hi - lo),
            f64::from(thresholds.total_spread),
        ));
    }
    flags
}

/// Agreement statistics for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub alpha_dimension: Option<f64>,
    pub alpha_overall: Option<f64>,
    /// Over unit totals, for k = 0, 1, 2.
    pub within_k: BTreeMap<u32, f64>,
    pub mean_max_diff: f64,
    pub rater_means: BTreeMap<String, f64>,
    /// Dimension-level units by spread: exact, one point, two or more.
    pub dimension_exact: usize,
    pub dimension_within_one: usize,
    pub dimension_two_plus: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagsSummary {
    pub flagged_councils: usize,
    pub by_kind: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub councils: usize,
    pub metric: Metric,
    pub round1: RoundStats,
    pub round2: RoundStats,
    /// Per rater, mean of (Round 2 total − Round 1 total).
    pub shifts: BTreeMap<String, f64>,
    pub dimension_means: BTreeMap<String, f64>,
    pub chair_mean_total: f64,
    pub correlation: Option<Correlation>,
    pub correlation_note: Option<String>,
    pub flags_summary: FlagsSummary,
}

fn round_stats(councils: &[CouncilResult], round: Round, metric: Metric) -> Result<RoundStats, StatsError> {
    let dim = RatingMatrix::dimension_level(councils, round)?;
    let overall = RatingMatrix::overall(councils, round)?;
    let totals = overall.unit_scores();
    let mut within_k = BTreeMap::new();
    for k in 0..=2 {
        within_k.insert(k, agreement_within_k(&totals, k)?);
    }
    let dim_spreads = spreads(&dim.unit_scores())?;
    let mut rater_means: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    for c in councils {
        for a in round_items(c, round) {
            let slot = rater_means.entry(a.rater_id.clone()).or_insert((0, 0));
            slot.0 += u32::from(a.total);
            slot.1 += 1;
        }
    }
    Ok(RoundStats {
        alpha_dimension: krippendorff_alpha(&dim, metric).ok(),
        alpha_overall: krippendorff_alpha(&overall, metric).ok(),
        within_k,
        mean_max_diff: mean_max_difference(&totals)?,
        rater_means: rater_means
            .into_iter()
            .map(|(r, (s, n))| (r, f64::from(s) / f64::from(n)))
            .collect(),
        dimension_exact: dim_spreads.iter().filter(|&&d| d == 0).count(),
        dimension_within_one: dim_spreads.iter().filter(|&&d| d == 1).count(),
        dimension_two_plus: dim_spreads.iter().filter(|&&d| d >= 2).count(),
    })
}

impl ReliabilityReport {
    /// `durations_secs` is keyed by transcript ref; councils without a
    /// duration are left out of the correlation.
    pub fn build(
        councils: &[CouncilResult],
        durations_secs: &BTreeMap<String, f64>,
        metric: Metric,
    ) -> Result<Self, StatsError> {
        if councils.is_empty() {
            return Err(StatsError::Empty);
        }
        let pairs = |round: Round| -> Vec<(String, Assessment)> {
            councils
                .iter()
                .flat_map(|c| round_items(c, round).iter().map(|a| (c.transcript_ref.clone(), a.clone())))
                .collect()
        };
        let shifts = convergence_shift(&pairs(Round::R1), &pairs(Round::R2))?;
        let chairs: Vec<Assessment> = councils.iter().map(|c| c.chair.clone()).collect();
        let chair_mean_total =
            chairs.iter().map(|a| f64::from(a.total)).sum::<f64>() / chairs.len() as f64;

        let (xs, ys): (Vec<f64>, Vec<f64>) = councils
            .iter()
            .filter_map(|c| durations_secs.get(&c.transcript_ref).map(|d| (*d, f64::from(c.chair.total))))
            .unzip();
        let (correlation, correlation_note) = if xs.is_empty() {
            (None, Some("no durations available".to_string()))
        } else {
            match duration_score_correlation(&xs, &ys) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };

        let mut flags_summary = FlagsSummary::default();
        for c in councils {
            if c.is_flagged() {
                flags_summary.flagged_councils += 1;
            }
            for f in &c.flags {
                *flags_summary.by_kind.entry(f.kind.as_str().to_string()).or_insert(0) += 1;
            }
        }

        Ok(Self {
            councils: councils.len(),
            metric,
            round1: round_stats(councils, Round::R1, metric)?,
            round2: round_stats(councils, Round::R2, metric)?,
            shifts,
            dimension_means: dimension_means(&chairs),
            chair_mean_total,
            correlation,
            correlation_note,
            flags_summary,
        })
    }

    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let pct = |v: f64| format!("{:.0}%", v * 100.0);
        let mut out = String::new();
        let _ = writeln!(out, "# Grading reliability report\n");
        let _ = writeln!(out, "Councils analysed: {}\n", self.councils);
        let _ = writeln!(out, "Mean chair total: {:.2} / {TOTAL_MAX}\n", self.chair_mean_total);

        let _ = writeln!(out, "## Agreement before and after deliberation (0-{TOTAL_MAX})\n");
        let _ = writeln!(out, "| Metric | R1 | R2 |\n|---|---:|---:|");
        for (k, label) in [(0, "<=0 pt diff (exact)"), (1, "<=1 pt difference"), (2, "<=2 pt difference")] {
            let _ = writeln!(
                out,
                "| {label} | {} | {} |",
                pct(self.round1.within_k[&k]),
                pct(self.round2.within_k[&k])
            );
        }
        let _ = writeln!(
            out,
            "| Mean max difference | {:.2} | {:.2} |",
            self.round1.mean_max_diff, self.round2.mean_max_diff
        );
        let metric = match self.metric {
            Metric::Ordinal => "ordinal",
            Metric::Interval => "interval",
        };
        let _ = writeln!(
            out,
            "| Krippendorff alpha, dimension ({metric}) | {} | {} |",
            opt(self.round1.alpha_dimension),
            opt(self.round2.alpha_dimension)
        );
        let _ = writeln!(
            out,
            "| Krippendorff alpha, overall ({metric}) | {} | {} |\n",
            opt(self.round1.alpha_overall),
            opt(self.round2.alpha_overall)
        );

        let r2 = &self.round2;
        let units = r2.dimension_exact + r2.dimension_within_one + r2.dimension_two_plus;
        let _ = writeln!(out, "## Dimension-level agreement after deliberation ({units} units)\n");
        let _ = writeln!(out, "| Spread | Units |\n|---|---:|");
        let _ = writeln!(out, "| 0 (perfect) | {} |", r2.dimension_exact);
        let _ = writeln!(out, "| 1 | {} |", r2.dimension_within_one);
        let _ = writeln!(out, "| 2 or more | {} |\n", r2.dimension_two_plus);

        let _ = writeln!(out, "## Rater means and convergence\n");
        let _ = writeln!(out, "| Rater | R1 mean | R2 mean | Shift |\n|---|---:|---:|---:|");
        for (rater, shift) in &self.shifts {
            let _ = writeln!(
                out,
                "| {rater} | {} | {} | {shift:+.2} |",
                opt(self.round1.rater_means.get(rater).copied()),
                opt(self.round2.rater_means.get(rater).copied()),
            );
        }

        let _ = writeln!(out, "\n## Mean chair score by dimension (0-{SCALE_MAX})\n");
        let _ = writeln!(out, "| Dimension | Mean |\n|---|---:|");
        for (dim, mean) in &self.dimension_means {
            let _ = writeln!(out, "| {dim} | {mean:.2} |");
        }

        let _ = writeln!(out, "\n## Duration and score\n");
        match (&self.correlation, &self.correlation_note) {
            (Some(c), _) => {
                let _ = writeln!(
                    out,
                    "r = {:.2}, 95% CI [{:.2}, {:.2}], p = {:.2}, n = {}",
                    c.r, c.ci95.0, c.ci95.1, c.p, c.n
                );
            }
            (None, note) => {
                let _ = writeln!(out, "Not computed: {}", note.as_deref().unwrap_or("unknown"));
            }
        }

        let _ = writeln!(out, "\n## Audit flags\n");
        let _ = writeln!(
            out,
            "Flagged councils: {} of {}\n",
            self.flags_summary.flagged_councils, self.councils
        );
        for (kind, n) in &self.flags_summary.by_kind {
            let _ = writeln!(out, "- {kind}: {n}");
        }
        out
    }
}
