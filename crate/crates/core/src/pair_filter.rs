//! Percentile filtering of constructed training pairs over several quality
//! metrics. A pair survives only if it is within the kept fraction of every
//! metric, i.e. the rejects of all metrics are unioned.

use std::collections::HashSet;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRule {
    pub name: String,
    pub direction: Direction,
    pub keep_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterSpec {
    pub rules: Vec<MetricRule>,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rules {
            if !seen.insert(r.name.as_str()) {
                return Err(config(format!("metric `{}` listed twice", r.name)));
            }
            if !(r.keep_fraction > 0.0 && r.keep_fraction <= 1.0) {
                return Err(config(format!(
                    "keep fraction for `{}` must lie in (0, 1], got {}",
                    r.name, r.keep_fraction
                )));
            }
        }
        Ok(())
    }
}

/// Rows of `sample_id → metric values`, columns in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    metrics: Vec<String>,
    ids: Vec<String>,
    /// `values[m][row]`
    values: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn new(metrics: Vec<String>, ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(invalid("one id per row is required"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = metrics.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(invalid(format!("duplicate metric column `{dup}`")));
        }
        let mut values = vec![Vec::with_capacity(rows.len()); metrics.len()];
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != metrics.len() {
                return Err(invalid(format!("row `{id}` has {} values, expected {}", row.len(), metrics.len())));
            }
            for (col, v) in values.iter_mut().zip(row) {
                if !v.is_finite() {
                    return Err(invalid(format!("row `{id}` holds a non-finite value")));
                }
                col.push(*v);
            }
        }
        Ok(Self { metrics, ids, values })
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.metrics.iter().position(|m| m == name).map(|i| self.values[i].as_slice())
    }

    /// Parses `sample_id,<metric>...` with a header row.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("sample_id") {
            return Err(Error::Format("first column must be `sample_id`".into()));
        }
        let metrics: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("`{v}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(metrics, ids, rows)
    }
}

/// Keeps the `ceil(fraction · n)` best values; ties keep the earlier row.
pub fn rank_keep_mask(values: &[f64], direction: Direction, fraction: f64) -> Result<Vec<bool>> {
    if values.is_empty() {
        return Err(invalid("no values to rank"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("keep fraction must lie in (0, 1], got {fraction}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("values must be finite"));
    }
    let n = values.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal values stay in row order.
    order.sort_by(|&a, &b| match direction {
        Direction::HigherBetter => values[b].total_cmp(&values[a]),
        Direction::LowerBetter => values[a].total_cmp(&values[b]),
    });
    let mut mask = vec![false; n];
    order[..keep].iter().for_each(|&i| mask[i] = true);
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<String>,
    pub rejected: Vec<String>,
    /// `(metric, rows that metric rejects)` in rule order.
    pub reject_counts: Vec<(String, usize)>,
    pub yield_fraction: f64,
}

impl FilterOutcome {
    pub fn summary(&self) -> String {
        format!(
            "kept {} of {} pairs (yield {:.4})",
            self.kept.len(),
            self.kept.len() + self.rejected.len(),
            self.yield_fraction
        )
    }
}

pub fn filter_pairs(table: &MetricTable, spec: &FilterSpec) -> Result<FilterOutcome> {
    spec.validate()?;
    if table.is_empty() {
        return Err(invalid("metric table has no rows"));
    }
    let mut keep = vec![true; table.len()];
    let mut reject_counts = Vec::with_capacity(spec.rules.len());
    for rule in &spec.rules {
        let col = table
            .column(&rule.name)
            .ok_or_else(|| config(format!("metric `{}` is not in the table", rule.name)))?;
        let mask = rank_keep_mask(col, rule.direction, rule.keep_fraction)?;
        reject_counts.push((rule.name.clone(), mask.iter().filter(|k| !**k).count()));
        keep.iter_mut().zip(&mask).for_each(|(k, m)| *k &= m);
    }
    let (kept, rejected): (Vec<_>, Vec<_>) = table.ids.iter().zip(&keep).partition(|(_, k)| **k);
    let kept: Vec<String> = kept.into_iter().map(|(id, _)| id.clone()).collect();
    Ok(FilterOutcome {
        yield_fraction: kept.len() as f64 / table.len() as f64,
        kept,
        rejected: rejected.into_iter().map(|(id, _)| id.clone()).collect(),
        reject_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keeps_the_largest_half() {
        let v = [3.0, 9.0, 1.0, 7.0, 5.0, 2.0, 8.0, 6.0, 4.0, 0.0];
        let m = rank_keep_mask(&v, Direction::HigherBetter, 0.5).unwrap();
        let kept: Vec<f64> = v.iter().zip(&m).filter(|(_, k)| **k).map(|(x, _)| *x).collect();
        assert_eq!(kept, vec![9.0, 7.0, 5.0, 8.0, 6.0]);
        assert!(rank_keep_mask(&v, Direction::LowerBetter, 1.0).unwrap().iter().all(|k| *k));
    }

    #[test]
    fn ties_keep_the_earlier_row() {
        let m = rank_keep_mask(&[1.0, 5.0, 5.0, 0.0], Direction::HigherBetter, 0.5).unwrap();
        assert_eq!(m, vec![false, true, true, false]);
        let m = rank_keep_mask(&[1.0, 5.0, 5.0, 0.0], Direction::HigherBetter, 0.25).unwrap();
        assert_eq!(m, vec![false, true, false, false]);
    }

    #[test]
    fn ceil_rounding() {
        // ceil(0.3 · 5) = 2
        let m = rank_keep_mask(&[1.0, 2.0, 3.0, 4.0, 5.0], Direction::LowerBetter, 0.3).unwrap();
        assert_eq!(m, vec![true, true, false, false, false]);
    }

    #[test]
    fn bad_inputs() {
        assert!(rank_keep_mask(&[], Direction::HigherBetter, 0.5).is_err());
        assert!(rank_keep_mask(&[1.0], Direction::HigherBetter, 0.0).is_err());
        assert!(rank_keep_mask(&[f64::NAN], Direction::HigherBetter, 0.5).is_err());
        let t = MetricTable::new(vec!["a".into()], vec!["x".into()], vec![vec![1.0]]).unwrap();
        let spec = FilterSpec {
            rules: vec![MetricRule { name: "b".into(), direction: Direction::HigherBetter, keep_fraction: 0.5 }],
        };
        assert!(matches!(filter_pairs(&t, &spec), Err(Error::Config(_))));
        assert!(MetricTable::from_csv("id,a\nx,1\n".as_bytes()).is_err());
        assert!(MetricTable::from_csv("sample_id,a\nx,oops\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_parse() {
        let t = MetricTable::from_csv("sample_id,a,b\np0,1.5,2\np1,-3,4e-1\n".as_bytes()).unwrap();
        assert_eq!(t.metrics(), ["a", "b"]);
        assert_eq!(t.column("b").unwrap(), [2.0, 0.4]);
    }

    fn rule(name: &str, f: f64) -> MetricRule {
        MetricRule { name: name.into(), direction: Direction::HigherBetter, keep_fraction: f }
    }

    proptest! {
        #[test]
        fn raising_a_fraction_never_drops_a_kept_row(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40),
            f1 in 0.05f64..1.0, f2 in 0.05f64..1.0, bump in 0.0f64..0.5,
        ) {
            let ids: Vec<String> = (0..vals.len()).map(|i| format!("r{i}")).collect();
            let rows = vals.iter().map(|(a, b)| vec![*a, *b]).collect();
            let t = MetricTable::new(vec!["a".into(), "b".into()], ids, rows).unwrap();
            let lo = filter_pairs(&t, &FilterSpec { rules: vec![rule("a", f1), rule("b", f2)] }).unwrap();
            let hi = filter_pairs(&t, &FilterSpec { rules: vec![rule("a", (f1 + bump).min(1.0)), rule("b", f2)] }).unwrap();
            for id in &lo.kept {
                prop_assert!(hi.kept.contains(id));
            }
            let bound = (f1.min(f2) * t.len() as f64).ceil() / t.len() as f64;
            prop_assert!(lo.yield_fraction <= bound + 1e-12);
        }
    }
}
