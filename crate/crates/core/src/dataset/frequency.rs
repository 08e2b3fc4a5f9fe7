//! Head / medium / tail strata by ground-truth attribute frequency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ImageRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencySplit {
    Head,
    Medium,
    Tail,
}

impl FrequencySplit {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "head" => Some(Self::Head),
            "medium" => Some(Self::Medium),
            "tail" => Some(Self::Tail),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFrequencyTable {
    pub counts: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, FrequencySplit>,
}

impl AttributeFrequencyTable {
    /// Ranks attributes by count (descending, ties by name) and cuts the
    /// ranking at two percentiles: ranks above `head_pct` form the head,
    /// ranks below `tail_pct` the tail. Requires `0 < tail_pct < head_pct < 1`.
    pub fn from_records(records: &[ImageRecord], head_pct: f64, tail_pct: f64) -> Self {
        let mut counts = BTreeMap::new();
        for inst in records.iter().flat_map(|r| &r.instances) {
            for a in &inst.attributes {
                *counts.entry(a.clone()).or_insert(0) += 1;
            }
        }
        Self::from_counts(counts, head_pct, tail_pct)
    }

    pub fn from_counts(counts: BTreeMap<String, usize>, head_pct: f64, tail_pct: f64) -> Self {
        assert!(
            0.0 < tail_pct && tail_pct < head_pct && head_pct < 1.0,
            "percentiles must satisfy 0 < tail < head < 1"
        );
        let mut ranked: Vec<(&String, usize)> = counts.iter().map(|(k, &v)| (k, v)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let n = ranked.len();
        // A small slack keeps exact fractions such as 12 · (1/3) from
        // rounding the wrong way.
        let n_head = ((n as f64) * (1.0 - head_pct) - 1e-9).ceil().max(0.0) as usize;
        let n_head = n_head.min(n);
        let n_tail = (((n as f64) * tail_pct + 1e-9).floor() as usize).min(n - n_head);
        let splits = ranked
            .iter()
            .enumerate()
            .map(|(rank, (name, _))| {
                let s = if rank < n_head {
                    FrequencySplit::Head
                } else if rank >= n - n_tail {
                    FrequencySplit::Tail
                } else {
                    FrequencySplit::Medium
                };
                ((*name).clone(), s)
            })
            .collect();
        Self { counts, splits }
    }

    /// Applies explicit assignments, one `attribute<TAB>head|medium|tail`
    /// per line. Attributes not yet counted are added with count 0.
    pub fn apply_override(&mut self, text: &str) -> Result<(), String> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (attr, split) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected attribute<TAB>split", no + 1))?;
            let split = FrequencySplit::parse(split)
                .ok_or_else(|| format!("line {}: unknown split `{split}`", no + 1))?;
            self.counts.entry(attr.to_string()).or_insert(0);
            self.splits.insert(attr.to_string(), split);
        }
        Ok(())
    }

    pub fn split_of(&self, attribute: &str) -> Option<FrequencySplit> {
        self.splits.get(attribute).copied()
    }

    pub fn members(&self, split: FrequencySplit) -> Vec<&str> {
        self.splits
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}
