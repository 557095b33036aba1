use std::fmt;

use crate::decomposer::SelectionRule;
use crate::error::{Result, SlimError};

/// How one component, or one layer's FFN, ended up in the compressed model.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordEntry {
    Dense,
    Factored {
        rank: usize,
        /// Whitened truncation loss `Σ_{i≥rank} σᵢ²`.
        loss_sq: f64,
        fallback: bool,
    },
    /// Prime neurons kept dense, marginal gate/up/down at the given ranks;
    /// `None` marks a block kept dense.
    Split {
        prime: Vec<usize>,
        ranks: Option<[Option<usize>; 3]>,
        loss_sq: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRecord {
    /// `layers.<l>.<kind>` for attention, `layers.<l>.ffn` for a whole FFN.
    pub name: String,
    pub entry: RecordEntry,
}

/// Everything needed to audit a compression run, stored in the header of
/// the compressed model file.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionManifest {
    pub source_hash: u64,
    pub gamma: f64,
    pub rule: SelectionRule,
    pub target_ratio: f64,
    pub exclusions: String,
    pub rank_step: usize,
    pub allocation: String,
    pub seed: u64,
    pub budget: u64,
    pub records: Vec<ComponentRecord>,
    /// Fraction of the dense payload removed.
    pub achieved_ratio: f64,
    pub objective: f64,
}

impl CompressionManifest {
    /// Compressed size as a fraction of the dense size.
    pub fn memory_fraction(&self) -> f64 {
        1.0 - self.achieved_ratio
    }

    pub fn record(&self, name: &str) -> Option<&RecordEntry> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.entry)
    }

    /// `(key, value)` pairs for a tensor-file header.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let mut m = vec![
            ("manifest.source_hash".to_string(), format!("{:016x}", self.source_hash)),
            ("manifest.gamma".into(), format!("{:e}", self.gamma)),
            ("manifest.rule".into(), self.rule.to_string()),
            ("manifest.target_ratio".into(), format!("{:e}", self.target_ratio)),
            ("manifest.exclusions".into(), self.exclusions.clone()),
            ("manifest.rank_step".into(), self.rank_step.to_string()),
            ("manifest.allocation".into(), self.allocation.clone()),
            ("manifest.seed".into(), self.seed.to_string()),
            ("manifest.budget".into(), self.budget.to_string()),
            ("manifest.achieved_ratio".into(), format!("{:e}", self.achieved_ratio)),
            ("manifest.objective".into(), format!("{:e}", self.objective)),
        ];
        for r in &self.records {
            m.push(("manifest.record".into(), format!("{} {}", r.name, r.entry)));
        }
        m
    }

    pub fn from_meta<'a>(meta: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut fields: Vec<(&str, &str)> = Vec::new();
        let mut records = Vec::new();
        for (k, v) in meta {
            if k == "manifest.record" {
                records.push(parse_record(v)?);
            } else if let Some(name) = k.strip_prefix("manifest.") {
                fields.push((name, v));
            }
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| SlimError::corrupt(format!("manifest lacks {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| SlimError::corrupt(format!("manifest {key} has bad value {v:?}")))
        }
        Ok(CompressionManifest {
            source_hash: u64::from_str_radix(get("source_hash")?, 16)
                .map_err(|_| SlimError::corrupt("manifest source_hash is not hex"))?,
            gamma: num("gamma", get("gamma")?)?,
            rule: get("rule")?.parse().map_err(|_| SlimError::corrupt("manifest rule"))?,
            target_ratio: num("target_ratio", get("target_ratio")?)?,
            exclusions: get("exclusions")?.to_string(),
            rank_step: num("rank_step", get("rank_step")?)?,
            allocation: get("allocation")?.to_string(),
            seed: num("seed", get("seed")?)?,
            budget: num("budget", get("budget")?)?,
            achieved_ratio: num("achieved_ratio", get("achieved_ratio")?)?,
            objective: num("objective", get("objective")?)?,
            records,
        })
    }

    /// Human-readable summary, one line per record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_meta() {
            s.push_str(&format!("{k} {v}\n"));
        }
        s
    }
}

fn rank_text(r: Option<usize>) -> String {
    r.map_or("dense".to_string(), |k| k.to_string())
}

impl fmt::Display for RecordEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordEntry::Dense => f.write_str("dense"),
            RecordEntry::Factored {
                rank,
                loss_sq,
                fallback,
            } => write!(f, "factored {rank} {loss_sq:e} {}", u8::from(*fallback)),
            RecordEntry::Split { prime, ranks, loss_sq } => {
                let ranks = match ranks {
                    None => "none".to_string(),
                    Some(r) => r.iter().map(|k| rank_text(*k)).collect::<Vec<_>>().join(","),
                };
                let loss = loss_sq.iter().map(|l| format!("{l:e}")).collect::<Vec<_>>().join(",");
                let prime = if prime.is_empty() {
                    "-".to_string()
                } else {
                    prime.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
                };
                write!(f, "split {ranks} {loss} {prime}")
            }
        }
    }
}

fn parse_record(v: &str) -> Result<ComponentRecord> {
    let bad = || SlimError::corrupt(format!("bad manifest record {v:?}"));
    let f: Vec<&str> = v.split(' ').collect();
    let name = f.first().filter(|n| !n.is_empty()).ok_or_else(bad)?.to_string();
    let entry = match (f.get(1).copied(), f.len()) {
        (Some("dense"), 2) => RecordEntry::Dense,
        (Some("factored"), 5) => RecordEntry::Factored {
            rank: f[2].parse().map_err(|_| bad())?,
            loss_sq: f[3].parse().map_err(|_| bad())?,
            fallback: match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
        },
        (Some("split"), 5) => {
            let ranks = if f[2] == "none" {
                None
            } else {
                let r: Vec<Option<usize>> = f[2]
                    .split(',')
                    .map(|t| if t == "dense" { Ok(None) } else { t.parse().map(Some) })
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                Some(<[Option<usize>; 3]>::try_from(r).map_err(|_| bad())?)
            };
            let l: Vec<f64> = f[3]
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let loss_sq = <[f64; 3]>::try_from(l).map_err(|_| bad())?;
            let prime = if f[4] == "-" {
                Vec::new()
            } else {
                f[4].split(',')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?
            };
            RecordEntry::Split { prime, ranks, loss_sq }
        }
        _ => return Err(bad()),
    };
    Ok(ComponentRecord { name, entry })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let m = CompressionManifest {
            source_hash: 0xdead_beef_0123_4567,
            gamma: 0.15,
            rule: SelectionRule::FixedFraction,
            target_ratio: 0.3,
            exclusions: "kinds=v leading=2 trailing=2".into(),
            rank_step: 4,
            allocation: "greedy".into(),
            seed: 3,
            budget: 12345,
            records: vec![
                ComponentRecord {
                    name: "layers.0.q".into(),
                    entry: RecordEntry::Dense,
                },
                ComponentRecord {
                    name: "layers.2.k".into(),
                    entry: RecordEntry::Factored {
                        rank: 8,
                        loss_sq: 0.1 + 0.2,
                        fallback: false,
                    },
                },
                ComponentRecord {
                    name: "layers.2.ffn".into(),
                    entry: RecordEntry::Split {
                        prime: vec![1, 7, 9],
                        ranks: Some([Some(4), Some(8), None]),
                        loss_sq: [1e-3, 2.5, 0.0],
                    },
                },
                ComponentRecord {
                    name: "layers.3.ffn".into(),
                    entry: RecordEntry::Split {
                        prime: vec![],
                        ranks: None,
                        loss_sq: [0.0; 3],
                    },
                },
            ],
            achieved_ratio: 0.301234,
            objective: 17.25,
        };
        let meta = m.to_meta();
        let back = CompressionManifest::from_meta(meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn malformed_record_is_corrupt() {
        let meta = [("manifest.record", "layers.0.q factored x 1 0")];
        assert!(matches!(
            CompressionManifest::from_meta(meta.iter().copied()),
            Err(SlimError::CorruptHeader(_))
        ));
    }
}
