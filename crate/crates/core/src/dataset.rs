//! Slice manifests: which series exist, how they are split and their labels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::labels::{Class, LabelVector, NUM_CLASSES};
use crate::preprocess::SeriesBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub series_id: String,
    pub slice_index: usize,
    pub split: Split,
    /// Absent for the unlabeled split.
    pub labels: Option<LabelVector>,
    /// Origin of pseudo-labels; empty for human labels.
    pub provenance: Option<String>,
}

/// Rows in file order: series contiguous, slices ascending within a series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<SliceRecord>,
}

const LABEL_HEADER: &str = "series_id,slice_index,split,epidural,intraparenchymal,intraventricular,subarachnoid,subdural,any";

impl Manifest {
    /// Distinct series ids in first-appearance order.
    pub fn series_ids(&self) -> Vec<String> {
        distinct_ids(self.rows.iter())
    }

    pub fn series_in(&self, split: Split) -> Vec<String> {
        distinct_ids(self.rows.iter().filter(|r| r.split == split))
    }

    /// Labels per series, slices in ascending index order. Series with any
    /// unlabeled row are omitted.
    pub fn labels_by_series(&self) -> BTreeMap<String, Vec<LabelVector>> {
        let mut grouped: BTreeMap<String, Vec<(usize, Option<LabelVector>)>> = BTreeMap::new();
        for r in &self.rows {
            grouped
                .entry(r.series_id.clone())
                .or_default()
                .push((r.slice_index, r.labels));
        }
        grouped
            .into_iter()
            .filter_map(|(id, mut rows)| {
                rows.sort_by_key(|r| r.0);
                rows.into_iter()
                    .map(|r| r.1)
                    .collect::<Option<Vec<_>>>()
                    .map(|l| (id, l))
            })
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&SliceRecord) -> bool) -> Manifest {
        Manifest {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let with_provenance = self.rows.iter().any(|r| r.provenance.is_some());
        let mut out = String::from(LABEL_HEADER);
        if with_provenance {
            out.push_str(",provenance");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.series_id, r.slice_index, r.split));
            for c in 0..NUM_CLASSES {
                out.push(',');
                if let Some(l) = r.labels {
                    out.push(if l.0[c] { '1' } else { '0' });
                }
            }
            if with_provenance {
                out.push(',');
                out.push_str(r.provenance.as_deref().unwrap_or(""));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source: &Path) -> Result<Manifest> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .map(|(_, l)| l.trim())
            .ok_or_else(|| Error::parse(source, 1, "empty manifest"))?;
        let with_provenance = match header {
            h if h == LABEL_HEADER => false,
            h if h.strip_suffix(",provenance") == Some(LABEL_HEADER) => true,
            _ => return Err(Error::parse(source, 1, format!("unexpected header `{header}`"))),
        };
        let expected = 3 + NUM_CLASSES + usize::from(with_provenance);
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(source, i + 1, m);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected {
                return Err(err(format!("expected {expected} fields, got {}", fields.len())));
            }
            let slice_index = fields[1].parse().map_err(|e| err(format!("slice_index: {e}")))?;
            let split = fields[2].parse().map_err(err)?;
            let label_fields = &fields[3..3 + NUM_CLASSES];
            let labels = if label_fields.iter().all(|f| f.is_empty()) {
                None
            } else {
                let mut flags = [false; NUM_CLASSES];
                for (c, f) in label_fields.iter().enumerate() {
                    flags[c] = match *f {
                        "0" => false,
                        "1" => true,
                        other => {
                            return Err(err(format!("label `{other}` for {} is not 0/1", Class::ALL[c])))
                        }
                    };
                }
                Some(LabelVector(flags))
            };
            let provenance = with_provenance
                .then(|| fields[expected - 1])
                .filter(|p| !p.is_empty())
                .map(str::to_string);
            rows.push(SliceRecord {
                series_id: fields[0].to_string(),
                slice_index,
                split,
                labels,
                provenance,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn distinct_ids<'a>(rows: impl Iterator<Item = &'a SliceRecord>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    rows.filter(|r| seen.insert(r.series_id.as_str()))
        .map(|r| r.series_id.clone())
        .collect()
}

/// A preprocessed series with per-slice labels, ready for training.
#[derive(Clone, Debug)]
pub struct LabeledSeries {
    pub batch: SeriesBatch,
    pub labels: Vec<LabelVector>,
}

impl LabeledSeries {
    pub fn new(batch: SeriesBatch, labels: Vec<LabelVector>) -> Result<Self> {
        if labels.len() != batch.num_slices {
            return Err(Error::Data(format!(
                "series {} has {} slices but {} label rows",
                batch.series_id,
                batch.num_slices,
                labels.len()
            )));
        }
        Ok(Self { batch, labels })
    }

    pub fn series_id(&self) -> &str {
        &self.batch.series_id
    }
}

/// Positive counts per class and total slice count over a labeled set.
pub fn label_stats(series: &[LabeledSeries]) -> ([usize; NUM_CLASSES], usize) {
    let mut pos = [0usize; NUM_CLASSES];
    let mut n = 0;
    for s in series {
        for l in &s.labels {
            n += 1;
            for (p, &b) in pos.iter_mut().zip(&l.0) {
                *p += usize::from(b);
            }
        }
    }
    (pos, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_blank_labels() {
        let m = Manifest {
            rows: vec![
                SliceRecord {
                    series_id: "S1".into(),
                    slice_index: 0,
                    split: Split::Train,
                    labels: Some(LabelVector::from_subtypes([true, false, false, false, false])),
                    provenance: None,
                },
                SliceRecord {
                    series_id: "S2".into(),
                    slice_index: 0,
                    split: Split::Unlabeled,
                    labels: None,
                    provenance: None,
                },
            ],
        };
        let text = m.to_csv();
        assert!(text.contains("S2,0,unlabeled,,,,,,\n"));
        assert_eq!(Manifest::parse(&text, Path::new("m")).unwrap(), m);
        assert_eq!(m.labels_by_series().len(), 1);
    }

    #[test]
    fn rejects_bad_rows() {
        let bad = format!("{LABEL_HEADER}\nS1,0,train,1,0,0,0,0\n");
        assert!(Manifest::parse(&bad, Path::new("m")).is_err());
        let bad = format!("{LABEL_HEADER}\nS1,0,train,1,0,0,0,0,2\n");
        assert!(Manifest::parse(&bad, Path::new("m")).is_err());
        assert!(Manifest::parse("nope\n", Path::new("m")).is_err());
    }
}
