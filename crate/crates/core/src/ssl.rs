//! Semi-supervised rounds: the zoo's ensemble labels unlabeled series, the
//! confidently predicted ones are binarized into pseudo labels, a new model
//! trains on labeled plus pseudo-labeled data and may replace the zoo's
//! weakest member.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::{LabeledSeries, Manifest, SliceRecord, Split};
use crate::ensemble::{ensemble_average, rank_weights, MetricConfig, PredictionTable, RankTree};
use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};
use crate::labels::{LabelVector, NUM_CLASSES};
use crate::model::Model;
use crate::preprocess::SeriesBatch;
use crate::training::{evaluate, fit, predict_table, FitReport, TrainConfig};

pub use crate::training::unlabeled_loss;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslConfig {
    /// Series gate: every slice and class must be more confident than this.
    pub tau_s: f64,
    /// Binarization threshold for pseudo labels.
    pub tau_p: f64,
    pub rounds: usize,
    /// Early stop once both the selection and the validation loss settle.
    pub tolerance: f64,
    /// Start the new model from the best zoo member instead of fresh weights.
    pub warm_start: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.9,
            tau_p: 0.5,
            rounds: 1,
            tolerance: 1e-4,
            warm_start: false,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.5 && self.tau_s < 1.0) {
            return Err(Error::Config(format!("tau_s {} must lie in (0.5, 1)", self.tau_s)));
        }
        if !(self.tau_p > 0.0 && self.tau_p < 1.0) {
            return Err(Error::Config(format!("tau_p {} must lie in (0, 1)", self.tau_p)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("tau_s", self.tau_s.to_string()),
            ("tau_p", self.tau_p.to_string()),
            ("rounds", self.rounds.to_string()),
            ("tolerance", self.tolerance.to_string()),
            ("warm_start", self.warm_start.to_string()),
        ])
    }

    pub fn from_kv(kv: &KeyValues, base: &SslConfig) -> Result<Self> {
        let c = Self {
            tau_s: kv.get_or("tau_s", base.tau_s)?,
            tau_p: kv.get_or("tau_p", base.tau_p)?,
            rounds: kv.get_or("rounds", base.rounds)?,
            tolerance: kv.get_or("tolerance", base.tolerance)?,
            warm_start: kv.get_or("warm_start", base.warm_start)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// `max(p, 1 - p)`.
pub fn confidence(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("probability {p} is outside [0, 1]")));
    }
    Ok(p.max(1.0 - p))
}

/// Minimum confidence over all slices and classes of each series. Slices of
/// a series must be numbered `0..n` without gaps.
pub fn series_confidence(table: &PredictionTable) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (series, rows) in table.by_series() {
        if let Some((pos, (idx, _))) = rows.iter().enumerate().find(|(pos, (idx, _))| pos != idx) {
            return Err(Error::Data(format!(
                "series {series} has slice {idx} where slice {pos} was expected"
            )));
        }
        let mut min = 1.0f64;
        for (_, probs) in rows {
            for &p in probs.iter() {
                min = min.min(confidence(p)?);
            }
        }
        out.insert(series.to_string(), min);
    }
    Ok(out)
}

/// Series whose minimum confidence is strictly above `tau_s`, in id order.
pub fn select_series(table: &PredictionTable, tau_s: f64) -> Result<Vec<String>> {
    Ok(series_confidence(table)?
        .into_iter()
        .filter(|(_, c)| *c > tau_s)
        .map(|(s, _)| s)
        .collect())
}

/// `1` where `p > tau_p`. Each column is thresholded on its own, so `any`
/// follows the ensemble's `any` probability.
pub fn binarize(probs: &[f64; NUM_CLASSES], tau_p: f64) -> LabelVector {
    LabelVector(probs.map(|p| p > tau_p))
}

/// Pseudo labels for the selected series, with where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSet {
    pub round: usize,
    pub provenance: String,
    pub series: BTreeMap<String, Vec<LabelVector>>,
}

impl PseudoLabeledSet {
    pub fn from_table(table: &PredictionTable, selected: &[String], tau_p: f64, round: usize, provenance: &str) -> Self {
        let grouped = table.by_series();
        let series = selected
            .iter()
            .filter_map(|id| {
                grouped
                    .get(id.as_str())
                    .map(|rows| (id.clone(), rows.iter().map(|(_, p)| binarize(p, tau_p)).collect()))
            })
            .collect();
        Self {
            round,
            provenance: provenance.to_string(),
            series,
        }
    }

    /// Positive fraction per class over all pseudo-labeled slices.
    pub fn prevalence(&self) -> [f64; NUM_CLASSES] {
        let mut pos = [0usize; NUM_CLASSES];
        let mut n = 0usize;
        for l in self.series.values().flatten() {
            n += 1;
            for (p, &b) in pos.iter_mut().zip(&l.0) {
                *p += usize::from(b);
            }
        }
        pos.map(|p| if n == 0 { 0.0 } else { p as f64 / n as f64 })
    }

    pub fn to_manifest(&self) -> Manifest {
        // Commas would split the manifest column.
        let provenance = format!("{};round={}", self.provenance, self.round).replace(',', ";");
        Manifest {
            rows: self
                .series
                .iter()
                .flat_map(|(id, labels)| {
                    labels.iter().enumerate().map(|(i, l)| SliceRecord {
                        series_id: id.clone(),
                        slice_index: i,
                        split: Split::Unlabeled,
                        labels: Some(*l),
                        provenance: Some(provenance.clone()),
                    })
                })
                .collect(),
        }
    }

    /// Pairs pseudo labels with their preprocessed series.
    pub fn attach(&self, unlabeled: &[SeriesBatch]) -> Result<Vec<LabeledSeries>> {
        unlabeled
            .iter()
            .filter_map(|b| self.series.get(&b.series_id).map(|l| LabeledSeries::new(b.clone(), l.clone())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ZooMember {
    pub name: String,
    pub rank: u32,
    pub model: Model,
}

/// Ensemble members and the rank nesting that weights them.
#[derive(Clone, Debug)]
pub struct Zoo {
    pub members: Vec<ZooMember>,
    /// Nesting over member ranks; `None` nests by ascending rank,
    /// `((r1, r2), r3)...`.
    pub tree: Option<RankTree>,
}

impl Zoo {
    pub fn new(members: Vec<ZooMember>, tree: Option<RankTree>) -> Result<Self> {
        let zoo = Self { members, tree };
        zoo.weights()?;
        Ok(zoo)
    }

    fn effective_tree(&self) -> Result<RankTree> {
        if let Some(t) = &self.tree {
            return Ok(t.clone());
        }
        let mut ranks: Vec<u32> = self.members.iter().map(|m| m.rank).collect();
        ranks.sort_unstable();
        let mut it = ranks.into_iter();
        let first = it.next().ok_or_else(|| Error::Structure("the zoo is empty".into()))?;
        Ok(it.fold(RankTree::Member(first), |acc, r| RankTree::Group(vec![acc, RankTree::Member(r)])))
    }

    /// Weight per member, in member order.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let tree = self.effective_tree()?;
        let leaves = tree.members();
        let weights = rank_weights(&tree)?;
        let mut sorted_members: Vec<u32> = self.members.iter().map(|m| m.rank).collect();
        let mut sorted_leaves = leaves.clone();
        sorted_members.sort_unstable();
        sorted_leaves.sort_unstable();
        if sorted_members != sorted_leaves {
            return Err(Error::Structure(format!(
                "tree ranks {leaves:?} do not match member ranks {sorted_members:?}"
            )));
        }
        Ok(self
            .members
            .iter()
            .map(|m| weights[leaves.iter().position(|&r| r == m.rank).expect("rank present")])
            .collect())
    }

    /// Rank-weighted average of member predictions.
    pub fn predict(&self, series: &[&SeriesBatch]) -> Result<PredictionTable> {
        let tables = self
            .members
            .iter()
            .map(|m| predict_table(&m.model, series))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PredictionTable> = tables.iter().collect();
        ensemble_average(&refs, &self.weights()?)
    }

    pub fn describe(&self) -> String {
        let mut parts: Vec<String> = self.members.iter().map(|m| format!("{}#{}", m.name, m.rank)).collect();
        parts.sort();
        format!("ensemble[{}]", parts.join("+"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRow {
    pub series_id: String,
    pub min_confidence: f64,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct Replacement {
    pub replaced: String,
    pub replaced_loss: f64,
}

#[derive(Clone, Debug)]
pub struct SslRoundReport {
    pub round: usize,
    pub selection: Vec<SelectionRow>,
    pub pseudo: PseudoLabeledSet,
    pub prevalence: [f64; NUM_CLASSES],
    /// Validation loss of each member before the round, in member order.
    pub member_losses: Vec<f64>,
    pub new_model_loss: Option<f64>,
    pub replacement: Option<Replacement>,
    pub fit: FitReport,
    pub warning: Option<String>,
}

impl SslRoundReport {
    pub fn num_selected(&self) -> usize {
        self.selection.iter().filter(|r| r.selected).count()
    }
}

pub fn selection_csv(reports: &[SslRoundReport]) -> String {
    let mut out = String::from("round,series_id,min_confidence,selected\n");
    for r in reports {
        for row in &r.selection {
            writeln!(
                out,
                "{},{},{},{}",
                r.round,
                row.series_id,
                row.min_confidence,
                u8::from(row.selected)
            )
            .expect("writing to a String");
        }
    }
    out
}

pub struct SslRoundOutput {
    pub model: Model,
    pub ensemble: PredictionTable,
    pub report: SslRoundReport,
}

/// One cycle. The unlabeled series enter only as images; their hidden
/// labels are never seen. `zoo` is updated in place when the new model
/// beats its weakest member on `validation`.
#[allow(clippy::too_many_arguments)]
pub fn ssl_round(
    zoo: &mut Zoo,
    labeled: &[LabeledSeries],
    unlabeled: &[SeriesBatch],
    validation: &[LabeledSeries],
    ssl: &SslConfig,
    train: &TrainConfig,
    round: usize,
) -> Result<SslRoundOutput> {
    ssl.validate()?;
    let refs: Vec<&SeriesBatch> = unlabeled.iter().collect();
    let ensemble = zoo.predict(&refs)?;
    let scores = series_confidence(&ensemble)?;
    let selection: Vec<SelectionRow> = scores
        .iter()
        .map(|(id, &c)| SelectionRow {
            series_id: id.clone(),
            min_confidence: c,
            selected: c > ssl.tau_s,
        })
        .collect();
    let selected: Vec<String> = selection.iter().filter(|r| r.selected).map(|r| r.series_id.clone()).collect();
    let pseudo = PseudoLabeledSet::from_table(&ensemble, &selected, ssl.tau_p, round, &zoo.describe());
    let warning = selected.is_empty().then(|| {
        format!(
            "round {round}: no series passed tau_s = {}; training on labeled data only",
            ssl.tau_s
        )
    });
    let pseudo_series = pseudo.attach(unlabeled)?;

    let best = (0..zoo.members.len())
        .min_by_key(|&i| zoo.members[i].rank)
        .expect("validated zoo is non-empty");
    let mut model = if ssl.warm_start {
        zoo.members[best].model.clone()
    } else {
        let mut config = zoo.members[best].model.config().clone();
        config.init_seed = train.seed.wrapping_add(round as u64);
        Model::new(config)?
    };
    let fit_report = fit(&mut model, labeled, &pseudo_series, validation, train)?;

    let metric = MetricConfig::default();
    let (member_losses, new_model_loss, replacement) = if validation.is_empty() {
        (Vec::new(), None, None)
    } else {
        let losses = zoo
            .members
            .iter()
            .map(|m| evaluate(&m.model, validation, &metric))
            .collect::<Result<Vec<_>>>()?;
        let new_loss = evaluate(&model, validation, &metric)?;
        let worst = (0..losses.len())
            .max_by(|&a, &b| losses[a].total_cmp(&losses[b]))
            .expect("non-empty zoo");
        let replacement = (new_loss < losses[worst]).then(|| {
            let old = std::mem::replace(
                &mut zoo.members[worst],
                ZooMember {
                    name: format!("ssl-round-{round}"),
                    rank: 0,
                    model: model.clone(),
                },
            );
            let mut all = losses.clone();
            all[worst] = new_loss;
            rerank(zoo, &all);
            Replacement {
                replaced: old.name,
                replaced_loss: losses[worst],
            }
        });
        (losses, Some(new_loss), replacement)
    };

    let report = SslRoundReport {
        round,
        prevalence: pseudo.prevalence(),
        selection,
        pseudo,
        member_losses,
        new_model_loss,
        replacement,
        fit: fit_report,
        warning,
    };
    Ok(SslRoundOutput { model, ensemble, report })
}

/// Hands out the zoo's existing rank values by ascending validation loss,
/// so the nesting keeps its leaves.
fn rerank(zoo: &mut Zoo, losses: &[f64]) {
    let mut ranks: Vec<u32> = zoo.members.iter().map(|m| m.rank).collect();
    ranks.sort_unstable();
    // The incoming member carries rank 0; give it the rank it displaced.
    if ranks[0] == 0 {
        let used: Vec<u32> = ranks[1..].to_vec();
        let all = zoo.tree.as_ref().map(RankTree::members).unwrap_or_else(|| {
            let mut r = used.clone();
            r.push(used.iter().max().map_or(1, |m| m + 1));
            r
        });
        let missing = all.into_iter().find(|r| !used.contains(r)).unwrap_or(1);
        ranks[0] = missing;
        ranks.sort_unstable();
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    for (pos, &i) in order.iter().enumerate() {
        zoo.members[i].rank = ranks[pos];
    }
}

/// Repeats [`ssl_round`] up to `ssl.rounds` times, stopping early once the
/// selected set is unchanged and the new model's validation loss moved by
/// less than `ssl.tolerance`.
pub fn run_ssl(
    zoo: &mut Zoo,
    labeled: &[LabeledSeries],
    unlabeled: &[SeriesBatch],
    validation: &[LabeledSeries],
    ssl: &SslConfig,
    train: &TrainConfig,
) -> Result<Vec<SslRoundOutput>> {
    let mut outputs: Vec<SslRoundOutput> = Vec::new();
    for round in 0..ssl.rounds {
        let mut cfg = train.clone();
        cfg.seed = train.seed.wrapping_add(round as u64);
        let out = ssl_round(zoo, labeled, unlabeled, validation, ssl, &cfg, round)?;
        let settled = outputs.last().is_some_and(|prev| {
            let same_selection = prev.report.pseudo.series.keys().eq(out.report.pseudo.series.keys());
            let loss_delta = match (prev.report.new_model_loss, out.report.new_model_loss) {
                (Some(a), Some(b)) => (a - b).abs(),
                _ => 0.0,
            };
            same_selection && loss_delta < ssl.tolerance
        });
        outputs.push(out);
        if settled {
            break;
        }
    }
    Ok(outputs)
}
