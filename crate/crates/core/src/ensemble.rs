//! Prediction tables, the weighted multi-label log-loss, rank-weighted
//! ensembling and confidence snapping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::labels::{Class, LabelVector, NUM_CLASSES};

/// `(series_id, slice_index)`.
pub type SliceKey = (String, usize);

/// Per-slice probabilities for all six classes, ordered by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionTable {
    rows: BTreeMap<SliceKey, [f64; NUM_CLASSES]>,
}

impl PredictionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts one slice; probabilities must lie in `[0, 1]` and the key must
    /// be new.
    pub fn insert(&mut self, series_id: &str, slice_index: usize, probs: [f64; NUM_CLASSES]) -> Result<()> {
        validate_id(series_id)?;
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!(
                "probability {p} for {series_id} slice {slice_index} is outside [0, 1]"
            )));
        }
        if self.rows.insert((series_id.to_string(), slice_index), probs).is_some() {
            return Err(Error::Data(format!("duplicate prediction for {series_id} slice {slice_index}")));
        }
        Ok(())
    }

    /// Adds per-slice predictions for a whole series, slices `0..N`.
    pub fn insert_series(&mut self, series_id: &str, probs: &[[f64; NUM_CLASSES]]) -> Result<()> {
        probs
            .iter()
            .enumerate()
            .try_for_each(|(i, p)| self.insert(series_id, i, *p))
    }

    pub fn get(&self, series_id: &str, slice_index: usize) -> Option<&[f64; NUM_CLASSES]> {
        self.rows.get(&(series_id.to_string(), slice_index))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SliceKey, &[f64; NUM_CLASSES])> {
        self.rows.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &SliceKey> {
        self.rows.keys()
    }

    /// Rows grouped per series, slices ascending.
    pub fn by_series(&self) -> BTreeMap<&str, Vec<(usize, &[f64; NUM_CLASSES])>> {
        let mut out: BTreeMap<&str, Vec<_>> = BTreeMap::new();
        for ((s, i), p) in &self.rows {
            out.entry(s.as_str()).or_default().push((*i, p));
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PredictionTable {
        PredictionTable {
            rows: self
                .rows
                .iter()
                .map(|(k, p)| (k.clone(), p.map(&f)))
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ID,Label\n");
        for ((series, slice), probs) in &self.rows {
            for class in Class::ALL {
                writeln!(out, "ID_{series}_{slice}_{},{}", class.name(), format_sig6(probs[class.index()]))
                    .expect("writing to a String");
            }
        }
        out
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "ID,Label" => {}
            _ => return Err(Error::parse(source, 1, "expected header `ID,Label`")),
        }
        let mut partial: BTreeMap<SliceKey, [Option<f64>; NUM_CLASSES]> = BTreeMap::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(source, i + 1, m);
            let (id, prob) = line.split_once(',').ok_or_else(|| err("expected `ID,Label`".into()))?;
            let prob: f64 = prob.trim().parse().map_err(|e| err(format!("probability: {e}")))?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(err(format!("probability {prob} is outside [0, 1]")));
            }
            let (series, slice, class) = parse_id(id).ok_or_else(|| err(format!("malformed id `{id}`")))?;
            let slot = &mut partial.entry((series, slice)).or_default()[class.index()];
            if slot.replace(prob).is_some() {
                return Err(err(format!("duplicate id `{id}`")));
            }
        }
        let mut rows = BTreeMap::new();
        for (key, probs) in partial {
            let complete: Option<Vec<f64>> = probs.iter().copied().collect();
            let complete = complete.ok_or_else(|| {
                let missing = probs.iter().position(Option::is_none).expect("some class missing");
                Error::Data(format!(
                    "{}: slice {}_{} lacks class {}",
                    source.display(),
                    key.0,
                    key.1,
                    Class::ALL[missing]
                ))
            })?;
            rows.insert(key, complete.try_into().expect("six classes"));
        }
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn validate_id(series_id: &str) -> Result<()> {
    if series_id.is_empty() || series_id.contains([',', '\n']) {
        return Err(Error::Validation(format!("series id `{series_id}` must be non-empty without commas")));
    }
    Ok(())
}

/// `ID_<series>_<slice>_<class>`; the series id may itself contain `_`.
fn parse_id(id: &str) -> Option<(String, usize, Class)> {
    let rest = id.strip_prefix("ID_")?;
    let (rest, class) = rest.rsplit_once('_')?;
    let (series, slice) = rest.rsplit_once('_')?;
    if series.is_empty() {
        return None;
    }
    Some((series.to_string(), slice.parse().ok()?, Class::from_name(class)?))
}

/// Six significant digits, fixed notation where `%g` would use it.
pub fn format_sig6(p: f64) -> String {
    if p == 0.0 {
        return "0".into();
    }
    let exp = p.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (0.9999996 -> 1).
    let sci = format!("{p:.5e}");
    let exp = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{p:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let (mantissa, e) = sci.split_once('e').expect("scientific format");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        let e: i32 = e.parse().expect("exponent");
        let sign = if e < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", e.abs())
    }
}

/// Ground truth keyed like a prediction table.
pub type Truth = BTreeMap<SliceKey, LabelVector>;

/// Labeled rows of a manifest; unlabeled rows are skipped.
pub fn truth_from_manifest(manifest: &Manifest) -> Truth {
    manifest
        .rows
        .iter()
        .filter_map(|r| r.labels.map(|l| ((r.series_id.clone(), r.slice_index), l)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    /// Per-class weights in [`Class::ALL`] order.
    pub weights: [f64; NUM_CLASSES],
    pub epsilon: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 1.0, 1.0, 1.0, 1.0, 2.0],
            epsilon: 1e-7,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("metric weights must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("metric epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Weighted binary cross-entropy of one slice, normalized by the weight sum.
pub fn slice_logloss(probs: &[f64; NUM_CLASSES], truth: &LabelVector, config: &MetricConfig) -> f64 {
    let eps = config.epsilon;
    let total: f64 = config.weights.iter().sum();
    probs
        .iter()
        .zip(&truth.0)
        .zip(&config.weights)
        .map(|((&p, &y), &w)| {
            let p = p.clamp(eps, 1.0 - eps);
            w * if y { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum::<f64>()
        / total
}

/// Mean [`slice_logloss`] over slices. Key sets must agree exactly.
pub fn weighted_logloss(preds: &PredictionTable, truth: &Truth, config: &MetricConfig) -> Result<f64> {
    config.validate()?;
    if let Some((s, i)) = truth.keys().find(|k| !preds.rows.contains_key(*k)) {
        return Err(Error::Data(format!("no prediction for {s} slice {i}")));
    }
    if let Some((s, i)) = preds.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::Data(format!("no ground truth for {s} slice {i}")));
    }
    if truth.is_empty() {
        return Err(Error::Data("cannot score an empty table".into()));
    }
    let sum: f64 = preds
        .rows
        .iter()
        .map(|(k, p)| slice_logloss(p, &truth[k], config))
        .sum();
    Ok(sum / truth.len() as f64)
}

/// Ensemble structure: leaves are members with a quality rank (1 = best).
#[derive(Clone, Debug, PartialEq)]
pub enum RankTree {
    Member(u32),
    Group(Vec<RankTree>),
}

impl RankTree {
    /// Sum of member ranks, the rank a group carries into its parent.
    pub fn rank(&self) -> u32 {
        match self {
            RankTree::Member(r) => *r,
            RankTree::Group(children) => children.iter().map(RankTree::rank).sum(),
        }
    }

    pub fn members(&self) -> Vec<u32> {
        match self {
            RankTree::Member(r) => vec![*r],
            RankTree::Group(children) => children.iter().flat_map(RankTree::members).collect(),
        }
    }

    /// Parses `((1,2),33)`-style nestings; a bare number is one member.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let tree = parse_tree(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Structure(format!("trailing input in rank tree `{text}`")));
        }
        Ok(tree)
    }
}

fn parse_tree(t: &[char], pos: &mut usize) -> Result<RankTree> {
    let err = |m: &str, at: usize| Error::Structure(format!("rank tree: {m} at position {at}"));
    match t.get(*pos) {
        Some('(') => {
            *pos += 1;
            let mut children = vec![parse_tree(t, pos)?];
            while t.get(*pos) == Some(&',') {
                *pos += 1;
                children.push(parse_tree(t, pos)?);
            }
            if t.get(*pos) != Some(&')') {
                return Err(err("expected `)`", *pos));
            }
            *pos += 1;
            Ok(RankTree::Group(children))
        }
        Some(c) if c.is_ascii_digit() => {
            let start = *pos;
            while t.get(*pos).is_some_and(char::is_ascii_digit) {
                *pos += 1;
            }
            let digits: String = t[start..*pos].iter().collect();
            digits.parse().map(RankTree::Member).map_err(|_| err("bad rank", start))
        }
        _ => Err(err("expected `(` or a rank", *pos)),
    }
}

/// Member weights in left-to-right leaf order.
///
/// Each pair `(a, b)` splits its parent's weight as `1 - rank_a/(rank_a +
/// rank_b)` and `1 - rank_b/(rank_a + rank_b)`, a group's rank being the
/// sum of its members' ranks. Single-child groups pass weight through;
/// larger groups are rejected.
pub fn rank_weights(tree: &RankTree) -> Result<Vec<f64>> {
    let members = tree.members();
    if members.contains(&0) {
        return Err(Error::Structure("ranks start at 1".into()));
    }
    let mut sorted = members.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Structure(format!("member ranks {members:?} are not unique")));
    }
    let mut out = Vec::with_capacity(members.len());
    descend(tree, Ratio(1, 1), &mut out)?;
    Ok(out)
}

/// Exact fraction, so every weight is a single correctly rounded division.
#[derive(Clone, Copy)]
struct Ratio(u128, u128);

impl Ratio {
    fn mul(self, num: u128, den: u128) -> Result<Ratio> {
        let overflow = || Error::Structure("rank tree too deep for exact weights".into());
        let n = self.0.checked_mul(num).ok_or_else(overflow)?;
        let d = self.1.checked_mul(den).ok_or_else(overflow)?;
        let g = gcd(n, d).max(1);
        Ok(Ratio(n / g, d / g))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn descend(tree: &RankTree, weight: Ratio, out: &mut Vec<f64>) -> Result<()> {
    match tree {
        RankTree::Member(_) => out.push(weight.0 as f64 / weight.1 as f64),
        RankTree::Group(children) => match children.as_slice() {
            [only] => descend(only, weight, out)?,
            [a, b] => {
                let (ra, rb) = (u128::from(a.rank()), u128::from(b.rank()));
                let total = ra + rb;
                descend(a, weight.mul(total - ra, total)?, out)?;
                descend(b, weight.mul(total - rb, total)?, out)?;
            }
            other => {
                return Err(Error::Structure(format!(
                    "groups must hold exactly 2 entries, found {}",
                    other.len()
                )))
            }
        },
    }
    Ok(())
}

/// Per-key weighted mean of member tables.
pub fn ensemble_average(tables: &[&PredictionTable], weights: &[f64]) -> Result<PredictionTable> {
    if tables.is_empty() || tables.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} tables and {} weights",
            tables.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Validation(format!("weights {weights:?} must be non-negative and sum to 1")));
    }
    for (i, t) in tables.iter().enumerate().skip(1) {
        if let Some((s, k)) = t.keys().find(|k| !tables[0].rows.contains_key(*k)) {
            return Err(Error::Data(format!("member {i} has {s} slice {k} missing from member 0")));
        }
        if let Some((s, k)) = tables[0].keys().find(|k| !t.rows.contains_key(*k)) {
            return Err(Error::Data(format!("member {i} lacks {s} slice {k}")));
        }
    }
    let rows = tables[0]
        .rows
        .keys()
        .map(|key| {
            let mut acc = [0.0; NUM_CLASSES];
            for (t, w) in tables.iter().zip(weights) {
                for (a, p) in acc.iter_mut().zip(&t.rows[key]) {
                    *a += w * p;
                }
            }
            (key.clone(), acc.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect();
    Ok(PredictionTable { rows })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapConfig {
    pub tau_h: f64,
    pub tau_l: f64,
    pub epsilon: f64,
}

impl Default for SnapConfig {
    fn default() -> Self {
        Self {
            tau_h: 0.97,
            tau_l: 0.03,
            epsilon: 1e-7,
        }
    }
}

/// `p > tau_h` becomes `1 - eps`, `p < tau_l` becomes `eps`.
pub fn threshold_snap(table: &PredictionTable, config: &SnapConfig) -> Result<PredictionTable> {
    let SnapConfig { tau_h, tau_l, epsilon } = *config;
    if !(0.0 < tau_l && tau_l < tau_h && tau_h < 1.0) {
        return Err(Error::Config(format!("need 0 < tau_l ({tau_l}) < tau_h ({tau_h}) < 1")));
    }
    if !(epsilon > 0.0 && epsilon < tau_l && 1.0 - epsilon > tau_h) {
        return Err(Error::Config(format!("snap epsilon {epsilon} must lie outside the thresholds")));
    }
    Ok(table.map(|p| {
        if p > tau_h {
            1.0 - epsilon
        } else if p < tau_l {
            epsilon
        } else {
            p
        }
    }))
}
