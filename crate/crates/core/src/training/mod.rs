//! Supervised and pseudo-labeled optimization: class weighting, the
//! learning-rate schedule, losses, single steps and the training loop.

mod augment;

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use ihd_autodiff::{sgd_update, DenseArray, Tape, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{label_stats, LabeledSeries};
use crate::ensemble::{weighted_logloss, MetricConfig, PredictionTable, Truth};
use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};
use crate::labels::{LabelVector, NUM_CLASSES};
use crate::model::{LogitsPair, Model};
use crate::preprocess::SeriesBatch;

pub use augment::{apply_augment, AugmentKind, AugmentPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Static,
    Dynamic,
    Both,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Static => "static",
            WeightMode::Dynamic => "dynamic",
            WeightMode::Both => "both",
        })
    }
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "static" => Ok(WeightMode::Static),
            "dynamic" => Ok(WeightMode::Dynamic),
            "both" => Ok(WeightMode::Both),
            other => Err(format!("unknown weight mode `{other}` (static, dynamic, both)")),
        }
    }
}

/// `w_c = clamp((p̄ / p_c)^alpha, min, max)`, then rescaled to mean 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicWeighting {
    pub alpha: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for DynamicWeighting {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            min: 0.5,
            max: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub weight_mode: WeightMode,
    /// Per-class weights in label order, `any` last.
    pub static_weights: [f64; NUM_CLASSES],
    pub dynamic: DynamicWeighting,
    /// Weight of the pseudo-label loss.
    pub lambda_u: f64,
    pub seed: u64,
    /// Trains the auxiliary head on the intra-slice features.
    pub deep_supervision: bool,
    pub augment: AugmentKind,
    pub pseudo_augment: AugmentKind,
    /// Pseudo-labeled steps per labeled step, when pseudo data is present.
    pub unlabeled_ratio: usize,
    /// Validation period in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 80_000,
            warmup: 300,
            peak_lr: 0.001,
            weight_mode: WeightMode::Static,
            static_weights: [1.0, 1.0, 1.0, 1.0, 1.0, 2.0],
            dynamic: DynamicWeighting::default(),
            lambda_u: 1.0,
            seed: 0,
            deep_supervision: true,
            augment: AugmentKind::Weak,
            pseudo_augment: AugmentKind::Strong,
            unlabeled_ratio: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations > 0 && self.warmup >= self.iterations {
            return bad(format!("warmup {} must be below iterations {}", self.warmup, self.iterations));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be a non-negative number", self.peak_lr));
        }
        if self.static_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("static weights must be positive".into());
        }
        let d = self.dynamic;
        if !(d.alpha >= 0.0 && d.min > 0.0 && d.min <= d.max && d.max.is_finite()) {
            return bad(format!("dynamic weighting {d:?} is invalid"));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!("lambda_u {} must be non-negative", self.lambda_u));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("iterations", self.iterations.to_string()),
            ("warmup", self.warmup.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("weight_mode", self.weight_mode.to_string()),
            ("static_weights", kv::join(&self.static_weights)),
            ("dw_alpha", self.dynamic.alpha.to_string()),
            ("dw_min", self.dynamic.min.to_string()),
            ("dw_max", self.dynamic.max.to_string()),
            ("lambda_u", self.lambda_u.to_string()),
            ("seed", self.seed.to_string()),
            ("deep_supervision", self.deep_supervision.to_string()),
            ("augment", self.augment.to_string()),
            ("pseudo_augment", self.pseudo_augment.to_string()),
            ("unlabeled_ratio", self.unlabeled_ratio.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ])
    }

    /// Keys absent from `kv` keep the values of `base`.
    pub fn from_kv(kv: &KeyValues, base: &TrainConfig) -> Result<Self> {
        let static_weights = match kv.get_list::<f64>("static_weights")? {
            None => base.static_weights,
            Some(v) => v
                .try_into()
                .map_err(|v: Vec<f64>| Error::Config(format!("static_weights needs 6 values, got {}", v.len())))?,
        };
        let c = Self {
            iterations: kv.get_or("iterations", base.iterations)?,
            warmup: kv.get_or("warmup", base.warmup)?,
            peak_lr: kv.get_or("peak_lr", base.peak_lr)?,
            weight_mode: kv.get_or("weight_mode", base.weight_mode)?,
            static_weights,
            dynamic: DynamicWeighting {
                alpha: kv.get_or("dw_alpha", base.dynamic.alpha)?,
                min: kv.get_or("dw_min", base.dynamic.min)?,
                max: kv.get_or("dw_max", base.dynamic.max)?,
            },
            lambda_u: kv.get_or("lambda_u", base.lambda_u)?,
            seed: kv.get_or("seed", base.seed)?,
            deep_supervision: kv.get_or("deep_supervision", base.deep_supervision)?,
            augment: kv.get_or("augment", base.augment)?,
            pseudo_augment: kv.get_or("pseudo_augment", base.pseudo_augment)?,
            unlabeled_ratio: kv.get_or("unlabeled_ratio", base.unlabeled_ratio)?,
            eval_every: kv.get_or("eval_every", base.eval_every)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Loss weights for one mode given positive counts over `n` slices.
pub fn class_weights(
    mode: WeightMode,
    static_weights: &[f64; NUM_CLASSES],
    dynamic: &DynamicWeighting,
    positives: &[usize; NUM_CLASSES],
    n: usize,
) -> [f64; NUM_CLASSES] {
    let dynamic_weights = || {
        let p = positives.map(|pos| (pos as f64 + 1.0) / (n as f64 + 2.0));
        let mean = p.iter().sum::<f64>() / NUM_CLASSES as f64;
        let w = p.map(|pc| (mean / pc).powf(dynamic.alpha).clamp(dynamic.min, dynamic.max));
        let wm = w.iter().sum::<f64>() / NUM_CLASSES as f64;
        w.map(|v| v / wm)
    };
    match mode {
        WeightMode::Static => *static_weights,
        WeightMode::Dynamic => dynamic_weights(),
        WeightMode::Both => {
            let d = dynamic_weights();
            std::array::from_fn(|c| static_weights[c] * d[c])
        }
    }
}

/// Linear warmup from 0, then cosine decay to 0 at `iterations`.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    let (t, w, total) = (iteration.min(config.iterations), config.warmup, config.iterations);
    if t < w {
        config.peak_lr * t as f64 / w as f64
    } else if total == w {
        0.0
    } else {
        let progress = (t - w) as f64 / (total - w) as f64;
        config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    /// Auxiliary head.
    pub l1: f64,
    /// Main head.
    pub l2: f64,
    /// Pseudo-label loss, before `lambda_u`.
    pub lu: f64,
    pub total: f64,
}

/// `[N, 6]` targets.
pub fn label_array(labels: &[LabelVector]) -> DenseArray {
    let data = labels.iter().flat_map(LabelVector::as_f64).collect();
    DenseArray::new(vec![labels.len(), NUM_CLASSES], data).expect("six columns per label")
}

/// Weighted BCE on both heads; with deep supervision off only the main head
/// contributes and `total` is the main-head loss itself.
pub fn supervised_loss(
    tape: &Tape,
    logits: &LogitsPair,
    labels: &[LabelVector],
    weights: &[f64; NUM_CLASSES],
    deep_supervision: bool,
) -> Result<(Var, LossBundle)> {
    let targets = label_array(labels);
    let l2 = tape.bce_with_logits(&logits.main, &targets, weights)?;
    let l2v = scalar(&l2);
    if !deep_supervision {
        return Ok((l2, LossBundle { l2: l2v, total: l2v, ..LossBundle::default() }));
    }
    let l1 = tape.bce_with_logits(&logits.aux, &targets, weights)?;
    let total = tape.add(&l1, &l2)?;
    let bundle = LossBundle {
        l1: scalar(&l1),
        l2: l2v,
        lu: 0.0,
        total: scalar(&total),
    };
    Ok((total, bundle))
}

/// Main-head BCE against pseudo labels on a strongly augmented copy.
#[allow(clippy::too_many_arguments)]
pub fn unlabeled_loss(
    model: &Model,
    tape: &Tape,
    vars: &[Var],
    batch: &SeriesBatch,
    pseudo: &[LabelVector],
    policy: &AugmentPolicy,
    weights: &[f64; NUM_CLASSES],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if pseudo.len() != batch.num_slices {
        return Err(Error::Data(format!(
            "series {} has {} slices but {} pseudo labels",
            batch.series_id,
            batch.num_slices,
            pseudo.len()
        )));
    }
    let augmented = apply_augment(batch, policy, rng)?;
    let out = model.forward(tape, vars, &augmented)?;
    Ok(tape.bce_with_logits(&out.logits.main, &label_array(pseudo), weights)?)
}

fn scalar(v: &Var) -> f64 {
    v.value().item().expect("loss is a scalar")
}

/// What one optimization step trains on.
#[derive(Clone, Copy, Debug)]
pub enum StepData<'a> {
    Labeled(&'a LabeledSeries),
    /// A series whose labels are binarized ensemble predictions.
    Pseudo(&'a LabeledSeries),
}

/// Forward, loss, backward through both extractors and one SGD update at
/// `lr_at(iteration)`.
pub fn train_step(
    model: &mut Model,
    data: StepData<'_>,
    config: &TrainConfig,
    weights: &[f64; NUM_CLASSES],
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBundle> {
    let fail = |message: String| Error::Training { iteration, message };
    let non_finite = |e: Error| match e {
        Error::Tensor(TensorError::NonFinite { op }) => fail(format!("non-finite values in {op}")),
        other => other,
    };
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let (loss, bundle) = match data {
        StepData::Labeled(series) => {
            let batch = apply_augment(&series.batch, &config.augment.policy(), rng)?;
            let out = model.forward(&tape, &vars, &batch).map_err(non_finite)?;
            supervised_loss(&tape, &out.logits, &series.labels, weights, config.deep_supervision).map_err(non_finite)?
        }
        StepData::Pseudo(series) => {
            let policy = config.pseudo_augment.policy();
            let lu = unlabeled_loss(model, &tape, &vars, &series.batch, &series.labels, &policy, weights, rng)
                .map_err(non_finite)?;
            let total = tape.scale(&lu, config.lambda_u);
            let bundle = LossBundle {
                lu: scalar(&lu),
                total: scalar(&total),
                ..LossBundle::default()
            };
            (total, bundle)
        }
    };
    if !bundle.total.is_finite() {
        return Err(fail(format!("loss is {}", bundle.total)));
    }
    let grads = tape.backward(&loss)?;
    let grads = model.params.collect_grads(&vars, &grads);
    sgd_update(&mut model.params, &grads, lr_at(iteration, config))?;
    if !model.params.is_finite() {
        return Err(fail("parameters became non-finite".into()));
    }
    Ok(bundle)
}

/// Head-2 probabilities for every slice of every series.
pub fn predict_table(model: &Model, series: &[&SeriesBatch]) -> Result<PredictionTable> {
    let mut table = PredictionTable::new();
    for batch in series {
        table.insert_series(&batch.series_id, &model.predict(batch)?)?;
    }
    Ok(table)
}

pub fn truth_of(series: &[LabeledSeries]) -> Truth {
    series
        .iter()
        .flat_map(|s| {
            s.labels
                .iter()
                .enumerate()
                .map(|(i, l)| ((s.series_id().to_string(), i), *l))
        })
        .collect()
}

/// Weighted log-loss of the model's predictions on labeled series.
pub fn evaluate(model: &Model, series: &[LabeledSeries], metric: &MetricConfig) -> Result<f64> {
    let batches: Vec<&SeriesBatch> = series.iter().map(|s| &s.batch).collect();
    weighted_logloss(&predict_table(model, &batches)?, &truth_of(series), metric)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: LossBundle,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub history: Vec<HistoryRow>,
    /// `(iterations completed, validation loss)`.
    pub validations: Vec<(usize, f64)>,
    /// The validation point whose parameters the model now holds.
    pub best: Option<(usize, f64)>,
    pub class_weights: [f64; NUM_CLASSES],
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,L1,L2,Lu,total,lr\n");
    for r in history {
        let l = r.loss;
        writeln!(out, "{},{},{},{},{},{}", r.iteration, l.l1, l.l2, l.lu, l.total, r.lr).expect("writing to a String");
    }
    out
}

/// Independent rng streams per purpose and index.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const SHUFFLE_LABELED: u64 = 1;
const SHUFFLE_PSEUDO: u64 = 2;
const STEP: u64 = 3;

/// Endless epoch-shuffled cycle over `0..n`.
struct EpochOrder {
    n: usize,
    seed: u64,
    purpose: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochOrder {
    fn new(n: usize, seed: u64, purpose: u64) -> Self {
        Self {
            n,
            seed,
            purpose,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut stream_rng(self.seed, self.purpose, self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains for `config.iterations` steps, one series per step.
///
/// Labeled series are visited in shuffled epochs; when `pseudo` is
/// non-empty, each labeled step is followed by `unlabeled_ratio` pseudo
/// steps. With a validation set, the parameters with the lowest validation
/// loss are restored at the end.
pub fn fit(
    model: &mut Model,
    labeled: &[LabeledSeries],
    pseudo: &[LabeledSeries],
    validation: &[LabeledSeries],
    config: &TrainConfig,
) -> Result<FitReport> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("no labeled training series".into()));
    }
    let (positives, n) = label_stats(labeled);
    let weights = class_weights(config.weight_mode, &config.static_weights, &config.dynamic, &positives, n);
    let mut report = FitReport {
        class_weights: weights,
        ..FitReport::default()
    };
    let metric = MetricConfig::default();
    let mut labeled_order = EpochOrder::new(labeled.len(), config.seed, SHUFFLE_LABELED);
    let mut pseudo_order = EpochOrder::new(pseudo.len(), config.seed, SHUFFLE_PSEUDO);
    let cycle = if pseudo.is_empty() { 1 } else { 1 + config.unlabeled_ratio };
    let mut best_params = None;

    for t in 0..config.iterations {
        let data = if t % cycle == 0 {
            StepData::Labeled(&labeled[labeled_order.next()])
        } else {
            StepData::Pseudo(&pseudo[pseudo_order.next()])
        };
        let mut rng = stream_rng(config.seed, STEP, t as u64);
        let loss = train_step(model, data, config, &weights, t, &mut rng)?;
        report.history.push(HistoryRow {
            iteration: t,
            loss,
            lr: lr_at(t, config),
        });
        let done = t + 1;
        let due = (config.eval_every > 0 && done % config.eval_every == 0) || done == config.iterations;
        if due && !validation.is_empty() {
            let v = evaluate(model, validation, &metric)?;
            report.validations.push((done, v));
            if report.best.is_none_or(|(_, b)| v < b) {
                report.best = Some((done, v));
                best_params = Some(model.params.clone());
            }
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_kv() {
        let c = TrainConfig {
            iterations: 50,
            warmup: 5,
            weight_mode: WeightMode::Both,
            static_weights: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            augment: AugmentKind::None,
            ..TrainConfig::default()
        };
        let kv = KeyValues::parse(&c.to_kv(), "t").unwrap();
        assert_eq!(TrainConfig::from_kv(&kv, &TrainConfig::default()).unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = TrainConfig::default();
        for text in ["warmup: 90000", "lambda_u: -1", "static_weights: 1,1,1", "weight_mode: odd", "peak_lr: nan"] {
            let kv = KeyValues::parse(text, "t").unwrap();
            assert!(TrainConfig::from_kv(&kv, &base).is_err(), "{text}");
        }
    }
}
