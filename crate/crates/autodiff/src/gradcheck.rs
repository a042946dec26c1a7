//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::DenseArray;
use crate::error::TensorError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated `|analytic − numeric| / max(1, |analytic|)`.
    pub tol: f64,
    /// Check at most this many coordinates (every tensor gets at least one
    /// when the budget allows); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub tol: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

fn scalar_of(loss: &Var) -> Result<f64, TensorError> {
    loss.value().item().ok_or_else(|| TensorError::NonScalarRoot {
        shape: loss.shape().to_vec(),
    })
}

fn pick_coords(params: &ParamStore, opts: &GradCheckOptions) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|p| (0..params.value(p).numel()).map(move |i| (p, i)))
        .collect();
    let Some(budget) = opts.max_coords.filter(|&b| b < all.len()) else {
        return all;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = Vec::with_capacity(budget);
    if budget >= params.len() {
        for p in 0..params.len() {
            picked.push((p, rng.random_range(0..params.value(p).numel())));
        }
    }
    let rest = budget - picked.len();
    for i in sample(&mut rng, all.len(), all.len()).into_iter() {
        if picked.len() >= budget || rest == 0 {
            break;
        }
        if !picked.contains(&all[i]) {
            picked.push(all[i]);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar loss from the bound parameters; it is evaluated once
/// on a recording tape and twice per checked coordinate on no-grad tapes.
/// Mismatches are reported, not raised; only errors from `f` propagate.
pub fn grad_check<F, E>(params: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(&loss)?;
    let analytic = params.collect_grads(&bound, &grads);

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let tape = Tape::no_grad();
        let bound = store.bind(&tape);
        Ok(scalar_of(&f(&tape, &bound)?)?)
    };

    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        tol: opts.tol,
        worst: None,
    };
    for (p, i) in pick_coords(params, opts) {
        let base = params.value(p);
        let shifted = |delta: f64| -> Result<f64, E> {
            let mut data = base.data().to_vec();
            data[i] += delta;
            let mut store = params.clone();
            store.set(p, DenseArray::new(base.shape().to_vec(), data)?)?;
            eval(&store)
        };
        let numeric = (shifted(opts.h)? - shifted(-opts.h)?) / (2.0 * opts.h);
        let a = analytic[p].as_ref().map_or(0.0, |g| g.data()[i]);
        let rel_err = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        if !(rel_err <= opts.tol) {
            report.failures += 1;
        }
        if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err || rel_err.is_nan()) {
            report.worst = Some(CoordCheck {
                param: params.name(p).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}

/// Convenience wrapper around [`grad_check`] for a single free array.
pub fn grad_check_array<F>(x: &DenseArray, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &Var) -> Result<Var, TensorError>,
{
    let mut store = ParamStore::new();
    store.insert("x", x.clone())?;
    grad_check(&store, |tape, bound| f(tape, &bound[0]), opts)
}

