//! The two-stage network: a Swin-style extractor applied to each slice, then
//! a transformer over the slice sequence. Head 1 reads pooled per-slice
//! features (auxiliary, training only); head 2 reads the sequence outputs.

mod checkpoint;
mod config;
pub mod swin;

use std::sync::Arc;

use ihd_autodiff::{DenseArray, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::preprocess::SeriesBatch;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, NormPlacement};
use swin::{linear, AttentionParams, WindowGeometry};

const INIT_STD: f64 = 0.02;

/// Truncated normal at ±2σ.
fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    DenseArray::new(shape.to_vec(), data).expect("shape matches data")
}

/// Parameter prefixes that belong to the inter-slice half of the network.
const SEQUENCE_PREFIXES: [&str; 2] = ["seq.", "head_main."];

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    /// Per stage, geometry for unshifted and shifted blocks.
    geometry: Vec<[WindowGeometry; 2]>,
    merges: Vec<Vec<usize>>,
}

/// Head outputs, both `[N, 6]`.
#[derive(Clone, Debug)]
pub struct LogitsPair {
    pub aux: Var,
    pub main: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Pooled intra-slice features `[N, D]`.
    pub features: Var,
    /// Sequence transformer outputs `[N, D]`.
    pub sequence: Var,
    pub logits: LogitsPair,
}

impl Model {
    /// A freshly initialized model, deterministic in `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let mut add = |name: String, value: DenseArray| params.insert(name, value).map(|_| ());

        let c0 = config.embed_dim;
        let patch_in = config.in_channels * config.patch_size * config.patch_size;
        add("patch_embed.weight".into(), trunc_normal(&mut rng, &[patch_in, c0]))?;
        add("patch_embed.bias".into(), DenseArray::zeros(&[c0]))?;
        add_norm(&mut add, "patch_embed.norm", c0)?;
        let hidden = |c: usize| c * config.mlp_ratio;
        for s in 0..config.num_stages() {
            let (c, h, w) = (config.stage_dim(s), config.heads[s], config.stage_window(s));
            for b in 0..config.depths[s] {
                let p = format!("stages.{s}.blocks.{b}");
                add_norm(&mut add, &format!("{p}.norm1"), c)?;
                add(format!("{p}.attn.qkv.weight"), trunc_normal(&mut rng, &[c, 3 * c]))?;
                add(format!("{p}.attn.qkv.bias"), DenseArray::zeros(&[3 * c]))?;
                add(format!("{p}.attn.rel_bias"), DenseArray::zeros(&[(2 * w - 1).pow(2), h]))?;
                add(format!("{p}.attn.proj.weight"), trunc_normal(&mut rng, &[c, c]))?;
                add(format!("{p}.attn.proj.bias"), DenseArray::zeros(&[c]))?;
                add_norm(&mut add, &format!("{p}.norm2"), c)?;
                add(format!("{p}.mlp.fc1.weight"), trunc_normal(&mut rng, &[c, hidden(c)]))?;
                add(format!("{p}.mlp.fc1.bias"), DenseArray::zeros(&[hidden(c)]))?;
                add(format!("{p}.mlp.fc2.weight"), trunc_normal(&mut rng, &[hidden(c), c]))?;
                add(format!("{p}.mlp.fc2.bias"), DenseArray::zeros(&[c]))?;
            }
            if s + 1 < config.num_stages() {
                add_norm(&mut add, &format!("stages.{s}.merge.norm"), 4 * c)?;
                add(format!("stages.{s}.merge.reduction.weight"), trunc_normal(&mut rng, &[4 * c, 2 * c]))?;
            }
        }
        let d = config.feature_dim();
        let k = config.head_outputs();
        add_norm(&mut add, "norm", d)?;
        add("head_aux.weight".into(), trunc_normal(&mut rng, &[d, k]))?;
        add("head_aux.bias".into(), DenseArray::zeros(&[k]))?;
        if config.use_sequence {
            add("seq.pos_embed".into(), trunc_normal(&mut rng, &[config.max_slices, d]))?;
            for l in 0..config.seq_layers {
                let p = format!("seq.layers.{l}");
                add_norm(&mut add, &format!("{p}.norm1"), d)?;
                add(format!("{p}.attn.qkv.weight"), trunc_normal(&mut rng, &[d, 3 * d]))?;
                add(format!("{p}.attn.qkv.bias"), DenseArray::zeros(&[3 * d]))?;
                add(format!("{p}.attn.proj.weight"), trunc_normal(&mut rng, &[d, d]))?;
                add(format!("{p}.attn.proj.bias"), DenseArray::zeros(&[d]))?;
                add_norm(&mut add, &format!("{p}.norm2"), d)?;
                add(format!("{p}.mlp.fc1.weight"), trunc_normal(&mut rng, &[d, hidden(d)]))?;
                add(format!("{p}.mlp.fc1.bias"), DenseArray::zeros(&[hidden(d)]))?;
                add(format!("{p}.mlp.fc2.weight"), trunc_normal(&mut rng, &[hidden(d), d]))?;
                add(format!("{p}.mlp.fc2.bias"), DenseArray::zeros(&[d]))?;
            }
        }
        add("head_main.weight".into(), trunc_normal(&mut rng, &[d, k]))?;
        add("head_main.bias".into(), DenseArray::zeros(&[k]))?;
        Self::with_params(config, params)
    }

    fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut geometry = Vec::with_capacity(config.num_stages());
        let mut merges = Vec::new();
        for s in 0..config.num_stages() {
            let (side, w) = (config.stage_resolution(s), config.stage_window(s));
            let shift = if side <= config.window { 0 } else { config.shift };
            geometry.push([WindowGeometry::new(side, w, 0)?, WindowGeometry::new(side, w, shift)?]);
            if s + 1 < config.num_stages() {
                merges.push(swin::merge_indices(side, side)?);
            }
        }
        Ok(Self {
            config,
            params,
            geometry,
            merges,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalars in the intra-slice extractor and head 1.
    pub fn intra_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| !SEQUENCE_PREFIXES.iter().any(|p| name.starts_with(p)))
            .map(|(_, v)| v.numel())
            .sum()
    }

    fn param<'v>(&self, vars: &'v [Var], name: &str) -> Result<&'v Var> {
        self.params
            .id(name)
            .and_then(|id| vars.get(id))
            .ok_or_else(|| Error::Structure(format!("model has no parameter `{name}`")))
    }

    fn layer_norm(&self, tape: &Tape, vars: &[Var], x: &Var, prefix: &str) -> Result<Var> {
        let g = self.param(vars, &format!("{prefix}.gain"))?;
        let b = self.param(vars, &format!("{prefix}.bias"))?;
        Ok(tape.layer_norm(x, g, b, self.config.ln_eps)?)
    }

    fn dense(&self, tape: &Tape, vars: &[Var], x: &Var, prefix: &str) -> Result<Var> {
        let w = self.param(vars, &format!("{prefix}.weight"))?;
        let b = match self.params.id(&format!("{prefix}.bias")) {
            Some(_) => Some(self.param(vars, &format!("{prefix}.bias"))?),
            None => None,
        };
        linear(tape, x, w, b)
    }

    fn mlp(&self, tape: &Tape, vars: &[Var], x: &Var, prefix: &str) -> Result<Var> {
        let h = self.dense(tape, vars, x, &format!("{prefix}.fc1"))?;
        let h = tape.gelu(&h);
        self.dense(tape, vars, &h, &format!("{prefix}.fc2"))
    }

    fn attention_params<'v>(&self, vars: &'v [Var], prefix: &str) -> Result<AttentionParams<'v>> {
        Ok(AttentionParams {
            qkv_w: self.param(vars, &format!("{prefix}.qkv.weight"))?,
            qkv_b: self.param(vars, &format!("{prefix}.qkv.bias"))?,
            proj_w: self.param(vars, &format!("{prefix}.proj.weight"))?,
            proj_b: self.param(vars, &format!("{prefix}.proj.bias"))?,
        })
    }

    /// Block `b` of stage `s` on `x: [N, L, C]`.
    pub fn transformer_block(&self, tape: &Tape, vars: &[Var], x: &Var, s: usize, b: usize) -> Result<Var> {
        let p = format!("stages.{s}.blocks.{b}");
        let geo = &self.geometry[s][usize::from(self.config.block_shift(s, b) > 0)];
        let attn = self.attention_params(vars, &format!("{p}.attn"))?;
        let rel = self.param(vars, &format!("{p}.attn.rel_bias"))?;
        let heads = self.config.heads[s];
        let (n1, n2) = (format!("{p}.norm1"), format!("{p}.norm2"));
        match self.config.norm {
            NormPlacement::Pre => {
                let a = swin::window_attention(tape, &self.layer_norm(tape, vars, x, &n1)?, &attn, rel, heads, geo)?;
                let x = tape.add(x, &a)?;
                let m = self.mlp(tape, vars, &self.layer_norm(tape, vars, &x, &n2)?, &format!("{p}.mlp"))?;
                Ok(tape.add(&x, &m)?)
            }
            NormPlacement::Post => {
                let a = swin::window_attention(tape, x, &attn, rel, heads, geo)?;
                let x = self.layer_norm(tape, vars, &tape.add(x, &a)?, &n1)?;
                let m = self.mlp(tape, vars, &x, &format!("{p}.mlp"))?;
                self.layer_norm(tape, vars, &tape.add(&x, &m)?, &n2)
            }
        }
    }

    /// 2×2 neighbourhood merge after stage `s`: `[N, L, C]` to `[N, L/4, 2C]`.
    pub fn patch_merging(&self, tape: &Tape, vars: &[Var], x: &Var, s: usize) -> Result<Var> {
        let &[n, l, c] = x.shape() else { unreachable!("token tensors are rank 3") };
        let flat = tape.reshape(x, &[n * l, c])?;
        let rows = tape.gather_rows(&flat, swin::batched_indices(&self.merges[s], n, l))?;
        let merged = tape.reshape(&rows, &[n, l / 4, 4 * c])?;
        let merged = self.layer_norm(tape, vars, &merged, &format!("stages.{s}.merge.norm"))?;
        self.dense(tape, vars, &merged, &format!("stages.{s}.merge.reduction"))
    }

    /// Linear projection of `[N, L, 3·p·p]` patches to `[N, L, C]`.
    pub fn patch_project(&self, tape: &Tape, vars: &[Var], patches: &Var) -> Result<Var> {
        self.dense(tape, vars, patches, "patch_embed")
    }

    /// Projection followed by the patch norm.
    pub fn patch_embed(&self, tape: &Tape, vars: &[Var], patches: &Var) -> Result<Var> {
        let x = self.patch_project(tape, vars, patches)?;
        self.layer_norm(tape, vars, &x, "patch_embed.norm")
    }

    fn check_batch(&self, batch: &SeriesBatch) -> Result<()> {
        if batch.size != self.config.resolution || batch.channels != self.config.in_channels {
            return Err(Error::Validation(format!(
                "series {} has {}×{}² images, model expects {}×{}²",
                batch.series_id, batch.channels, batch.size, self.config.in_channels, self.config.resolution
            )));
        }
        if batch.num_slices == 0 {
            return Err(Error::Validation(format!("series {} has no slices", batch.series_id)));
        }
        Ok(())
    }

    /// Pooled features `[N, D]` and head-1 logits `[N, 6]`.
    pub fn intra_forward(&self, tape: &Tape, vars: &[Var], batch: &SeriesBatch) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let c = &self.config;
        let pixels: Vec<f64> = batch.data.iter().map(|v| (v - c.input_mean) / c.input_std).collect();
        let patches = swin::patchify(&pixels, batch.num_slices, c.in_channels, c.resolution, c.patch_size)?;
        let mut x = self.patch_embed(tape, vars, &tape.constant(patches))?;
        for s in 0..c.num_stages() {
            for b in 0..c.depths[s] {
                x = self.transformer_block(tape, vars, &x, s, b)?;
            }
            if s + 1 < c.num_stages() {
                x = self.patch_merging(tape, vars, &x, s)?;
            }
        }
        let x = self.layer_norm(tape, vars, &x, "norm")?;
        let features = tape.mean_axis(&x, 1)?;
        let aux = self.dense(tape, vars, &features, "head_aux")?;
        Ok((features, self.expand_any(tape, &aux)?))
    }

    /// Sequence outputs `[N, D]` and head-2 logits `[N, 6]` from features.
    pub fn sequence_forward(&self, tape: &Tape, vars: &[Var], features: &Var) -> Result<(Var, Var)> {
        let &[n, d] = features.shape() else {
            return Err(Error::Validation(format!("features must be [N, D], got {:?}", features.shape())));
        };
        if n == 0 || d != self.config.feature_dim() {
            return Err(Error::Validation(format!("features of shape {:?} do not match the model", features.shape())));
        }
        let mut x = features.clone();
        if self.config.use_sequence {
            if n > self.config.max_slices {
                return Err(Error::Config(format!(
                    "{n} slices exceed the positional table of {} rows",
                    self.config.max_slices
                )));
            }
            let pos = tape.narrow(self.param(vars, "seq.pos_embed")?, 0, 0, n)?;
            x = tape.add(&x, &pos)?;
            for l in 0..self.config.seq_layers {
                let p = format!("seq.layers.{l}");
                let h = self.layer_norm(tape, vars, &x, &format!("{p}.norm1"))?;
                let h = tape.reshape(&h, &[1, 1, n, d])?;
                let attn = self.attention_params(vars, &format!("{p}.attn"))?;
                let a = swin::multi_head_attention(tape, &h, &attn, self.config.seq_heads, None)?;
                x = tape.add(&x, &tape.reshape(&a, &[n, d])?)?;
                let h = self.layer_norm(tape, vars, &x, &format!("{p}.norm2"))?;
                x = tape.add(&x, &self.mlp(tape, vars, &h, &format!("{p}.mlp"))?)?;
            }
        }
        let main = self.dense(tape, vars, &x, "head_main")?;
        Ok((x, self.expand_any(tape, &main)?))
    }

    /// In logical-any mode, appends `max` of the five subtype logits as the
    /// `any` column. Sigmoid is monotone, so the probability is the maximum
    /// of the subtype probabilities.
    fn expand_any(&self, tape: &Tape, logits: &Var) -> Result<Var> {
        if !self.config.logical_any {
            return Ok(logits.clone());
        }
        let n = logits.shape()[0];
        let any = tape.reshape(&tape.max_last(logits)?, &[n, 1])?;
        Ok(tape.concat(&[logits, &any], 1)?)
    }

    pub fn forward(&self, tape: &Tape, vars: &[Var], batch: &SeriesBatch) -> Result<Forward> {
        let (features, aux) = self.intra_forward(tape, vars, batch)?;
        let (sequence, main) = self.sequence_forward(tape, vars, &features)?;
        Ok(Forward {
            features,
            sequence,
            logits: LogitsPair { aux, main },
        })
    }

    /// Per-slice probabilities from head 2.
    pub fn predict(&self, batch: &SeriesBatch) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let tape = Tape::no_grad();
        let vars = self.params.bind(&tape);
        let out = self.forward(&tape, &vars, batch)?;
        let probs = tape.sigmoid(&out.logits.main);
        Ok(probs
            .value()
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| row.try_into().expect("six columns"))
            .collect())
    }

    /// Shares parameter storage; cheap.
    pub fn shared_params(&self) -> Vec<Arc<DenseArray>> {
        let tape = Tape::no_grad();
        self.params.bind(&tape).iter().map(Var::shared_value).collect()
    }
}

fn add_norm(add: &mut impl FnMut(String, DenseArray) -> ihd_autodiff::Result<()>, prefix: &str, dim: usize) -> ihd_autodiff::Result<()> {
    add(format!("{prefix}.gain"), DenseArray::ones(&[dim]))?;
    add(format!("{prefix}.bias"), DenseArray::zeros(&[dim]))
}

/// Maximum of the five subtype probabilities.
pub fn logical_any(subtypes: &[f64; 5]) -> f64 {
    subtypes.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_intra_count_matches_closed_form() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let c = m.config().clone();
        let mut expected = 3 * 16 * 8 + 8 + 16;
        for s in 0..2 {
            let (d, w, h) = (c.stage_dim(s), c.stage_window(s), c.heads[s]);
            expected += 2 * d + 3 * d * d + 3 * d + (2 * w - 1).pow(2) * h + d * d + d + 2 * d + 8 * d * d + 5 * d;
            if s == 0 {
                expected += 8 * d + 8 * d * d;
            }
        }
        expected += 2 * 16 + 16 * 6 + 6;
        assert_eq!(m.intra_parameters(), expected);
    }
}
