use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};
use crate::labels::{NUM_CLASSES, NUM_SUBTYPES};

/// Where layer normalization sits in an intra-slice transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x + f(LN(x))`
    Pre,
    /// `LN(x + f(x))`
    Post,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(format!("norm placement must be `pre` or `post`, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Blocks per stage; a patch merge sits between consecutive stages.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
    pub norm: NormPlacement,
    /// Run the inter-slice transformer; when off, head 2 reads the pooled
    /// intra-slice features directly.
    pub use_sequence: bool,
    pub seq_layers: usize,
    pub seq_heads: usize,
    /// Rows of the slice positional table.
    pub max_slices: usize,
    pub num_classes: usize,
    /// Heads predict the five subtypes and `any` is their maximum.
    pub logical_any: bool,
    pub ln_eps: f64,
    /// Pixels enter the network as `(v - input_mean) / input_std`, which
    /// keeps saturated regions away from exact zero.
    pub input_mean: f64,
    pub input_std: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// The reduced configuration used by tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        Self {
            resolution: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![2, 2],
            window: 4,
            shift: 2,
            mlp_ratio: 4,
            norm: NormPlacement::Post,
            use_sequence: true,
            seq_layers: 2,
            seq_heads: 2,
            max_slices: 60,
            num_classes: NUM_CLASSES,
            logical_any: false,
            ln_eps: 1e-5,
            input_mean: 0.5,
            input_std: 0.5,
            init_seed: 0,
        }
    }

    /// Swin-B shaped extractor at 224 px.
    pub fn swin_b() -> Self {
        Self {
            resolution: 224,
            patch_size: 4,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            window: 7,
            shift: 3,
            ..Self::tiny()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side at stage `s`.
    pub fn stage_resolution(&self, s: usize) -> usize {
        (self.resolution / self.patch_size) >> s
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Window side at stage `s`; maps smaller than the window use one window.
    pub fn stage_window(&self, s: usize) -> usize {
        self.window.min(self.stage_resolution(s))
    }

    /// Cyclic shift of block `b` in stage `s`: alternates 0 and `shift`, and
    /// is always 0 when a single window covers the map.
    pub fn block_shift(&self, s: usize, b: usize) -> usize {
        if b.is_multiple_of(2) || self.stage_resolution(s) <= self.window {
            0
        } else {
            self.shift
        }
    }

    /// Feature width `D` after the last stage.
    pub fn feature_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    /// Logits produced by each head.
    pub fn head_outputs(&self) -> usize {
        if self.logical_any {
            NUM_SUBTYPES
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.resolution == 0 || !self.resolution.is_multiple_of(self.patch_size) {
            return fail(format!(
                "resolution {} is not divisible by patch size {}",
                self.resolution, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return fail("channels, embed_dim and mlp_ratio must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return fail("depths and heads must be non-empty and of equal length".into());
        }
        if self.depths.contains(&0) {
            return fail("every stage needs at least one block".into());
        }
        if self.window == 0 || self.shift >= self.window {
            return fail(format!("shift {} must be below window {}", self.shift, self.window));
        }
        let grid = self.resolution / self.patch_size;
        for s in 0..self.num_stages() {
            if s > 0 && !(grid >> (s - 1)).is_multiple_of(2) {
                return fail(format!("stage {} input grid {} is odd and cannot be merged", s, grid >> (s - 1)));
            }
            let r = self.stage_resolution(s);
            if r == 0 || !r.is_multiple_of(self.stage_window(s)) {
                return fail(format!(
                    "stage {s} grid {r} is not divisible by window {}",
                    self.stage_window(s)
                ));
            }
            if self.heads[s] == 0 || !self.stage_dim(s).is_multiple_of(self.heads[s]) {
                return fail(format!(
                    "stage {s} width {} is not divisible by {} heads",
                    self.stage_dim(s),
                    self.heads[s]
                ));
            }
        }
        if self.seq_layers == 0 || self.seq_heads == 0 || !self.feature_dim().is_multiple_of(self.seq_heads) {
            return fail(format!(
                "sequence transformer needs >= 1 layer and heads dividing {}",
                self.feature_dim()
            ));
        }
        if self.max_slices == 0 {
            return fail("max_slices must be positive".into());
        }
        if self.num_classes != NUM_CLASSES {
            return fail(format!("num_classes must be {NUM_CLASSES}"));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        if !(self.input_std > 0.0 && self.input_mean.is_finite()) {
            return fail("input_std must be positive and input_mean finite".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("resolution", self.resolution.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depths", kv::join(&self.depths)),
            ("heads", kv::join(&self.heads)),
            ("window", self.window.to_string()),
            ("shift", self.shift.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("norm", self.norm.to_string()),
            ("use_sequence", self.use_sequence.to_string()),
            ("seq_layers", self.seq_layers.to_string()),
            ("seq_heads", self.seq_heads.to_string()),
            ("max_slices", self.max_slices.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("logical_any", self.logical_any.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("input_mean", self.input_mean.to_string()),
            ("input_std", self.input_std.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ])
    }

    /// Keys absent from `kv` keep the values of `base`.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let c = Self {
            resolution: kv.get_or("resolution", base.resolution)?,
            patch_size: kv.get_or("patch_size", base.patch_size)?,
            in_channels: kv.get_or("in_channels", base.in_channels)?,
            embed_dim: kv.get_or("embed_dim", base.embed_dim)?,
            depths: kv.get_list("depths")?.unwrap_or_else(|| base.depths.clone()),
            heads: kv.get_list("heads")?.unwrap_or_else(|| base.heads.clone()),
            window: kv.get_or("window", base.window)?,
            shift: kv.get_or("shift", base.shift)?,
            mlp_ratio: kv.get_or("mlp_ratio", base.mlp_ratio)?,
            norm: kv.get_or("norm", base.norm)?,
            use_sequence: kv.get_or("use_sequence", base.use_sequence)?,
            seq_layers: kv.get_or("seq_layers", base.seq_layers)?,
            seq_heads: kv.get_or("seq_heads", base.seq_heads)?,
            max_slices: kv.get_or("max_slices", base.max_slices)?,
            num_classes: kv.get_or("num_classes", base.num_classes)?,
            logical_any: kv.get_or("logical_any", base.logical_any)?,
            ln_eps: kv.get_or("ln_eps", base.ln_eps)?,
            input_mean: kv.get_or("input_mean", base.input_mean)?,
            input_std: kv.get_or("input_std", base.input_std)?,
            init_seed: kv.get_or("init_seed", base.init_seed)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::swin_b().validate().unwrap();
        assert_eq!(ModelConfig::swin_b().feature_dim(), 1024);
        assert_eq!(ModelConfig::tiny().feature_dim(), 16);
    }

    #[test]
    fn rejects_bad_geometry() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::tiny();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.resolution = 30));
        assert!(bad(|c| c.shift = 4));
        assert!(bad(|c| c.window = 3));
        assert!(bad(|c| c.heads = vec![3, 2]));
        assert!(bad(|c| c.seq_layers = 0));
        assert!(bad(|c| c.depths = vec![1, 1, 1, 1, 1]));
    }

    #[test]
    fn shifts_alternate_and_vanish_on_single_window() {
        let c = ModelConfig::swin_b();
        assert_eq!((c.block_shift(0, 0), c.block_shift(0, 1)), (0, 3));
        assert_eq!(c.block_shift(3, 1), 0);
        assert_eq!(c.stage_window(3), 7);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::tiny();
        c.norm = NormPlacement::Pre;
        c.logical_any = true;
        let kv = KeyValues::parse(&c.to_kv(), "cfg").unwrap();
        assert_eq!(ModelConfig::from_kv(&kv, &ModelConfig::swin_b()).unwrap(), c);
    }
}
