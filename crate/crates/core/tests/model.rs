use ihd_autodiff::{grad_check, DenseArray, GradCheckOptions, Tape, Var};
use ihd_core::model::swin::{
    patchify, shifted_window_mask, window_attention, window_partition, window_partition_indices, window_reverse,
    AttentionParams, WindowGeometry,
};
use ihd_core::model::{logical_any, read_checkpoint, write_checkpoint, Model, ModelConfig, NormPlacement};
use ihd_core::preprocess::SeriesBatch;
use ihd_core::preprocess::CropRect;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_batch(seed: u64, n: usize, size: usize) -> SeriesBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SeriesBatch {
        series_id: format!("R{seed}"),
        num_slices: n,
        channels: 3,
        size,
        data: (0..n * 3 * size * size).map(|_| rng.random::<f64>()).collect(),
        crop: CropRect::full(size, size),
    }
}

/// Every parameter redrawn uniformly in ±scale so no path is trivially zero.
fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..model.params.len() {
        let shape = model.params.value(id).shape().to_vec();
        model.params.set(id, random_array(&mut rng, &shape, scale)).unwrap();
    }
}

fn set(model: &mut Model, name: &str, value: DenseArray) {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no {name}"));
    model.params.set(id, value).unwrap();
}

fn zero(model: &mut Model, name: &str) {
    let shape = model.params.get(name).unwrap().shape().to_vec();
    set(model, name, DenseArray::zeros(&shape));
}

#[test]
fn patch_embed_examples() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 1, 0.5);
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let bias = model.params.get("patch_embed.bias").unwrap().clone();
    let weight = model.params.get("patch_embed.weight").unwrap().clone();

    let zero = tape.constant(patchify(&vec![0.0; 3 * 32 * 32], 1, 3, 32, 4).unwrap());
    let tokens = model.patch_project(&tape, &vars, &zero).unwrap();
    assert_eq!(tokens.shape(), &[1, 64, 8]);
    for row in tokens.value().data().chunks(8) {
        assert_eq!(row, bias.data());
    }

    assert_eq!(patchify(&vec![0.0; 3 * 8 * 8], 1, 3, 8, 4).unwrap().shape(), &[1, 4, 48]);
    assert!(patchify(&vec![0.0; 3 * 10 * 10], 1, 3, 10, 4).is_err());

    // A single lit pixel at channel 1, row 5, col 2 lands in patch (1, 0) at
    // feature index 1·16 + 1·4 + 2 = 22.
    let mut image = vec![0.0; 3 * 32 * 32];
    image[32 * 32 + 5 * 32 + 2] = 1.0;
    let tokens = model
        .patch_project(&tape, &vars, &tape.constant(patchify(&image, 1, 3, 32, 4).unwrap()))
        .unwrap();
    let token = &tokens.value().data()[8 * 8..9 * 8];
    for (c, t) in token.iter().enumerate() {
        assert!((t - (weight.data()[22 * 8 + c] + bias.data()[c])).abs() < 1e-15);
    }
}

#[test]
fn partition_examples() {
    let grid = DenseArray::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
    let single = window_partition(&grid, 4, 0).unwrap();
    assert_eq!(single.shape(), &[1, 16, 1]);
    assert_eq!(single.data(), grid.data());

    let shifted = window_partition(&grid, 2, 1).unwrap();
    let expected = [5, 6, 9, 10, 7, 4, 11, 8, 13, 14, 1, 2, 15, 12, 3, 0];
    assert_eq!(shifted.data(), expected.map(f64::from).as_slice());
    assert!(window_partition(&grid, 3, 0).is_err());
}

#[test]
fn mask_matches_reference_layout() {
    // 4×4 grid, window 2, shift 1: `true` marks blocked pairs.
    let blocked = [
        [[false; 4]; 4],
        [
            [false, true, false, true],
            [true, false, true, false],
            [false, true, false, true],
            [true, false, true, false],
        ],
        [
            [false, false, true, true],
            [false, false, true, true],
            [true, true, false, false],
            [true, true, false, false],
        ],
        [
            [false, true, true, true],
            [true, false, true, true],
            [true, true, false, true],
            [true, true, true, false],
        ],
    ];
    let mask = shifted_window_mask(4, 4, 2, 1).unwrap().unwrap();
    assert_eq!(mask.shape(), &[4, 4, 4]);
    for (w, rows) in blocked.iter().enumerate() {
        for (q, row) in rows.iter().enumerate() {
            for (k, &b) in row.iter().enumerate() {
                let v = mask.data()[(w * 4 + q) * 4 + k];
                assert_eq!(v == f64::NEG_INFINITY, b, "window {w} ({q},{k})");
                assert!(v == 0.0 || v == f64::NEG_INFINITY);
            }
        }
    }
    assert!(shifted_window_mask(4, 4, 2, 0).unwrap().is_none());
}

struct AttnFixture {
    qkv_w: DenseArray,
    qkv_b: DenseArray,
    proj_w: DenseArray,
    proj_b: DenseArray,
    table: DenseArray,
}

impl AttnFixture {
    fn random(rng: &mut ChaCha8Rng, c: usize, window: usize, heads: usize) -> Self {
        Self {
            qkv_w: random_array(rng, &[c, 3 * c], 0.6),
            qkv_b: random_array(rng, &[3 * c], 0.3),
            proj_w: random_array(rng, &[c, c], 0.6),
            proj_b: random_array(rng, &[c], 0.3),
            table: random_array(rng, &[(2 * window - 1).pow(2), heads], 0.5),
        }
    }

    fn run(&self, x: &DenseArray, heads: usize, geo: &WindowGeometry) -> DenseArray {
        let tape = Tape::no_grad();
        let v = |a: &DenseArray| tape.constant(a.clone());
        let (qw, qb, pw, pb) = (v(&self.qkv_w), v(&self.qkv_b), v(&self.proj_w), v(&self.proj_b));
        let p = AttentionParams {
            qkv_w: &qw,
            qkv_b: &qb,
            proj_w: &pw,
            proj_b: &pb,
        };
        window_attention(&tape, &v(x), &p, &v(&self.table), heads, geo)
            .unwrap()
            .value()
            .clone()
    }
}

/// Plain-loop global attention over one `side × side` grid with the learned
/// relative bias looked up from the (dy, dx) offset of each token pair.
fn global_attention_oracle(x: &[f64], side: usize, c: usize, heads: usize, f: &AttnFixture) -> Vec<f64> {
    let t = side * side;
    let hd = c / heads;
    let project = |w: &[f64], b: &[f64], cols: usize, off: usize, row: &[f64]| -> Vec<f64> {
        (0..cols)
            .map(|j| b[off + j] + (0..row.len()).map(|i| row[i] * w[i * (b.len()) + off + j]).sum::<f64>())
            .collect()
    };
    let rows: Vec<&[f64]> = x.chunks(c).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| project(f.qkv_w.data(), f.qkv_b.data(), c, 0, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| project(f.qkv_w.data(), f.qkv_b.data(), c, c, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| project(f.qkv_w.data(), f.qkv_b.data(), c, 2 * c, r)).collect();
    let mut mixed = vec![vec![0.0; c]; t];
    for h in 0..heads {
        for i in 0..t {
            let mut s: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = (0..hd).map(|d| q[i][h * hd + d] * k[j][h * hd + d]).sum();
                    let dy = (i / side) as i64 - (j / side) as i64 + side as i64 - 1;
                    let dx = (i % side) as i64 - (j % side) as i64 + side as i64 - 1;
                    let row = (dy * (2 * side as i64 - 1) + dx) as usize;
                    dot / (hd as f64).sqrt() + f.table.data()[row * heads + h]
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter_mut().map(|e| {
                *e = (*e - m).exp();
                *e
            }).sum();
            for j in 0..t {
                for d in 0..hd {
                    mixed[i][h * hd + d] += s[j] / z * v[j][h * hd + d];
                }
            }
        }
    }
    mixed
        .iter()
        .flat_map(|r| project(f.proj_w.data(), f.proj_b.data(), c, 0, r))
        .collect()
}

#[test]
fn full_window_attention_matches_global_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (side, c, heads, n) = (4, 6, 2, 2);
    let f = AttnFixture::random(&mut rng, c, side, heads);
    let x = random_array(&mut rng, &[n, side * side, c], 1.0);
    let got = f.run(&x, heads, &WindowGeometry::new(side, side, 0).unwrap());
    for s in 0..n {
        let slice = &x.data()[s * side * side * c..(s + 1) * side * side * c];
        let oracle = global_attention_oracle(slice, side, c, heads, &f);
        let out = &got.data()[s * side * side * c..(s + 1) * side * side * c];
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn single_token_window_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 4;
    let mut f = AttnFixture::random(&mut rng, c, 1, 2);
    f.proj_w = DenseArray::new(vec![c, c], (0..c * c).map(|i| f64::from(u8::from(i % (c + 1) == 0))).collect()).unwrap();
    f.proj_b = DenseArray::zeros(&[c]);
    let x = random_array(&mut rng, &[1, 4, c], 1.0);
    let out = f.run(&x, 2, &WindowGeometry::new(2, 1, 0).unwrap());
    for (t, row) in x.data().chunks(c).enumerate() {
        for j in 0..c {
            let value: f64 = f.qkv_b.data()[2 * c + j] + (0..c).map(|i| row[i] * f.qkv_w.data()[i * 3 * c + 2 * c + j]).sum::<f64>();
            assert!((out.data()[t * c + j] - value).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, side) = (4, 2);
    let mut f = AttnFixture::random(&mut rng, c, side, 2);
    // Zero key weights and zero bias table: every key equals the key bias.
    for i in 0..c {
        for j in c..2 * c {
            f.qkv_w.data_mut()[i * 3 * c + j] = 0.0;
        }
    }
    f.table = DenseArray::zeros(f.table.shape());
    f.proj_w = DenseArray::new(vec![c, c], (0..c * c).map(|i| f64::from(u8::from(i % (c + 1) == 0))).collect()).unwrap();
    f.proj_b = DenseArray::zeros(&[c]);
    let x = random_array(&mut rng, &[1, 4, c], 1.0);
    let out = f.run(&x, 2, &WindowGeometry::new(side, side, 0).unwrap());
    let mean_v: Vec<f64> = (0..c)
        .map(|j| {
            x.data()
                .chunks(c)
                .map(|row| f.qkv_b.data()[2 * c + j] + (0..c).map(|i| row[i] * f.qkv_w.data()[i * 3 * c + 2 * c + j]).sum::<f64>())
                .sum::<f64>()
                / 4.0
        })
        .collect();
    for row in out.data().chunks(c) {
        for j in 0..c {
            assert!((row[j] - mean_v[j]).abs() < 1e-12);
        }
    }
}

fn tiny(norm: NormPlacement) -> ModelConfig {
    ModelConfig {
        norm,
        ..ModelConfig::tiny()
    }
}

fn block_input(seed: u64) -> DenseArray {
    random_array(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 64, 8], 1.0)
}

#[test]
fn block_placements_and_residual_identity() {
    let x = block_input(1);
    for norm in [NormPlacement::Pre, NormPlacement::Post] {
        let mut model = Model::new(tiny(norm)).unwrap();
        randomize(&mut model, 2, 0.3);
        let tape = Tape::no_grad();
        let vars = model.params.bind(&tape);
        let y = model.transformer_block(&tape, &vars, &tape.constant(x.clone()), 0, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    let mut model = Model::new(tiny(NormPlacement::Pre)).unwrap();
    randomize(&mut model, 2, 0.3);
    for name in ["attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        zero(&mut model, &format!("stages.0.blocks.0.{name}"));
    }
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let y = model.transformer_block(&tape, &vars, &tape.constant(x.clone()), 0, 0).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn post_norm_token_mean_is_final_bias_mean() {
    let mut model = Model::new(tiny(NormPlacement::Post)).unwrap();
    randomize(&mut model, 4, 0.3);
    set(&mut model, "stages.0.blocks.0.norm2.gain", DenseArray::ones(&[8]));
    let bias_mean = model.params.get("stages.0.blocks.0.norm2.bias").unwrap().sum() / 8.0;
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let y = model.transformer_block(&tape, &vars, &tape.constant(block_input(5)), 0, 0).unwrap();
    for row in y.value().data().chunks(8) {
        assert!((row.iter().sum::<f64>() / 8.0 - bias_mean).abs() < 1e-12);
    }
}

fn merge_model() -> Model {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 6, 0.3);
    model
}

#[test]
fn patch_merging_examples() {
    let mut model = merge_model();
    let c = 8;
    // Identity on the first 2C of the 4C concatenation, unit gain, zero bias.
    let eye: Vec<f64> = (0..4 * c * 2 * c).map(|i| f64::from(u8::from(i / (2 * c) == i % (2 * c)))).collect();
    set(&mut model, "stages.0.merge.reduction.weight", DenseArray::new(vec![4 * c, 2 * c], eye).unwrap());
    set(&mut model, "stages.0.merge.norm.gain", DenseArray::ones(&[4 * c]));
    set(&mut model, "stages.0.merge.norm.bias", DenseArray::zeros(&[4 * c]));
    let x = block_input(7);
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let y = model.patch_merging(&tape, &vars, &tape.constant(x.clone()), 0).unwrap();
    assert_eq!(y.shape(), &[2, 16, 16]);
    let token = |s: usize, r: usize, col: usize| &x.data()[((s * 64) + r * 8 + col) * c..((s * 64) + r * 8 + col + 1) * c];
    for s in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let cat: Vec<f64> = [
                    token(s, 2 * i, 2 * j),
                    token(s, 2 * i + 1, 2 * j),
                    token(s, 2 * i, 2 * j + 1),
                    token(s, 2 * i + 1, 2 * j + 1),
                ]
                .concat();
                let mean = cat.iter().sum::<f64>() / 32.0;
                let var = cat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
                let got = &y.value().data()[((s * 16) + i * 4 + j) * 16..((s * 16) + i * 4 + j + 1) * 16];
                for k in 0..16 {
                    let want = (cat[k] - mean) / (var + 1e-5).sqrt();
                    assert!((got[k] - want).abs() < 1e-12);
                }
            }
        }
    }

    // Constant grid in, constant grid out.
    let model = merge_model();
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let row: Vec<f64> = (0..c).map(|i| i as f64 * 0.1 - 0.3).collect();
    let constant = DenseArray::new(vec![1, 64, c], row.repeat(64)).unwrap();
    let y = model.patch_merging(&tape, &vars, &tape.constant(constant), 0).unwrap();
    let first = &y.value().data()[..16];
    assert!(y.value().data().chunks(16).all(|r| r == first));
}

#[test]
fn intra_forward_is_per_slice() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 8, 0.3);
    let base = random_batch(1, 3, 32);
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let (f, aux) = model.intra_forward(&tape, &vars, &base).unwrap();
    assert_eq!(f.shape(), &[3, 16]);
    assert_eq!(aux.shape(), &[3, 6]);

    let dup = base.select_slices(&[1, 1]);
    let (fd, _) = model.intra_forward(&tape, &vars, &dup).unwrap();
    assert_eq!(fd.value().data()[..16], fd.value().data()[16..]);

    let perm = base.select_slices(&[2, 0, 1]);
    let (fp, _) = model.intra_forward(&tape, &vars, &perm).unwrap();
    for (dst, src) in [2usize, 0, 1].iter().enumerate() {
        assert_eq!(fp.value().data()[dst * 16..(dst + 1) * 16], f.value().data()[src * 16..(src + 1) * 16]);
    }
}

#[test]
fn sequence_forward_examples() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 9, 0.3);
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let feats = random_array(&mut ChaCha8Rng::seed_from_u64(2), &[4, 16], 1.0);

    let (_, one) = model.sequence_forward(&tape, &vars, &tape.constant(random_array(&mut ChaCha8Rng::seed_from_u64(3), &[1, 16], 1.0))).unwrap();
    assert!(one.value().is_finite() && one.shape() == [1, 6]);

    let (_, logits) = model.sequence_forward(&tape, &vars, &tape.constant(feats.clone())).unwrap();
    let rows: Vec<f64> = [3usize, 2, 1, 0].iter().flat_map(|&r| feats.data()[r * 16..(r + 1) * 16].to_vec()).collect();
    let reversed = DenseArray::new(vec![4, 16], rows).unwrap();
    let (_, logits_r) = model.sequence_forward(&tape, &vars, &tape.constant(reversed)).unwrap();
    let unreversed: Vec<f64> = [3usize, 2, 1, 0].iter().flat_map(|&r| logits_r.value().data()[r * 6..(r + 1) * 6].to_vec()).collect();
    assert!(logits.value().data().iter().zip(&unreversed).any(|(a, b)| (a - b).abs() > 1e-9));

    let too_long = DenseArray::zeros(&[61, 16]);
    assert!(model.sequence_forward(&tape, &vars, &tape.constant(too_long)).is_err());

    for l in 0..2 {
        for name in ["attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
            zero(&mut model, &format!("seq.layers.{l}.{name}"));
        }
    }
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let (_, logits) = model.sequence_forward(&tape, &vars, &tape.constant(feats.clone())).unwrap();
    let pos = model.params.get("seq.pos_embed").unwrap();
    let w = model.params.get("head_main.weight").unwrap();
    let b = model.params.get("head_main.bias").unwrap();
    for s in 0..4 {
        for k in 0..6 {
            let want = b.data()[k]
                + (0..16).map(|d| (feats.data()[s * 16 + d] + pos.data()[s * 16 + d]) * w.data()[d * 6 + k]).sum::<f64>();
            assert!((logits.value().data()[s * 6 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn predict_uses_head_two_only() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 10, 0.3);
    let batch = random_batch(4, 5, 32);
    let probs = model.predict(&batch).unwrap();
    assert_eq!(probs.len(), 5);
    assert!(probs.iter().flatten().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));

    randomize_head(&mut model, "head_aux", 99);
    assert_eq!(model.predict(&batch).unwrap(), probs);

    zero(&mut model, "head_main.weight");
    zero(&mut model, "head_main.bias");
    assert!(model.predict(&batch).unwrap().iter().flatten().all(|&p| p == 0.5));
}

fn randomize_head(model: &mut Model, head: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for part in ["weight", "bias"] {
        let name = format!("{head}.{part}");
        let shape = model.params.get(&name).unwrap().shape().to_vec();
        set(model, &name, random_array(&mut rng, &shape, 2.0));
    }
}

#[test]
fn logical_any_examples() {
    assert_eq!(logical_any(&[0.1, 0.2, 0.3, 0.2, 0.1]), 0.3);
    assert_eq!(logical_any(&[0.0; 5]), 0.0);

    let config = ModelConfig {
        logical_any: true,
        ..ModelConfig::tiny()
    };
    let mut model = Model::new(config).unwrap();
    randomize(&mut model, 12, 0.5);
    assert_eq!(model.params.get("head_main.weight").unwrap().shape(), &[16, 5]);
    for row in model.predict(&random_batch(6, 4, 32)).unwrap() {
        let subtypes: [f64; 5] = row[..5].try_into().unwrap();
        assert_eq!(row[5], logical_any(&subtypes));
    }
}

#[test]
fn intra_only_mode_reads_features_directly() {
    let config = ModelConfig {
        use_sequence: false,
        ..ModelConfig::tiny()
    };
    let model = Model::new(config).unwrap();
    assert!(model.params.names().iter().all(|n| !n.starts_with("seq.")));
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let out = model.forward(&tape, &vars, &random_batch(2, 2, 32)).unwrap();
    assert_eq!(out.sequence.value(), out.features.value());
}

#[test]
fn end_to_end_gradient_check() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 13, 0.3);
    let batch = random_batch(9, 3, 32);
    let targets = DenseArray::new(
        vec![3, 6],
        (0..18).map(|i| f64::from(u8::from(i % 4 == 0))).collect(),
    )
    .unwrap();
    let weights = [2.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    let loss = |tape: &Tape, vars: &[Var]| -> ihd_core::Result<Var> {
        let out = model.forward(tape, vars, &batch)?;
        let l1 = tape.bce_with_logits(&out.logits.aux, &targets, &weights)?;
        let l2 = tape.bce_with_logits(&out.logits.main, &targets, &weights)?;
        Ok(tape.add(&l1, &l2)?)
    };
    let opts = GradCheckOptions {
        tol: 1e-4,
        max_coords: Some(300),
        seed: 1,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model.params, loss, &opts).unwrap();
    assert!(report.checked >= 200);
    assert!(report.passed(), "worst {:?}", report.worst);
    eprintln!("max rel err {:e} over {}", report.max_rel_err(), report.checked);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let mut model = Model::new(tiny(NormPlacement::Pre)).unwrap();
    randomize(&mut model, 14, 0.3);
    let bytes = write_checkpoint(&model);
    let back = read_checkpoint(&bytes, Path::new("m.ckpt")).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in back.params.iter().zip(model.params.iter()) {
        assert_eq!(a, b);
    }
    assert!(read_checkpoint(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
    assert!(read_checkpoint(b"garbage\n", Path::new("m")).is_err());

    // Drop the final parameter block (head_main.bias: 6 values).
    let tail = 4 + "head_main.bias".len() + 4 + 8 + 6 * 8;
    assert!(read_checkpoint(&bytes[..bytes.len() - tail], Path::new("m")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_round_trips(windows_per_side in 1usize..=4, window in 1usize..=4, shift_frac in 0.0f64..1.0, c in 1usize..3) {
        let side = windows_per_side * window;
        prop_assume!(side <= 8);
        let shift = ((shift_frac * window as f64) as usize).min(window - 1);
        let grid = DenseArray::new(vec![side, side, c], (0..side * side * c).map(|i| i as f64).collect()).unwrap();
        let groups = window_partition(&grid, window, shift).unwrap();
        prop_assert_eq!(window_reverse(&groups, side, side, window, shift).unwrap(), grid);
        let idx = window_partition_indices(side, side, window, shift).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..side * side).collect::<Vec<_>>());
    }
}
