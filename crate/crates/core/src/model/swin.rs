//! Windowed attention building blocks and their index bookkeeping.
//!
//! Token grids are stored flat, row-major over `(row, col)`, with channels
//! last. Window partitioning, its inverse and patch merging are all row
//! gathers, so their gradients come for free from the tape.

use std::sync::Arc;

use ihd_autodiff::{DenseArray, Tape, Var};

use crate::error::{Error, Result};

/// Flat grid index read by each position of the windowed order.
///
/// The grid is cyclically shifted by `-shift` on both axes, then cut into
/// `window × window` groups. Groups are ordered row-major, tokens within a
/// group row-major.
pub fn window_partition_indices(height: usize, width: usize, window: usize, shift: usize) -> Result<Vec<usize>> {
    if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "{height}×{width} grid is not divisible by window {window}"
        )));
    }
    if shift >= window {
        return Err(Error::Config(format!("shift {shift} must be below window {window}")));
    }
    let mut idx = Vec::with_capacity(height * width);
    for wi in 0..height / window {
        for wj in 0..width / window {
            for a in 0..window {
                for b in 0..window {
                    let y = (wi * window + a + shift) % height;
                    let x = (wj * window + b + shift) % width;
                    idx.push(y * width + x);
                }
            }
        }
    }
    Ok(idx)
}

pub fn inverse_indices(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (pos, &src) in idx.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// `grid: [H, W, C]` to `[nW, T, C]` groups.
pub fn window_partition(grid: &DenseArray, window: usize, shift: usize) -> Result<DenseArray> {
    let [h, w, c] = grid_dims(grid)?;
    let idx = window_partition_indices(h, w, window, shift)?;
    let data = gather(grid.data(), &idx, c);
    Ok(DenseArray::new(vec![h * w / (window * window), window * window, c], data)?)
}

/// Inverse of [`window_partition`] for an `height × width` grid.
pub fn window_reverse(groups: &DenseArray, height: usize, width: usize, window: usize, shift: usize) -> Result<DenseArray> {
    let c = *groups.shape().last().unwrap_or(&0);
    if groups.numel() != height * width * c {
        return Err(Error::Validation(format!(
            "groups of shape {:?} do not tile a {height}×{width} grid",
            groups.shape()
        )));
    }
    let idx = inverse_indices(&window_partition_indices(height, width, window, shift)?);
    Ok(DenseArray::new(vec![height, width, c], gather(groups.data(), &idx, c))?)
}

fn grid_dims(grid: &DenseArray) -> Result<[usize; 3]> {
    match *grid.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::Validation(format!("expected an H×W×C grid, got {:?}", grid.shape()))),
    }
}

fn gather(src: &[f64], idx: &[usize], width: usize) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| src[i * width..(i + 1) * width].iter().copied())
        .collect()
}

/// Row of the `(2w-1)²`-entry bias table for every `(query, key)` pair of a
/// window, `T × T` entries flattened.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        for k in 0..t {
            let dy = q / window + window - 1 - k / window;
            let dx = q % window + window - 1 - k % window;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Additive attention mask `[nW, T, T]` for shifted windows: 0 between tokens
/// that were neighbours before the cyclic shift, `-inf` across the wrap seam.
/// `None` when `shift == 0`.
pub fn shifted_window_mask(height: usize, width: usize, window: usize, shift: usize) -> Result<Option<DenseArray>> {
    let idx = window_partition_indices(height, width, window, shift)?;
    if shift == 0 {
        return Ok(None);
    }
    let region = |pos: usize, extent: usize| usize::from(pos >= extent - window) + usize::from(pos >= extent - shift);
    // Regions are labelled on the shifted grid, where windowed position
    // (wi*w + a, wj*w + b) sits.
    let t = window * window;
    let n_windows = idx.len() / t;
    let wins_per_row = width / window;
    let mut data = Vec::with_capacity(n_windows * t * t);
    for win in 0..n_windows {
        let label = |tok: usize| {
            let y = (win / wins_per_row) * window + tok / window;
            let x = (win % wins_per_row) * window + tok % window;
            region(y, height) * 3 + region(x, width)
        };
        for q in 0..t {
            for k in 0..t {
                data.push(if label(q) == label(k) { 0.0 } else { f64::NEG_INFINITY });
            }
        }
    }
    Ok(Some(DenseArray::new(vec![n_windows, t, t], data)?))
}

/// Output position `(i, j)` of a 2×2 merge reads `(2i,2j)`, `(2i+1,2j)`,
/// `(2i,2j+1)`, `(2i+1,2j+1)` in that order.
pub fn merge_indices(height: usize, width: usize) -> Result<Vec<usize>> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::Config(format!("cannot merge an odd {height}×{width} grid")));
    }
    let mut idx = Vec::with_capacity(height * width);
    for i in 0..height / 2 {
        for j in 0..width / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * i + dy) * width + 2 * j + dx);
            }
        }
    }
    Ok(idx)
}

/// Repeats a per-slice row index over `n` stacked slices of `per` rows each.
pub fn batched_indices(base: &[usize], n: usize, per: usize) -> Arc<Vec<usize>> {
    Arc::new(
        (0..n)
            .flat_map(|s| base.iter().map(move |&i| s * per + i))
            .collect(),
    )
}

/// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
pub fn linear(tape: &Tape, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add(&y, b)?,
        None => y,
    })
}

pub struct AttentionParams<'a> {
    pub qkv_w: &'a Var,
    pub qkv_b: &'a Var,
    pub proj_w: &'a Var,
    pub proj_b: &'a Var,
}

/// Multi-head scaled dot-product attention within groups.
///
/// `x` is `[B, G, T, C]`; `bias`, if given, must broadcast against the score
/// tensor `[B, G, heads, T, T]`.
pub fn multi_head_attention(
    tape: &Tape,
    x: &Var,
    p: &AttentionParams<'_>,
    heads: usize,
    bias: Option<&Var>,
) -> Result<Var> {
    let &[b, g, t, c] = x.shape() else {
        return Err(Error::Validation(format!("attention input must be rank 4, got {:?}", x.shape())));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
    }
    let hd = c / heads;
    let qkv = linear(tape, x, p.qkv_w, Some(p.qkv_b))?;
    let qkv = tape.reshape(&qkv, &[b, g, t, 3, heads, hd])?;
    let qkv = tape.permute(&qkv, &[3, 0, 1, 4, 2, 5])?;
    let part = |i: usize| -> Result<Var> {
        let v = tape.narrow(&qkv, 0, i, 1)?;
        Ok(tape.reshape(&v, &[b * g * heads, t, hd])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = tape.matmul_t(&q, &k, false, true)?;
    let scores = tape.scale(&scores, 1.0 / (hd as f64).sqrt());
    let scores = tape.reshape(&scores, &[b, g, heads, t, t])?;
    let scores = match bias {
        Some(bias) => tape.add(&scores, bias)?,
        None => scores,
    };
    let attn = tape.softmax(&scores, 4)?;
    let attn = tape.reshape(&attn, &[b * g * heads, t, t])?;
    let out = tape.matmul(&attn, &v)?;
    let out = tape.reshape(&out, &[b, g, heads, t, hd])?;
    let out = tape.permute(&out, &[0, 1, 3, 2, 4])?;
    let out = tape.reshape(&out, &[b, g, t, c])?;
    linear(tape, &out, p.proj_w, Some(p.proj_b))
}

/// Index tables for one `(grid, window, shift)` combination.
#[derive(Clone, Debug)]
pub struct WindowGeometry {
    pub side: usize,
    pub window: usize,
    pub shift: usize,
    pub partition: Vec<usize>,
    pub reverse: Vec<usize>,
    pub mask: Option<Arc<DenseArray>>,
    pub relative_index: Arc<Vec<usize>>,
}

impl WindowGeometry {
    pub fn new(side: usize, window: usize, shift: usize) -> Result<Self> {
        let partition = window_partition_indices(side, side, window, shift)?;
        let reverse = inverse_indices(&partition);
        let mask = shifted_window_mask(side, side, window, shift)?.map(|m| {
            let [nw, t, _] = [m.shape()[0], m.shape()[1], m.shape()[2]];
            Arc::new(m.reshape(&[nw, 1, t, t]).expect("same element count"))
        });
        Ok(Self {
            side,
            window,
            shift,
            partition,
            reverse,
            mask,
            relative_index: Arc::new(relative_position_index(window)),
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.side / self.window).pow(2)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Shifted-window attention over `x: [N, L, C]`, returning `[N, L, C]`.
///
/// `rel_table` is the `[(2w-1)², heads]` relative position bias.
pub fn window_attention(
    tape: &Tape,
    x: &Var,
    p: &AttentionParams<'_>,
    rel_table: &Var,
    heads: usize,
    geo: &WindowGeometry,
) -> Result<Var> {
    let &[n, l, c] = x.shape() else {
        return Err(Error::Validation(format!("token tensor must be [N, L, C], got {:?}", x.shape())));
    };
    if l != geo.side * geo.side {
        return Err(Error::Validation(format!("{l} tokens do not form a {0}×{0} grid", geo.side)));
    }
    let (nw, t) = (geo.num_windows(), geo.tokens_per_window());
    let flat = tape.reshape(x, &[n * l, c])?;
    let groups = tape.gather_rows(&flat, batched_indices(&geo.partition, n, l))?;
    let groups = tape.reshape(&groups, &[n, nw, t, c])?;

    let bias = tape.gather_rows(rel_table, geo.relative_index.clone())?;
    let bias = tape.permute(&bias, &[1, 0])?;
    let mut bias = tape.reshape(&bias, &[heads, t, t])?;
    if let Some(mask) = &geo.mask {
        bias = tape.add(&bias, &tape.constant_shared(mask.clone()))?;
    }
    let out = multi_head_attention(tape, &groups, p, heads, Some(&bias))?;

    let out = tape.reshape(&out, &[n * l, c])?;
    let out = tape.gather_rows(&out, batched_indices(&geo.reverse, n, l))?;
    Ok(tape.reshape(&out, &[n, l, c])?)
}

/// Split `[N, 3, S, S]` images into `[N, L, 3·p·p]` flattened patches, each
/// patch ordered `(channel, dy, dx)`.
pub fn patchify(data: &[f64], n: usize, channels: usize, size: usize, patch: usize) -> Result<DenseArray> {
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Config(format!("image side {size} is not divisible by patch {patch}")));
    }
    if data.len() != n * channels * size * size {
        return Err(Error::Validation(format!(
            "{} values do not form {n} images of {channels}×{size}×{size}",
            data.len()
        )));
    }
    let g = size / patch;
    let mut out = Vec::with_capacity(data.len());
    for s in 0..n {
        let img = &data[s * channels * size * size..(s + 1) * channels * size * size];
        for py in 0..g {
            for px in 0..g {
                for c in 0..channels {
                    for dy in 0..patch {
                        let row = (c * size + py * patch + dy) * size + px * patch;
                        out.extend_from_slice(&img[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(DenseArray::new(vec![n, g * g, channels * patch * patch], out)?)
}
