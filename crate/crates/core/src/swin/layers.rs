//! Differentiable building blocks of the Swin Transformer. Token maps are
//! carried as `[H, W, C]` between blocks.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var, LAYER_NORM_EPS};

/// Value added to attention logits of position pairs that must not attend.
pub const MASK_VALUE: f64 = -1e9;

fn ln<'g, T: Scalar>(x: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
    x.layer_norm(gamma, beta, T::from_f64_lossy(LAYER_NORM_EPS))
}

fn dims3(x: &Var<'_, impl Scalar>, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::Shape(format!("{what}: expected a rank-3 tensor, got {s:?}"))),
    }
}

/// Weights of the patch-embedding stem.
pub struct PatchEmbedWeights<'g, T: Scalar> {
    pub proj_weight: Var<'g, T>,
    pub proj_bias: Var<'g, T>,
    pub norm_weight: Var<'g, T>,
    pub norm_bias: Var<'g, T>,
}

/// Splits `[3, H, W]` into non-overlapping `patch × patch` tiles, projects
/// each to `C` channels and layer-norms: `[H/patch, W/patch, C]`.
pub fn patch_embed<'g, T: Scalar>(
    image: Var<'g, T>,
    w: &PatchEmbedWeights<'g, T>,
    patch: usize,
) -> Result<Var<'g, T>> {
    let (c, h, wd) = dims3(&image, "patch_embed")?;
    if patch == 0 || h % patch != 0 || wd % patch != 0 {
        return Err(Error::Shape(format!(
            "patch_embed: {h}x{wd} input not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, wd / patch);
    let embed = w.proj_bias.len();
    let tokens = image
        .reshape(vec![c, gh, patch, gw, patch])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape(vec![gh * gw, c * patch * patch])?
        .linear(w.proj_weight, Some(w.proj_bias))?;
    ln(tokens, w.norm_weight, w.norm_bias)?.reshape(vec![gh, gw, embed])
}

/// `[H, W, C] → [nW, window², C]`, windows in row-major order.
pub fn window_partition<'g, T: Scalar>(x: Var<'g, T>, window: usize) -> Result<Var<'g, T>> {
    let (h, w, c) = dims3(&x, "window_partition")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!(
            "window_partition: {h}x{w} grid not divisible by window {window}"
        )));
    }
    x.reshape(vec![h / window, window, w / window, window, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(vec![(h / window) * (w / window), window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'g, T: Scalar>(windows: Var<'g, T>, window: usize, h: usize, w: usize) -> Result<Var<'g, T>> {
    let (nw, n, c) = dims3(&windows, "window_reverse")?;
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) || nw != (h / window) * (w / window) || n != window * window {
        return Err(Error::Shape(format!(
            "window_reverse: {:?} does not tile a {h}x{w} grid with window {window}",
            windows.shape()
        )));
    }
    windows
        .reshape(vec![h / window, w / window, window, window, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(vec![h, w, c])
}

/// For every ordered pair of positions in a window, the row of the bias
/// table holding their relative offset.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let span = 2 * window - 1;
    let n = window * window;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            index.push(dy * span + dx);
        }
    }
    index
}

/// Additive attention mask for the cyclically shifted grid: `[nW, N, N]`
/// with 0 for pairs from the same pre-shift region and [`MASK_VALUE`]
/// otherwise.
pub fn shifted_window_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor<T>> {
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
        return Err(Error::Shape(format!(
            "shifted_window_mask: {h}x{w} grid not divisible by window {window}"
        )));
    }
    let n = window * window;
    let nw = (h / window) * (w / window);
    if shift == 0 {
        return Tensor::zeros(vec![nw, n, n]);
    }
    if shift >= window {
        return Err(Error::Parameter(format!("shift {shift} must be smaller than window {window}")));
    }
    // Label the three horizontal and three vertical bands of the shifted grid.
    let band = |pos: usize, extent: usize| -> usize {
        if pos < extent - window {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = band(y, h) * 3 + band(x, w);
        }
    }
    let masked = T::from_f64_lossy(MASK_VALUE);
    let mut data = vec![T::zero(); nw * n * n];
    for wy in 0..h / window {
        for wx in 0..w / window {
            let win = wy * (w / window) + wx;
            let label_at = |p: usize| labels[(wy * window + p / window) * w + wx * window + p % window];
            for i in 0..n {
                for j in 0..n {
                    if label_at(i) != label_at(j) {
                        data[(win * n + i) * n + j] = masked;
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw, n, n], data)
}

pub struct AttentionWeights<'g, T: Scalar> {
    pub qkv_weight: Var<'g, T>,
    pub qkv_bias: Var<'g, T>,
    pub proj_weight: Var<'g, T>,
    pub proj_bias: Var<'g, T>,
    /// Relative position bias table `[(2w−1)², heads]` together with the
    /// window it was built for.
    pub bias_table: Option<(Var<'g, T>, usize)>,
}

/// Multi-head self-attention inside each window:
/// `softmax(QKᵀ/√d + B + mask) · V`, heads concatenated and projected.
/// `x` is `[nW, N, C]`; `mask`, when given, is `[nW, N, N]`.
pub fn window_attention<'g, T: Scalar>(
    x: Var<'g, T>,
    w: &AttentionWeights<'g, T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Var<'g, T>> {
    let (nw, n, c) = dims3(&x, "window_attention")?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!("window_attention: {c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let g = x.graph();
    let qkv = x
        .reshape(vec![nw * n, c])?
        .linear(w.qkv_weight, Some(w.qkv_bias))?
        .reshape(vec![nw, n, 3, heads, d])?
        .permute(&[2, 0, 3, 1, 4])?;
    let q = qkv.select(0)?.reshape(vec![nw * heads, n, d])?;
    let k = qkv.select(1)?.reshape(vec![nw * heads, n, d])?;
    let v = qkv.select(2)?.reshape(vec![nw * heads, n, d])?;

    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut logits = q.bmm(k, true)?.scale(scale)?.reshape(vec![nw, heads, n, n])?;
    if let Some((table, window)) = w.bias_table {
        if window * window != n {
            return Err(Error::Shape(format!(
                "window_attention: bias table for window {window} used with {n} positions"
            )));
        }
        let bias = table
            .gather_rows(&relative_position_index(window))?
            .permute(&[1, 0])?
            .reshape(vec![heads, n, n])?;
        logits = logits.add_suffix(bias)?;
    }
    if let Some(mask) = mask {
        if mask.shape() != [nw, n, n] {
            return Err(Error::Shape(format!(
                "window_attention: mask {:?} does not match [{nw}, {n}, {n}]",
                mask.shape()
            )));
        }
        let mut expanded = Vec::with_capacity(nw * heads * n * n);
        for win in mask.data().chunks_exact(n * n) {
            for _ in 0..heads {
                expanded.extend_from_slice(win);
            }
        }
        logits = logits.add(g.constant(vec![nw, heads, n, n], expanded)?)?;
    }
    let attn = logits.softmax(3)?.reshape(vec![nw * heads, n, n])?;
    attn.bmm(v, false)?
        .reshape(vec![nw, heads, n, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![nw * n, c])?
        .linear(w.proj_weight, Some(w.proj_bias))?
        .reshape(vec![nw, n, c])
}

pub struct BlockWeights<'g, T: Scalar> {
    pub norm1_weight: Var<'g, T>,
    pub norm1_bias: Var<'g, T>,
    pub attn: AttentionWeights<'g, T>,
    pub norm2_weight: Var<'g, T>,
    pub norm2_bias: Var<'g, T>,
    pub fc1_weight: Var<'g, T>,
    pub fc1_bias: Var<'g, T>,
    pub fc2_weight: Var<'g, T>,
    pub fc2_bias: Var<'g, T>,
}

/// Pre-norm residual block on `[H, W, C]`: windowed attention (cyclically
/// shifted when `shift > 0`) followed by the GELU MLP.
pub fn swin_block<'g, T: Scalar>(
    x: Var<'g, T>,
    w: &BlockWeights<'g, T>,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var<'g, T>> {
    let (h, wd, c) = dims3(&x, "swin_block")?;
    let s = shift as isize;
    let normed = ln(x.reshape(vec![h * wd, c])?, w.norm1_weight, w.norm1_bias)?.reshape(vec![h, wd, c])?;
    let shifted = if shift > 0 { normed.roll(0, -s)?.roll(1, -s)? } else { normed };
    let mask = if shift > 0 {
        Some(shifted_window_mask::<T>(h, wd, window, shift)?)
    } else {
        None
    };
    let windows = window_partition(shifted, window)?;
    let attended = window_attention(windows, &w.attn, heads, mask.as_ref())?;
    let merged = window_reverse(attended, window, h, wd)?;
    let unshifted = if shift > 0 { merged.roll(0, s)?.roll(1, s)? } else { merged };
    let x = x.add(unshifted)?;

    let flat = x.reshape(vec![h * wd, c])?;
    let mlp = ln(flat, w.norm2_weight, w.norm2_bias)?
        .linear(w.fc1_weight, Some(w.fc1_bias))?
        .gelu()?
        .linear(w.fc2_weight, Some(w.fc2_bias))?;
    flat.add(mlp)?.reshape(vec![h, wd, c])
}

pub struct MergeWeights<'g, T: Scalar> {
    pub norm_weight: Var<'g, T>,
    pub norm_bias: Var<'g, T>,
    pub reduction: Var<'g, T>,
}

/// Concatenates each 2×2 neighborhood, layer-norms the `4C` vector and
/// reduces it to `2C`: `[H, W, C] → [H/2, W/2, 2C]`.
pub fn patch_merging<'g, T: Scalar>(x: Var<'g, T>, w: &MergeWeights<'g, T>) -> Result<Var<'g, T>> {
    let (h, wd, c) = dims3(&x, "patch_merging")?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::Shape(format!("patch_merging: odd grid {h}x{wd}")));
    }
    let (h2, w2) = (h / 2, wd / 2);
    let out_dim = w.reduction.shape().get(1).copied().unwrap_or(0);
    let cat = x
        .reshape(vec![h2, 2, w2, 2, c])?
        .permute(&[0, 2, 3, 1, 4])?
        .reshape(vec![h2 * w2, 4 * c])?;
    ln(cat, w.norm_weight, w.norm_bias)?
        .linear(w.reduction, None)?
        .reshape(vec![h2, w2, out_dim])
}
