mod common;

use common::{randn, rng, uniform};
use indexmap::IndexMap;
use rand::Rng;
use swinforensics::numerics::{Graph, Tensor};
use swinforensics::swin::{
    shifted_window_mask, swin_block, window_attention, window_partition, window_reverse, AttentionWeights,
    BlockWeights, SwinConfig, SwinModel, MASK_VALUE,
};

#[test]
fn partition_roundtrip_is_bit_exact() {
    let mut r = rng(2024);
    for case in 0..100 {
        let window = r.random_range(1..=7usize);
        let h = window * r.random_range(1..=4usize);
        let w = window * r.random_range(1..=4usize);
        let c = r.random_range(1..=5usize);
        let x = uniform(&[h, w, c], -1e3, 1e3, case);
        let g = Graph::<f64>::new();
        let v = g.leaf(&x).unwrap();
        let parts = window_partition(v, window).unwrap();
        assert_eq!(parts.shape(), vec![(h / window) * (w / window), window * window, c]);
        let back = window_reverse(parts, window, h, w).unwrap().to_tensor();
        assert!(back.bit_eq(&x), "case {case}: {h}x{w}x{c} window {window}");
    }
}

#[test]
fn partition_places_tokens_in_row_major_windows() {
    let (h, w, win) = (4, 6, 2);
    let data: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
    let g = Graph::<f64>::new();
    let parts = window_partition(g.leaf(&Tensor::new(vec![h, w, 1], data).unwrap()).unwrap(), win).unwrap();
    let v = parts.value();
    for wy in 0..h / win {
        for wx in 0..w / win {
            for p in 0..win * win {
                let (y, x) = (wy * win + p / win, wx * win + p % win);
                assert_eq!(v[(wy * (w / win) + wx) * win * win + p], (y * w + x) as f64);
            }
        }
    }
}

/// Masks pairs whose pre-shift positions were not contiguous: after the
/// cyclic shift, a token at `(y, x)` came from `((y + s) mod H, (x + s) mod W)`
/// and belongs to a wrapped band when that addition overflowed.
fn brute_force_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    let wrapped = |v: usize, extent: usize| v + shift >= extent;
    let nw_x = w / window;
    let n = window * window;
    let mut out = vec![f64::NAN; (h / window) * nw_x * n * n];
    let positions: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
    for &(ya, xa) in &positions {
        for &(yb, xb) in &positions {
            let same_window = ya / window == yb / window && xa / window == xb / window;
            if !same_window {
                continue;
            }
            let contiguous = wrapped(ya, h) == wrapped(yb, h) && wrapped(xa, w) == wrapped(xb, w);
            let win = (ya / window) * nw_x + xa / window;
            let i = (ya % window) * window + xa % window;
            let j = (yb % window) * window + xb % window;
            out[(win * n + i) * n + j] = if contiguous { 0.0 } else { MASK_VALUE };
        }
    }
    out
}

#[test]
fn shifted_mask_matches_region_oracle() {
    for grid in [14, 28, 56] {
        let mask = shifted_window_mask::<f64>(grid, grid, 7, 3).unwrap();
        let oracle = brute_force_mask(grid, grid, 7, 3);
        assert_eq!(mask.data(), &oracle[..], "grid {grid}");
    }
    // Smaller shapes, rectangular grids and other shifts.
    for &(h, w, win, s) in &[(4, 4, 2, 1), (6, 9, 3, 1), (8, 4, 4, 2), (6, 6, 3, 2)] {
        let mask = shifted_window_mask::<f64>(h, w, win, s).unwrap();
        assert_eq!(mask.data(), &brute_force_mask(h, w, win, s)[..], "{h}x{w} w{win} s{s}");
    }
}

#[test]
fn unshifted_mask_is_all_zero() {
    let mask = shifted_window_mask::<f64>(14, 14, 7, 0).unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn masked_softmax_rows_sum_to_one() {
    let mask = shifted_window_mask::<f32>(14, 14, 7, 3).unwrap();
    let (nw, n) = (4, 49);
    let mut r = rng(5);
    let mut logits: Vec<f32> = (0..nw * n * n).map(|_| r.random_range(-8.0..8.0)).collect();
    for (l, m) in logits.iter_mut().zip(mask.data()) {
        *l += m;
    }
    // One row where every entry is masked.
    for v in &mut logits[..n] {
        *v = MASK_VALUE as f32;
    }
    let g = Graph::<f32>::new();
    let p = g.constant(vec![nw, n, n], logits).unwrap().softmax(2).unwrap().value();
    for row in p.chunks_exact(n) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
    // Masked entries of partially masked rows carry no weight.
    for (k, (&pv, &m)) in p.iter().zip(mask.data()).enumerate().skip(n) {
        if m != 0.0 {
            assert_eq!(pv, 0.0, "entry {k}");
        }
    }
}

fn leaf<'g>(g: &'g Graph<f64>, shape: &[usize], data: Vec<f64>) -> swinforensics::numerics::Var<'g, f64> {
    g.leaf(&Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

#[test]
fn two_position_attention_by_hand() {
    // One channel, one head: q = a·x, k = b·x, v = c·x, identity projection.
    let (a, b, c) = (0.7, -1.3, 2.0);
    for &(x1, x2) in &[(0.5, -0.25), (1.0, 2.0), (-3.0, 0.1)] {
        let g = Graph::<f64>::new();
        let x = leaf(&g, &[1, 2, 1], vec![x1, x2]);
        let w = AttentionWeights {
            qkv_weight: leaf(&g, &[1, 3], vec![a, b, c]),
            qkv_bias: leaf(&g, &[3], vec![0.0; 3]),
            proj_weight: leaf(&g, &[1, 1], vec![1.0]),
            proj_bias: leaf(&g, &[1], vec![0.0]),
            bias_table: None,
        };
        let out = window_attention(x, &w, 1, None).unwrap().value();
        for (i, &xi) in [x1, x2].iter().enumerate() {
            let s1 = (a * xi) * (b * x1);
            let s2 = (a * xi) * (b * x2);
            let (e1, e2) = (s1.exp(), s2.exp());
            let expected = (e1 * c * x1 + e2 * c * x2) / (e1 + e2);
            assert!((out[i] - expected).abs() < 1e-6, "{} vs {expected}", out[i]);
        }
    }
}

#[test]
fn constant_values_give_constant_output() {
    let (nw, n, c, heads) = (3, 4, 4, 2);
    let g = Graph::<f64>::new();
    let x = g.leaf(&randn(&[nw, n, c], 1)).unwrap();
    let mut qkv = randn(&[c, 3 * c], 2).to_vec();
    for row in qkv.chunks_exact_mut(3 * c) {
        row[2 * c..].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut qkv_bias = vec![0.0; 3 * c];
    qkv_bias[2 * c..].copy_from_slice(&[0.4, -1.1, 2.5, 0.0]);
    let proj = randn(&[c, c], 3);
    let proj_bias = randn(&[c], 4);
    let w = AttentionWeights {
        qkv_weight: leaf(&g, &[c, 3 * c], qkv),
        qkv_bias: leaf(&g, &[3 * c], qkv_bias.clone()),
        proj_weight: g.leaf(&proj).unwrap(),
        proj_bias: g.leaf(&proj_bias).unwrap(),
        bias_table: Some((g.leaf(&randn(&[9, heads], 5)).unwrap(), 2)),
    };
    let mask = shifted_window_mask::<f64>(2, 6, 2, 1).unwrap();
    let out = window_attention(x, &w, heads, Some(&mask)).unwrap().value();
    let v = &qkv_bias[2 * c..];
    let expected: Vec<f64> = (0..c)
        .map(|o| (0..c).map(|i| v[i] * proj.data()[i * c + o]).sum::<f64>() + proj_bias.data()[o])
        .collect();
    for row in out.chunks_exact(c) {
        for (a, b) in row.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    for shift in [0, 1] {
        let (h, c) = (4, 4);
        let g = Graph::<f64>::new();
        let x = randn(&[h, h, c], 9);
        let zeros = |shape: &[usize]| g.leaf(&Tensor::zeros(shape.to_vec()).unwrap()).unwrap();
        let w = BlockWeights {
            norm1_weight: g.leaf(&randn(&[c], 10)).unwrap(),
            norm1_bias: g.leaf(&randn(&[c], 11)).unwrap(),
            attn: AttentionWeights {
                qkv_weight: g.leaf(&randn(&[c, 3 * c], 12)).unwrap(),
                qkv_bias: g.leaf(&randn(&[3 * c], 13)).unwrap(),
                proj_weight: zeros(&[c, c]),
                proj_bias: zeros(&[c]),
                bias_table: None,
            },
            norm2_weight: g.leaf(&randn(&[c], 14)).unwrap(),
            norm2_bias: g.leaf(&randn(&[c], 15)).unwrap(),
            fc1_weight: g.leaf(&randn(&[c, 4 * c], 16)).unwrap(),
            fc1_bias: g.leaf(&randn(&[4 * c], 17)).unwrap(),
            fc2_weight: zeros(&[4 * c, c]),
            fc2_bias: zeros(&[c]),
        };
        let y = swin_block(g.leaf(&x).unwrap(), &w, 2, 2, shift).unwrap().to_tensor();
        assert!(y.bit_eq(&x), "shift {shift}");
    }
}

#[test]
fn batch_permutation_commutes_with_forward() {
    let model = SwinModel::<f32>::new(SwinConfig::micro(), 11).unwrap();
    let b = 5;
    let per = 3 * 16 * 16;
    let batch = randn(&[b, 3, 16, 16], 12).cast::<f32>();
    let perm = [3, 0, 4, 1, 2];
    let mut shuffled = Vec::with_capacity(b * per);
    for &p in &perm {
        shuffled.extend_from_slice(&batch.data()[p * per..(p + 1) * per]);
    }
    let shuffled = Tensor::new(vec![b, 3, 16, 16], shuffled).unwrap();
    let (l1, f1) = model.forward(&batch).unwrap();
    let (l2, f2) = model.forward(&shuffled).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        assert_eq!(l2.data()[k * 2..k * 2 + 2], l1.data()[p * 2..p * 2 + 2]);
        let f = model.config().feature_dim();
        assert_eq!(f2.data()[k * f..(k + 1) * f], f1.data()[p * f..(p + 1) * f]);
    }
}

/// Plain-loop forward pass over a parameter map, written without the graph
/// engine. Tokens are `grid[y][x][c]` vectors.
mod oracle {
    use super::*;

    pub struct Params<'a>(pub &'a IndexMap<String, Tensor<f64>>);

    impl Params<'_> {
        fn get(&self, name: &str) -> &[f64] {
            self.0[name].data()
        }
    }

    type Grid = Vec<Vec<Vec<f64>>>;

    fn layer_norm(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        v.iter().zip(gamma.iter().zip(beta)).map(|(x, (g, b))| (x - mean) * r * g + b).collect()
    }

    /// `v · W (+ b)` with `W` stored `[in, out]`.
    fn affine(v: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let out = w.len() / v.len();
        (0..out)
            .map(|o| v.iter().enumerate().map(|(i, x)| x * w[i * out + o]).sum::<f64>() + b.map_or(0.0, |b| b[o]))
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    fn block(x: &Grid, p: &Params, prefix: &str, heads: usize, window: usize, shift: usize, bias: bool) -> Grid {
        let h = x.len();
        let c = x[0][0].len();
        let d = c / heads;
        let name = |s: &str| format!("{prefix}.{s}");
        let normed: Grid = x
            .iter()
            .map(|row| row.iter().map(|t| layer_norm(t, p.get(&name("norm1.weight")), p.get(&name("norm1.bias")))).collect())
            .collect();
        let src = |y: usize, xx: usize| ((y + shift) % h, (xx + shift) % h);
        let region = |y: usize, xx: usize| (shift > 0 && y + shift >= h, shift > 0 && xx + shift >= h);
        let mut attn_out: Grid = vec![vec![vec![0.0; c]; h]; h];
        let n = window * window;
        let span = 2 * window - 1;
        for wy in 0..h / window {
            for wx in 0..h / window {
                let pos: Vec<(usize, usize)> =
                    (0..n).map(|i| (wy * window + i / window, wx * window + i % window)).collect();
                let qkv: Vec<Vec<f64>> = pos
                    .iter()
                    .map(|&(y, xx)| {
                        let (sy, sx) = src(y, xx);
                        affine(&normed[sy][sx], p.get(&name("attn.qkv.weight")), Some(p.get(&name("attn.qkv.bias"))))
                    })
                    .collect();
                for i in 0..n {
                    let mut merged = vec![0.0; c];
                    for hd in 0..heads {
                        let mut logits = vec![0.0; n];
                        for j in 0..n {
                            let dot: f64 = (0..d).map(|k| qkv[i][hd * d + k] * qkv[j][c + hd * d + k]).sum();
                            let mut l = dot / (d as f64).sqrt();
                            if bias {
                                let (yi, xi) = (i / window, i % window);
                                let (yj, xj) = (j / window, j % window);
                                let row = (yi + window - 1 - yj) * span + (xi + window - 1 - xj);
                                l += p.get(&name("attn.relative_position_bias_table"))[row * heads + hd];
                            }
                            if region(pos[i].0, pos[i].1) != region(pos[j].0, pos[j].1) {
                                l += MASK_VALUE;
                            }
                            logits[j] = l;
                        }
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for k in 0..d {
                            merged[hd * d + k] = (0..n).map(|j| e[j] / z * qkv[j][2 * c + hd * d + k]).sum();
                        }
                    }
                    let o = affine(&merged, p.get(&name("attn.proj.weight")), Some(p.get(&name("attn.proj.bias"))));
                    let (sy, sx) = src(pos[i].0, pos[i].1);
                    attn_out[sy][sx] = o;
                }
            }
        }
        let mut out = x.clone();
        for y in 0..h {
            for xx in 0..h {
                let t: Vec<f64> = x[y][xx].iter().zip(&attn_out[y][xx]).map(|(a, b)| a + b).collect();
                let n2 = layer_norm(&t, p.get(&name("norm2.weight")), p.get(&name("norm2.bias")));
                let hidden: Vec<f64> = affine(&n2, p.get(&name("mlp.fc1.weight")), Some(p.get(&name("mlp.fc1.bias"))))
                    .into_iter()
                    .map(gelu)
                    .collect();
                let mlp = affine(&hidden, p.get(&name("mlp.fc2.weight")), Some(p.get(&name("mlp.fc2.bias"))));
                out[y][xx] = t.iter().zip(&mlp).map(|(a, b)| a + b).collect();
            }
        }
        out
    }

    fn merge(x: &Grid, p: &Params, prefix: &str) -> Grid {
        let h2 = x.len() / 2;
        (0..h2)
            .map(|y| {
                (0..h2)
                    .map(|xx| {
                        let mut cat = Vec::new();
                        for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            cat.extend_from_slice(&x[2 * y + dy][2 * xx + dx]);
                        }
                        let n = layer_norm(&cat, p.get(&format!("{prefix}.norm.weight")), p.get(&format!("{prefix}.norm.bias")));
                        affine(&n, p.get(&format!("{prefix}.reduction.weight")), None)
                    })
                    .collect()
            })
            .collect()
    }

    /// Logits of one `[3, S, S]` image.
    pub fn forward(image: &Tensor<f64>, p: &Params, cfg: &SwinConfig) -> Vec<f64> {
        let (s, ps) = (cfg.image_size, cfg.patch_size);
        let g = s / ps;
        let px = image.data();
        let mut x: Grid = (0..g)
            .map(|gy| {
                (0..g)
                    .map(|gx| {
                        let mut patch = Vec::new();
                        for ch in 0..3 {
                            for py in 0..ps {
                                for pxx in 0..ps {
                                    patch.push(px[(ch * s + gy * ps + py) * s + gx * ps + pxx]);
                                }
                            }
                        }
                        let t = affine(&patch, p.get("patch_embed.proj.weight"), Some(p.get("patch_embed.proj.bias")));
                        layer_norm(&t, p.get("patch_embed.norm.weight"), p.get("patch_embed.norm.bias"))
                    })
                    .collect()
            })
            .collect();
        for st in 0..cfg.num_stages() {
            let geo = cfg.stage(st);
            for b in 0..cfg.depths[st] {
                let shift = if b % 2 == 1 { geo.shift } else { 0 };
                let prefix = format!("layers.{st}.blocks.{b}");
                x = block(&x, p, &prefix, geo.heads, geo.window, shift, cfg.relative_position_bias);
            }
            if st + 1 < cfg.num_stages() {
                x = merge(&x, p, &format!("layers.{st}.downsample"));
            }
        }
        let tokens: Vec<Vec<f64>> = x
            .iter()
            .flatten()
            .map(|t| layer_norm(t, p.get("norm.weight"), p.get("norm.bias")))
            .collect();
        let f = tokens[0].len();
        let pooled: Vec<f64> = (0..f).map(|k| tokens.iter().map(|t| t[k]).sum::<f64>() / tokens.len() as f64).collect();
        affine(&pooled, p.get("head.weight"), Some(p.get("head.bias")))
    }
}

fn jittered(config: SwinConfig, seed: u64) -> SwinModel<f64> {
    let mut model = SwinModel::<f64>::new(config, seed).unwrap();
    for (k, t) in model.params_mut().values_mut().enumerate() {
        let noise = uniform(t.shape(), -0.2, 0.2, seed * 7919 + k as u64);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    model
}

#[test]
fn micro_forward_matches_plain_loops() {
    let mut deeper = SwinConfig::micro();
    deeper.depths = vec![2, 2];
    let mut no_bias = SwinConfig::micro();
    no_bias.relative_position_bias = false;
    for (k, cfg) in [SwinConfig::micro(), deeper, no_bias].into_iter().enumerate() {
        let model = jittered(cfg.clone(), 40 + k as u64);
        let image = randn(&[3, 16, 16], 50 + k as u64);
        let (logits, _) = model.forward_one(&image).unwrap();
        let expected = oracle::forward(&image, &oracle::Params(model.params()), &cfg);
        for (a, b) in logits.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-5, "config {k}: {a} vs {b}");
        }
    }
}

#[test]
fn deeper_micro_exercises_the_shifted_block() {
    let mut cfg = SwinConfig::micro();
    cfg.depths = vec![2, 2];
    assert_eq!(cfg.stage(0).shift, 1);
    assert_eq!(cfg.stage(1).shift, 0);
    assert_eq!(SwinConfig::micro().depths, vec![1, 1]);
}
