use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::SwinConfig;
use super::layers::{
    patch_embed, patch_merging, swin_block, AttentionWeights, BlockWeights, MergeWeights, PatchEmbedWeights,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var, WeightFile, LAYER_NORM_EPS};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// The classifier: configuration plus every named parameter.
#[derive(Debug, Clone)]
pub struct SwinModel<T: Scalar = f32> {
    config: SwinConfig,
    params: IndexMap<String, Tensor<T>>,
}

fn architecture(c: &SwinConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let e = c.embed_dim;
    let patch_in = SwinConfig::IN_CHANNELS * c.patch_size * c.patch_size;
    add("patch_embed.proj.weight".into(), vec![patch_in, e], Normal);
    add("patch_embed.proj.bias".into(), vec![e], Zeros);
    add("patch_embed.norm.weight".into(), vec![e], Ones);
    add("patch_embed.norm.bias".into(), vec![e], Zeros);
    for s in 0..c.num_stages() {
        let g = c.stage(s);
        let d = g.dim;
        let hidden = d * c.mlp_ratio;
        for b in 0..c.depths[s] {
            let p = format!("layers.{s}.blocks.{b}");
            add(format!("{p}.norm1.weight"), vec![d], Ones);
            add(format!("{p}.norm1.bias"), vec![d], Zeros);
            add(format!("{p}.attn.qkv.weight"), vec![d, 3 * d], Normal);
            add(format!("{p}.attn.qkv.bias"), vec![3 * d], Zeros);
            if c.relative_position_bias {
                let span = 2 * g.window - 1;
                add(
                    format!("{p}.attn.relative_position_bias_table"),
                    vec![span * span, g.heads],
                    Zeros,
                );
            }
            add(format!("{p}.attn.proj.weight"), vec![d, d], Normal);
            add(format!("{p}.attn.proj.bias"), vec![d], Zeros);
            add(format!("{p}.norm2.weight"), vec![d], Ones);
            add(format!("{p}.norm2.bias"), vec![d], Zeros);
            add(format!("{p}.mlp.fc1.weight"), vec![d, hidden], Normal);
            add(format!("{p}.mlp.fc1.bias"), vec![hidden], Zeros);
            add(format!("{p}.mlp.fc2.weight"), vec![hidden, d], Normal);
            add(format!("{p}.mlp.fc2.bias"), vec![d], Zeros);
        }
        if s + 1 < c.num_stages() {
            let p = format!("layers.{s}.downsample");
            add(format!("{p}.norm.weight"), vec![4 * d], Ones);
            add(format!("{p}.norm.bias"), vec![4 * d], Zeros);
            add(format!("{p}.reduction.weight"), vec![4 * d, 2 * d], Normal);
        }
    }
    let f = c.feature_dim();
    add("norm.weight".into(), vec![f], Ones);
    add("norm.bias".into(), vec![f], Zeros);
    add("head.weight".into(), vec![f, c.num_classes], Normal);
    add("head.bias".into(), vec![c.num_classes], Zeros);
    out
}

/// Normal draw rejected outside ±2σ.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameters of one model bound into a graph.
pub struct BoundParams<'g, T: Scalar> {
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    /// Binds arbitrary graph variables under parameter names, e.g. leaves
    /// perturbed by a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'g, T>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn patch_embed(&self) -> Result<PatchEmbedWeights<'g, T>> {
        Ok(PatchEmbedWeights {
            proj_weight: self.get("patch_embed.proj.weight")?,
            proj_bias: self.get("patch_embed.proj.bias")?,
            norm_weight: self.get("patch_embed.norm.weight")?,
            norm_bias: self.get("patch_embed.norm.bias")?,
        })
    }

    pub fn block(&self, stage: usize, block: usize, window: usize) -> Result<BlockWeights<'g, T>> {
        let p = format!("layers.{stage}.blocks.{block}");
        let bias_table = self
            .vars
            .get(&format!("{p}.attn.relative_position_bias_table"))
            .map(|&v| (v, window));
        Ok(BlockWeights {
            norm1_weight: self.get(&format!("{p}.norm1.weight"))?,
            norm1_bias: self.get(&format!("{p}.norm1.bias"))?,
            attn: AttentionWeights {
                qkv_weight: self.get(&format!("{p}.attn.qkv.weight"))?,
                qkv_bias: self.get(&format!("{p}.attn.qkv.bias"))?,
                proj_weight: self.get(&format!("{p}.attn.proj.weight"))?,
                proj_bias: self.get(&format!("{p}.attn.proj.bias"))?,
                bias_table,
            },
            norm2_weight: self.get(&format!("{p}.norm2.weight"))?,
            norm2_bias: self.get(&format!("{p}.norm2.bias"))?,
            fc1_weight: self.get(&format!("{p}.mlp.fc1.weight"))?,
            fc1_bias: self.get(&format!("{p}.mlp.fc1.bias"))?,
            fc2_weight: self.get(&format!("{p}.mlp.fc2.weight"))?,
            fc2_bias: self.get(&format!("{p}.mlp.fc2.bias"))?,
        })
    }

    pub fn merge(&self, stage: usize) -> Result<MergeWeights<'g, T>> {
        let p = format!("layers.{stage}.downsample");
        Ok(MergeWeights {
            norm_weight: self.get(&format!("{p}.norm.weight"))?,
            norm_bias: self.get(&format!("{p}.norm.bias"))?,
            reduction: self.get(&format!("{p}.reduction.weight"))?,
        })
    }
}

/// Runs the blocks of one stage (no downsampling) on `[H, W, C]` tokens.
pub fn stage_blocks<'g, T: Scalar>(
    tokens: Var<'g, T>,
    params: &BoundParams<'g, T>,
    config: &SwinConfig,
    stage: usize,
) -> Result<Var<'g, T>> {
    let g = config.stage(stage);
    let mut x = tokens;
    for b in 0..config.depths[stage] {
        let shift = if b % 2 == 1 { g.shift } else { 0 };
        x = swin_block(x, &params.block(stage, b, g.window)?, g.heads, g.window, shift)?;
    }
    Ok(x)
}

/// Full forward pass of one `[3, H, W]` image. Returns `[1, classes]`
/// logits and the `[1, F]` pooled, final-normed features.
pub fn forward_sample<'g, T: Scalar>(
    image: Var<'g, T>,
    params: &BoundParams<'g, T>,
    config: &SwinConfig,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let expected = [SwinConfig::IN_CHANNELS, config.image_size, config.image_size];
    if image.shape() != expected {
        return Err(Error::Shape(format!(
            "model input must be {expected:?}, got {:?}",
            image.shape()
        )));
    }
    let mut x = patch_embed(image, &params.patch_embed()?, config.patch_size)?;
    for s in 0..config.num_stages() {
        x = stage_blocks(x, params, config, s)?;
        if s + 1 < config.num_stages() {
            x = patch_merging(x, &params.merge(s)?)?;
        }
    }
    let shape = x.shape();
    let (tokens, f) = (shape[0] * shape[1], shape[2]);
    let features = x
        .reshape(vec![tokens, f])?
        .layer_norm(
            params.get("norm.weight")?,
            params.get("norm.bias")?,
            T::from_f64_lossy(LAYER_NORM_EPS),
        )?
        .mean_axis(0)?
        .reshape(vec![1, f])?;
    let logits = features.linear(params.get("head.weight")?, Some(params.get("head.bias")?))?;
    Ok((logits, features))
}

impl<T: Scalar> SwinModel<T> {
    /// Fresh model: truncated normal (σ = 0.02) projections, zero biases and
    /// bias tables, unit/zero norms.
    pub fn new(config: SwinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape, init) in architecture(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal => (0..n)
                    .map(|_| T::from_f64_lossy(truncated_normal(&mut rng, INIT_STD)))
                    .collect(),
            };
            params.insert(name, Tensor::new(shape, values)?.requires_grad(true));
        }
        Ok(Self { config, params })
    }

    /// Builds a model from explicit parameters, checking that the names and
    /// shapes are exactly those implied by `config`.
    pub fn from_params(config: SwinConfig, params: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let arch = architecture(&config);
        if arch.len() != params.len() {
            return Err(Error::Spec(format!(
                "config implies {} parameters, got {}",
                arch.len(),
                params.len()
            )));
        }
        let mut ordered = IndexMap::new();
        for (name, shape, _) in arch {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Spec(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Spec(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            ordered.insert(name, t.clone().requires_grad(true));
        }
        Ok(Self { config, params: ordered })
    }

    pub fn config(&self) -> &SwinConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Result<BoundParams<'g, T>> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), graph.leaf(t)?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    pub fn cast<U: Scalar>(&self) -> SwinModel<U> {
        SwinModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Inference on a `[B, 3, H, W]` batch: `([B, classes], [B, F])`.
    /// Samples are independent graphs evaluated in parallel; row order
    /// always follows the batch.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = batch.shape();
        let per = SwinConfig::IN_CHANNELS * self.config.image_size * self.config.image_size;
        if shape.len() != 4 || shape[1..] != [SwinConfig::IN_CHANNELS, self.config.image_size, self.config.image_size] {
            return Err(Error::Shape(format!(
                "forward expects [B, 3, {0}, {0}], got {shape:?}",
                self.config.image_size
            )));
        }
        let b = shape[0];
        let rows = (0..b)
            .into_par_iter()
            .map(|i| {
                let image = Tensor::new(
                    shape[1..].to_vec(),
                    batch.data()[i * per..(i + 1) * per].to_vec(),
                )?;
                self.forward_one(&image)
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = self.config.num_classes;
        let f = self.config.feature_dim();
        let mut logits = Vec::with_capacity(b * classes);
        let mut feats = Vec::with_capacity(b * f);
        for (l, ft) in rows {
            logits.extend(l);
            feats.extend(ft);
        }
        Ok((Tensor::new(vec![b, classes], logits)?, Tensor::new(vec![b, f], feats)?))
    }

    /// Logits and features of a single `[3, H, W]` image.
    pub fn forward_one(&self, image: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let g = Graph::new();
        let params = self.bind_frozen(&g)?;
        let x = g.leaf(image)?;
        let (logits, features) = forward_sample(x, &params, &self.config)?;
        Ok((logits.value().to_vec(), features.value().to_vec()))
    }

    fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> Result<BoundParams<'g, T>> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), graph.leaf(&t.clone().requires_grad(false))?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }
}

impl SwinModel<f32> {
    pub fn to_weight_file(&self) -> Result<WeightFile> {
        Ok(WeightFile {
            metadata: serde_json::to_string(&self.config)?,
            tensors: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), t.clone().requires_grad(false)))
                .collect(),
        })
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let config: SwinConfig = serde_json::from_str(&file.metadata)
            .map_err(|e| Error::WeightFormat(format!("config metadata: {e}")))?;
        let params = file.tensors.iter().cloned().collect();
        Self::from_params(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weight_file()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_unique_and_complete() {
        let m = SwinModel::<f32>::new(SwinConfig::tiny(), 0).unwrap();
        let names: std::collections::HashSet<_> = m.params().keys().collect();
        assert_eq!(names.len(), m.params().len());
        // 4 patch-embed + 13 per block × 12 + 3 per merge × 3 + 4 final
        assert_eq!(m.params().len(), 4 + 13 * 12 + 9 + 4);
        let table = m.param("layers.0.blocks.0.attn.relative_position_bias_table").unwrap();
        assert_eq!(table.shape(), &[169, 3]);
        assert!((27_500_000..28_500_000).contains(&m.num_parameters()), "{}", m.num_parameters());
    }

    #[test]
    fn bias_toggle_removes_tables() {
        let cfg = SwinConfig {
            relative_position_bias: false,
            ..SwinConfig::micro()
        };
        let m = SwinModel::<f32>::new(cfg, 0).unwrap();
        assert!(m.params().keys().all(|k| !k.contains("relative_position")));
    }

    #[test]
    fn init_is_seeded() {
        let a = SwinModel::<f32>::new(SwinConfig::micro(), 3).unwrap();
        let b = SwinModel::<f32>::new(SwinConfig::micro(), 3).unwrap();
        let c = SwinModel::<f32>::new(SwinConfig::micro(), 4).unwrap();
        let w = "layers.0.blocks.0.attn.qkv.weight";
        assert!(a.param(w).unwrap().bit_eq(b.param(w).unwrap()));
        assert!(!a.param(w).unwrap().bit_eq(c.param(w).unwrap()));
        let v = a.param(w).unwrap().data();
        assert!(v.iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn weight_file_roundtrip() {
        let m = SwinModel::<f32>::new(SwinConfig::micro(), 9).unwrap();
        let bytes = m.to_weight_file().unwrap().encode();
        let back = SwinModel::from_weight_file(&WeightFile::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.to_weight_file().unwrap().encode(), bytes);
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let m = SwinModel::<f32>::new(SwinConfig::micro(), 9).unwrap();
        let mut p = m.params().clone();
        p.insert("head.bias".into(), Tensor::zeros(vec![3]).unwrap());
        assert!(SwinModel::from_params(SwinConfig::micro(), p).is_err());
    }
}
