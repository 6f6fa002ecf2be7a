use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colorspace::ColorSpace;
use crate::dataset::{CombineMode, SplitSpec};
use crate::error::{Error, Result};
use crate::swin::SwinConfig;
use crate::training::TrainConfig;
use crate::tsne::TsneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Intra,
    Combined,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub id: String,
    pub root: PathBuf,
}

/// Cross-corpus pairs. An omitted `train` trains on every corpus in turn;
/// an empty `test` evaluates on every other corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossSpec {
    pub train: Option<String>,
    pub test: Vec<String>,
}

/// Class balancing before the split: `target` records per class, or the
/// larger class count when `to_max` is set. Neither means no balancing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceSpec {
    pub target: Option<usize>,
    pub to_max: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombineSpec {
    /// Records per class in the combined set; defaults to the largest
    /// achievable equal count.
    pub cap: Option<usize>,
    pub mode: CombineMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSpec {
    /// Maximum points passed to t-SNE (stratified subsample).
    pub cap: usize,
    pub tsne: TsneConfig,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        Self {
            cap: 2000,
            tsne: TsneConfig::default(),
        }
    }
}

/// One experiment, loaded from a TOML file. Every command-line flag has a
/// twin here; flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Master seed: model init, split, balance, combine, shuffling, t-SNE.
    pub seed: u64,
    pub deterministic: bool,
    pub colorspaces: Vec<ColorSpace>,
    pub protocol: Protocol,
    pub corpus: Vec<CorpusSpec>,
    pub cross: CrossSpec,
    pub balance: BalanceSpec,
    pub combine: CombineSpec,
    pub model: SwinConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub embed: Option<EmbedSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            deterministic: false,
            colorspaces: ColorSpace::ALL.to_vec(),
            protocol: Protocol::Intra,
            corpus: Vec::new(),
            cross: CrossSpec::default(),
            balance: BalanceSpec::default(),
            combine: CombineSpec::default(),
            model: SwinConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            embed: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut spec: Self = toml::from_str(text).map_err(|e| Error::Spec(format!("experiment config: {e}")))?;
        spec.set_seed(spec.seed);
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?).map_err(|e| e.context(format!("{}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(format!("cannot serialize experiment: {e}")))
    }

    /// Sets the master seed and every derived seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.split.seed = seed;
        if let Some(e) = &mut self.embed {
            e.tsne.seed = seed;
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn corpus(&self, id: &str) -> Result<&CorpusSpec> {
        self.corpus
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Spec(format!("no corpus with id {id:?}")))
    }

    /// Ordered `(train, test)` pairs of a cross-corpus run.
    pub fn cross_pairs(&self) -> Result<Vec<(String, String)>> {
        let ids: Vec<&String> = self.corpus.iter().map(|c| &c.id).collect();
        let trains: Vec<&String> = match &self.cross.train {
            Some(t) => vec![&self.corpus(t)?.id],
            None => ids.clone(),
        };
        let mut pairs = Vec::new();
        for t in trains {
            let tests: Vec<&String> = if self.cross.test.is_empty() {
                ids.iter().copied().filter(|i| *i != t).collect()
            } else {
                self.cross.test.iter().collect()
            };
            for s in tests {
                if s == t {
                    return Err(Error::Spec(format!("cross pair trains and tests on the same corpus {t:?}")));
                }
                self.corpus(s)?;
                pairs.push((t.clone(), s.clone()));
            }
        }
        Ok(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let safe = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.+".contains(c));
        if !safe(&self.run_id) {
            return Err(Error::Spec(format!("run id {:?} must be non-empty [A-Za-z0-9-_.+]", self.run_id)));
        }
        if self.corpus.is_empty() {
            return Err(Error::Spec("at least one corpus is required".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.corpus {
            if !safe(&c.id) || !seen.insert(&c.id) {
                return Err(Error::Spec(format!("corpus id {:?} is empty, unsafe or repeated", c.id)));
            }
        }
        if self.colorspaces.is_empty() {
            return Err(Error::Spec("at least one color space is required".into()));
        }
        if self.protocol == Protocol::Cross {
            if self.corpus.len() < 2 {
                return Err(Error::Spec("cross-corpus runs need at least two corpora".into()));
            }
            self.cross_pairs()?;
        }
        if let Some(e) = &self.embed {
            if e.cap < 4 {
                return Err(Error::Spec(format!("embedding cap {} < 4", e.cap)));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()
    }
}
