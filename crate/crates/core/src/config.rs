//! Run configuration: one TOML file with [model], [data] and [train]
//! sections reproduces a run. Unknown keys are rejected; cross-field
//! constraints are re-validated at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AssayType, ProfileSchema, SpeciesSchema, TrackDef};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn fail(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width d_h.
    pub d_h: usize,
    /// Transformer layers D.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Encoder expert count N.
    pub n_experts: usize,
    /// Encoder experts selected per token k.
    pub top_k: usize,
    /// Gate logit noise scale during training.
    pub noise_sigma: f64,
    /// Decoder shared expert count K.
    pub dec_experts: usize,
    /// Expert-selected groups per profile type R.
    pub dec_groups: usize,
    /// Decoder experts selected per group k_dec.
    pub dec_top_k: usize,
    /// Decoder expert depthwise kernel width (odd).
    pub dec_kernel: usize,
    /// Stem conv kernel width (odd).
    pub stem_kernel: usize,
    /// Spatial compression factor (power of two; one pooling stage per
    /// conv block).
    pub bin_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_h: 64,
            n_layers: 2,
            n_heads: 4,
            n_experts: 4,
            top_k: 3,
            noise_sigma: 0.01,
            dec_experts: 8,
            dec_groups: 2,
            dec_top_k: 3,
            dec_kernel: 5,
            stem_kernel: 5,
            bin_size: 128,
            seq_len: 2048,
        }
    }
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        self.seq_len / self.bin_size
    }

    pub fn n_conv_blocks(&self) -> usize {
        self.bin_size.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.bin_size < 2 || !self.bin_size.is_power_of_two() {
            return Err(fail(format!("model.bin_size: {} is not a power of two >= 2", self.bin_size)));
        }
        if self.seq_len == 0 || self.seq_len % self.bin_size != 0 {
            return Err(fail(format!(
                "model.seq_len: {} not divisible by bin_size {}",
                self.seq_len, self.bin_size
            )));
        }
        if self.d_h == 0 || self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(fail(format!(
                "model.n_heads: d_h {} not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(fail("model.n_layers: must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(fail(format!(
                "model.top_k: {} outside [1, n_experts = {}]",
                self.top_k, self.n_experts
            )));
        }
        if self.dec_top_k == 0 || self.dec_top_k > self.dec_experts {
            return Err(fail(format!(
                "model.dec_top_k: {} outside [1, dec_experts = {}]",
                self.dec_top_k, self.dec_experts
            )));
        }
        if self.dec_groups == 0 {
            return Err(fail("model.dec_groups: must be >= 1"));
        }
        if self.dec_kernel % 2 == 0 || self.dec_kernel == 0 {
            return Err(fail(format!("model.dec_kernel: {} must be odd", self.dec_kernel)));
        }
        if self.stem_kernel % 2 == 0 || self.stem_kernel == 0 {
            return Err(fail(format!("model.stem_kernel: {} must be odd", self.stem_kernel)));
        }
        if self.noise_sigma < 0.0 {
            return Err(fail("model.noise_sigma: must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeciesSpec {
    pub id: String,
    pub dnase_atac: usize,
    pub tf_chip: usize,
    pub histone_chip: usize,
    pub cage: usize,
}

impl Default for SpeciesSpec {
    fn default() -> Self {
        SpeciesSpec { id: String::new(), dnase_atac: 0, tf_chip: 0, histone_chip: 0, cage: 0 }
    }
}

impl SpeciesSpec {
    fn to_schema(&self) -> SpeciesSchema {
        let counts = [
            (AssayType::DnaseAtac, self.dnase_atac),
            (AssayType::TfChip, self.tf_chip),
            (AssayType::HistoneChip, self.histone_chip),
            (AssayType::Cage, self.cage),
        ];
        SpeciesSchema {
            id: self.id.clone(),
            tracks: counts
                .into_iter()
                .flat_map(|(a, n)| {
                    let id = self.id.clone();
                    (0..n).map(move |i| TrackDef {
                        id: format!("{}_{}_{}", id, a.as_str().to_lowercase(), i),
                        assay: a,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_species: usize,
    /// Path to a TOML file with a `species` array; exclusive with the
    /// inline `species` list.
    pub schema_path: Option<PathBuf>,
    pub species: Vec<SpeciesSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_per_species: 256, schema_path: None, species: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    species: Vec<SpeciesSpec>,
}

impl DataConfig {
    /// Resolve the schema (inline species or external file, relative paths
    /// against `base_dir`).
    pub fn resolve_schema(&self, base_dir: &Path) -> Result<ProfileSchema, ConfigError> {
        let specs: Vec<SpeciesSpec> = match (&self.schema_path, self.species.is_empty()) {
            (Some(p), true) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let raw = std::fs::read_to_string(&path)
                    .map_err(|e| fail(format!("data.schema_path: cannot read {}: {e}", path.display())))?;
                let f: SchemaFile = toml::from_str(&raw)
                    .map_err(|e| fail(format!("data.schema_path: {e}")))?;
                f.species
            }
            (None, false) => self.species.clone(),
            (Some(_), false) => {
                return Err(fail("data.species: inline species and schema_path are exclusive"))
            }
            (None, true) => return Err(fail("data.species: no species configured")),
        };
        let schema = ProfileSchema { species: specs.iter().map(|s| s.to_schema()).collect() };
        schema.validate().map_err(|e| fail(format!("data.species: {e}")))?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_per_species == 0 {
            return Err(fail("data.n_per_species: must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; must be a multiple of the species
    /// count so every accumulation window covers all species equally.
    pub accum_batches: usize,
    pub clip_norm: f64,
    /// Mutual-information regularization weight.
    pub alpha: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
    pub batch_mode: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            peak_lr: 5e-4,
            warmup_steps: 200,
            batch_size: 4,
            accum_batches: 2,
            clip_norm: 0.2,
            alpha: 0.01,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 500,
            batch_mode: "alternating".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_species: usize) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(fail("train.steps: must be >= 1"));
        }
        if self.warmup_steps > self.steps {
            return Err(fail(format!(
                "train.warmup_steps: {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.clip_norm <= 0.0 {
            return Err(fail("train.clip_norm: must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(fail("train.batch_size: must be >= 1"));
        }
        if self.accum_batches == 0 || self.accum_batches % n_species != 0 {
            return Err(fail(format!(
                "train.accum_batches: {} is not a multiple of the species count {}",
                self.accum_batches, n_species
            )));
        }
        if self.alpha < 0.0 {
            return Err(fail("train.alpha: must be >= 0"));
        }
        if self.peak_lr <= 0.0 {
            return Err(fail("train.peak_lr: must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(fail("train.beta1/beta2: must be in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(fail("train.eps: must be > 0"));
        }
        if self.eval_every == 0 {
            return Err(fail("train.eval_every: must be >= 1"));
        }
        if crate::data::BatchMode::parse(&self.batch_mode).is_none() {
            return Err(fail(format!(
                "train.batch_mode: {:?} is not one of alternating|balanced",
                self.batch_mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(s).map_err(|e| fail(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| fail(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&raw)
    }

    /// Full validation including schema resolution; returns the resolved
    /// schema so callers validate exactly what they will run with.
    pub fn validate(&self, base_dir: &Path) -> Result<ProfileSchema, ConfigError> {
        self.model.validate()?;
        self.data.validate()?;
        let schema = self.data.resolve_schema(base_dir)?;
        self.train.validate(schema.n_species())?;
        Ok(schema)
    }
}
