//! Run configuration: one JSON document drives every stage, every artifact
//! is keyed by a hash of (part of) it, and all randomness descends from the
//! single seed through named sub-streams.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nt_mmud::GRID;
use nt_model::backbone::BackboneConfig;
use nt_model::heads::MaskDecoderConfig;
use nt_model::sparse::SparseTaskConfig;
use nt_model::synth::GenArConfig;

use crate::assemble::TaskKind;
use crate::error::{Result, TrainError};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub max_objects: usize,
    pub refexps_per_scene: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: "data".into(),
            train: 2000,
            val: 200,
            test: 200,
            max_objects: 4,
            refexps_per_scene: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub layers: usize,
    pub d_h: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Image patch side in pixels for the backbone token stream.
    pub patch: usize,
    pub pretrain_steps: u64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            layers: 2,
            d_h: 64,
            heads: 4,
            max_len: 256,
            patch: 16,
            pretrain_steps: 2000,
            pretrain_batch: 8,
            pretrain_lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GenArSection {
    pub k: usize,
    /// Codebook patch side in pixels.
    pub patch: usize,
    pub layers: usize,
    pub d_h: usize,
    pub heads: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
}

impl Default for GenArSection {
    fn default() -> Self {
        GenArSection { k: 32, patch: 8, layers: 2, d_h: 64, heads: 4, steps: 2000, batch: 8, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsSection {
    pub decoder: MaskDecoderConfig,
    /// Condition embedding width shared by the gen head, the condition
    /// encoder and the AR generator.
    pub d_c: usize,
    pub genar: GenArSection,
}

impl Default for HeadsSection {
    fn default() -> Self {
        HeadsSection { decoder: MaskDecoderConfig::default(), d_c: 64, genar: GenArSection::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_seg: f64,
    pub lambda_gen: f64,
    pub task_mix: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            batch: 8,
            lr: 3e-4,
            lambda_seg: 1.0,
            lambda_gen: 10.0,
            task_mix: vec!["refseg".into(), "reaseg".into(), "caption".into(), "gen".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: "val".into(), max_new: 24 }
    }
}

fn default_adapter() -> SparseTaskConfig {
    // Desk-scale override of the task-state width; every other field keeps
    // its standard default.
    SparseTaskConfig { d_z: 32, ..SparseTaskConfig::default() }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub adapter: SparseTaskConfig,
    pub heads: HeadsSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataSection::default(),
            backbone: BackboneSection::default(),
            adapter: default_adapter(),
            heads: HeadsSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                TrainError::MissingInput(format!("config file {}", path.display()))
            } else {
                TrainError::Io(e)
            }
        })?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.train.task_mix.is_empty() {
            return fail("task_mix is empty".into());
        }
        for t in &self.train.task_mix {
            if TaskKind::parse(t).is_none() {
                return fail(format!("unknown task {t:?} in task_mix"));
            }
        }
        if self.backbone.patch == 0 || GRID % self.backbone.patch != 0 {
            return fail(format!("backbone patch {} must divide {GRID}", self.backbone.patch));
        }
        if self.heads.genar.patch == 0 || GRID % self.heads.genar.patch != 0 {
            return fail(format!("codebook patch {} must divide {GRID}", self.heads.genar.patch));
        }
        let grid = GRID / self.backbone.patch;
        let out = grid * self.heads.decoder.upscale();
        if out == 0 || GRID % out != 0 {
            return fail(format!("decoder output extent {out} must divide {GRID}"));
        }
        if self.train.lambda_seg < 0.0 || self.train.lambda_gen < 0.0 {
            return fail("loss weights must be nonnegative".into());
        }
        if self.train.batch == 0 {
            return fail("batch must be positive".into());
        }
        if self.eval.split != "val" && self.eval.split != "test" && self.eval.split != "train" {
            return fail(format!("unknown eval split {:?}", self.eval.split));
        }
        self.adapter
            .validate()
            .map_err(|e| TrainError::Config(format!("adapter section: {e}")))?;
        self.heads
            .decoder
            .validate()
            .map_err(|e| TrainError::Config(format!("decoder section: {e}")))?;
        self.backbone_config(nt_mmud::lang::vocabulary().len())
            .validate()
            .map_err(|e| TrainError::Config(format!("backbone section: {e}")))?;
        self.genar_config().validate().map_err(|e| TrainError::Config(format!("genar: {e}")))?;
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        self.train.task_mix.iter().filter_map(|t| TaskKind::parse(t)).collect()
    }

    pub fn backbone_config(&self, vocab: usize) -> BackboneConfig {
        BackboneConfig {
            layers: self.backbone.layers,
            d_h: self.backbone.d_h,
            heads: self.backbone.heads,
            vocab,
            max_len: self.backbone.max_len,
        }
    }

    pub fn genar_config(&self) -> GenArConfig {
        let g = GRID / self.heads.genar.patch;
        GenArConfig {
            k: self.heads.genar.k,
            seq: g * g,
            layers: self.heads.genar.layers,
            d_h: self.heads.genar.d_h,
            heads: self.heads.genar.heads,
            d_c: self.heads.d_c,
        }
    }

    /// Side of the decoded mask grid.
    pub fn mask_side(&self) -> usize {
        (GRID / self.backbone.patch) * self.heads.decoder.upscale()
    }

    pub fn dataset_dir(&self) -> PathBuf {
        PathBuf::from(&self.data.path)
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash16<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    sha_hex(&json)[..16].to_string()
}

/// The data section without its path. Artifact keys hash content, not
/// location, so a relocated dataset directory keeps every key.
fn data_key(d: &DataSection) -> (usize, usize, usize, usize, usize) {
    (d.train, d.val, d.test, d.max_objects, d.refexps_per_scene)
}

/// Key for tuned-run artifacts: covers the whole config except the dataset
/// location.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut keyed = cfg.clone();
    keyed.data.path = String::new();
    hash16(&keyed)
}

/// Key for the backbone pretraining artifact: only the sections that affect
/// its bytes, so ablations over the adapter or the task mix share it.
pub fn backbone_hash(cfg: &RunConfig) -> String {
    hash16(&(cfg.seed, data_key(&cfg.data), &cfg.backbone))
}

/// Key for the generator pretraining artifact.
pub fn genar_hash(cfg: &RunConfig) -> String {
    hash16(&(cfg.seed, data_key(&cfg.data), cfg.heads.d_c, &cfg.heads.genar))
}
