//! Run configuration: a TOML file, then `UCAP_SEED`, then command-line
//! overrides, resolved into one [`RunConfig`].

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use ucap_core::evalkit::CountMode;
use ucap_core::models::ModelConfig;
use ucap_core::objectives::ObjectiveWeights;
use ucap_core::textcorpus::NoiseConfig;
use ucap_core::trainer::{DiscountMode, InitConfig, Objectives, TrainConfig};
use ucap_core::worldsim::{DetectorConfig, WorldConfig};

pub const SEED_ENV: &str = "UCAP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory written by `gen-world` and read by later stages.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Run directory for checkpoints, logs and captions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Where `train` looks for `init.ckpt`; defaults to `out_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_dir: Option<PathBuf>,
    pub world: WorldSection,
    pub text: TextSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub init: InitSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub num_concepts: usize,
    pub num_images: usize,
    /// Held-out images for `generate` and `evaluate`.
    pub test_images: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub min_concepts: usize,
    pub max_concepts: usize,
    pub corpus_sentences: usize,
    pub references_per_image: usize,
    pub p_miss: f64,
    pub p_false: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda_c: f64,
    pub lambda_im: f64,
    pub lambda_sen: f64,
    pub gamma: f64,
    pub lr_main: f64,
    pub lr_init: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub length_cap: usize,
    pub clip_norm: f64,
    /// "reward-to-go" or "literal".
    pub discount: String,
    /// "adv", "adv+con", "adv+con+im" or "full".
    pub ablation: String,
    pub skip_init: bool,
    pub sen_updates_encoder: bool,
    pub p_drop: f64,
    pub max_shift: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub con2sen_steps: usize,
    pub feat2sen_steps: usize,
    pub warmup_steps: usize,
    pub dis_pretrain_steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub beam_size: usize,
    pub length_cap: usize,
    /// "types" or "tokens".
    pub count_mode: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: None,
            out_dir: None,
            init_dir: None,
            world: WorldSection::default(),
            text: TextSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            init: InitSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        let d = DetectorConfig::default();
        WorldSection {
            num_concepts: w.num_concepts,
            num_images: w.num_images,
            test_images: 100,
            dim: w.dim,
            noise_sigma: w.noise_sigma,
            min_concepts: w.min_concepts_per_image,
            max_concepts: w.max_concepts_per_image,
            corpus_sentences: 2000,
            references_per_image: 5,
            p_miss: d.p_miss,
            p_false: d.p_false,
        }
    }
}

impl Default for TextSection {
    fn default() -> Self {
        TextSection { min_freq: 40 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: ModelConfig::new(1, 1).hidden }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda_c: t.weights.lambda_c,
            lambda_im: t.weights.lambda_im,
            lambda_sen: t.weights.lambda_sen,
            gamma: t.weights.gamma,
            lr_main: t.lr_main,
            lr_init: t.lr_init,
            batch_size: t.batch_size,
            steps: t.steps,
            length_cap: t.length_cap,
            clip_norm: t.clip_norm,
            discount: "reward-to-go".into(),
            ablation: "full".into(),
            skip_init: false,
            sen_updates_encoder: t.sen_updates_encoder,
            p_drop: t.noise.p_drop,
            max_shift: t.noise.max_shift,
        }
    }
}

impl Default for InitSection {
    fn default() -> Self {
        let i = InitConfig::default();
        InitSection {
            con2sen_steps: i.con2sen_steps,
            feat2sen_steps: i.feat2sen_steps,
            warmup_steps: i.warmup_steps,
            dis_pretrain_steps: i.dis_pretrain_steps,
            batch_size: i.batch_size,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { beam_size: 3, length_cap: 20, count_mode: "types".into() }
    }
}

/// Parses a `section.key=value` override. The value is read as a TOML value
/// and falls back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override {s:?} has an empty key");
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!("{key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File values, then `UCAP_SEED` from `env_seed`, then `overrides`.
    pub fn resolve(file_text: Option<&str>, env_seed: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = match file_text {
            Some(t) => toml::from_str(t).context("parsing config file")?,
            None => toml::Table::new(),
        };
        if let Some(s) = env_seed {
            let seed: u64 = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
            set_path(&mut table, "seed", toml::Value::Integer(i64::try_from(seed)?))?;
        }
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.objectives()?;
        self.discount()?;
        self.count_mode()?;
        self.train_config()?.validate().map_err(|e| anyhow!("{e}"))?;
        let w = &self.world;
        if w.num_concepts == 0 || w.num_images == 0 || w.dim == 0 {
            bail!("world.num_concepts, world.num_images and world.dim must be positive");
        }
        if w.min_concepts == 0 || w.min_concepts > w.max_concepts || w.max_concepts > w.num_concepts {
            bail!("need 1 <= world.min_concepts <= world.max_concepts <= world.num_concepts");
        }
        if self.model.hidden == 0 || self.eval.beam_size == 0 || self.eval.length_cap == 0 {
            bail!("model.hidden, eval.beam_size and eval.length_cap must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().ok_or_else(|| anyhow!("missing required path: data_dir (set it in the config or pass --data)"))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().ok_or_else(|| anyhow!("missing required path: out_dir (set it in the config or pass --out)"))
    }

    pub fn init_dir(&self) -> Result<&Path> {
        match &self.init_dir {
            Some(p) => Ok(p),
            None => self.out_dir(),
        }
    }

    pub fn objectives(&self) -> Result<Objectives> {
        Objectives::parse(&self.train.ablation)
            .ok_or_else(|| anyhow!("unknown ablation {:?}; use adv, adv+con, adv+con+im or full", self.train.ablation))
    }

    pub fn discount(&self) -> Result<DiscountMode> {
        match self.train.discount.as_str() {
            "reward-to-go" => Ok(DiscountMode::RewardToGo),
            "literal" => Ok(DiscountMode::Literal),
            other => bail!("unknown discount {other:?}; use reward-to-go or literal"),
        }
    }

    pub fn count_mode(&self) -> Result<CountMode> {
        match self.eval.count_mode.as_str() {
            "types" => Ok(CountMode::Types),
            "tokens" => Ok(CountMode::Tokens),
            other => bail!("unknown count mode {other:?}; use types or tokens"),
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            num_concepts: w.num_concepts,
            num_images: w.num_images + w.test_images,
            dim: w.dim,
            noise_sigma: w.noise_sigma,
            min_concepts_per_image: w.min_concepts,
            max_concepts_per_image: w.max_concepts,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig { p_miss: self.world.p_miss, p_false: self.world.p_false, ..DetectorConfig::default() }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let i = &self.init;
        Ok(TrainConfig {
            weights: ObjectiveWeights { lambda_c: t.lambda_c, lambda_im: t.lambda_im, lambda_sen: t.lambda_sen, gamma: t.gamma },
            lr_main: t.lr_main,
            lr_init: t.lr_init,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: self.seed,
            length_cap: t.length_cap,
            clip_norm: t.clip_norm,
            discount: self.discount()?,
            objectives: self.objectives()?,
            sen_updates_encoder: t.sen_updates_encoder,
            noise: NoiseConfig { p_drop: t.p_drop, max_shift: t.max_shift },
            init: InitConfig {
                con2sen_steps: i.con2sen_steps,
                feat2sen_steps: i.feat2sen_steps,
                warmup_steps: i.warmup_steps,
                dis_pretrain_steps: i.dis_pretrain_steps,
                batch_size: i.batch_size,
            },
        })
    }
}
