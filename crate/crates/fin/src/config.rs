//! Flat key=value run configuration shared by all CLI commands.
//!
//! Every key has a default, may appear in a config file (`key = value`,
//! `#` comments), and may be overridden with `--set key=value`. Unknown
//! keys are rejected so typos fail loudly. The effective configuration is
//! echoed into the run directory and suffices to reproduce the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{FinError, Result};
use crate::dataio::{PrepareConfig, ReviewSchema, SyntheticSpec};
use crate::model::{FinConfig, TrainOptions, Variant};
use crate::numeric::AdamConfig;
use crate::store::ExtractionCaps;

/// Every known key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("out_dir", "runs"),
    ("data_dir", "data/raw"),
    ("prepared_dir", "data/prepared"),
    ("input_reviews", ""),
    ("review_schema", "price"),
    ("skip_malformed", "false"),
    ("review_seed", "1"),
    ("checkpoint", ""),
    ("synth.users", "5000"),
    ("synth.items", "2000"),
    ("synth.categories", "40"),
    ("synth.geo_cells", "60"),
    ("synth.behaviors_per_user", "60"),
    ("synth.samples_per_user", "4"),
    ("synth.pref_strength", "0.6"),
    ("synth.repeat_concentration", "0.6"),
    ("synth.global_repeat", "0.35"),
    ("synth.period_preference", "true"),
    ("synth.seed", "1"),
    ("prep.geohash_precision", "6"),
    ("prep.meal_periods", "95"),
    ("prep.price_bins", "48"),
    ("prep.train_frac", "0.8"),
    ("prep.seed", "1"),
    ("prep.short_window_days", "30"),
    ("prep.long_window_days", "365"),
    ("model.emb_dim", "4"),
    ("model.d_model", "16"),
    ("model.heads", "4"),
    ("model.align_len", "16"),
    ("model.mha_trunc", "20"),
    ("model.cap_geo", "200"),
    ("model.cap_meal", "200"),
    ("model.cap_short", "20"),
    ("model.cap_long", "100"),
    ("model.mlp_hidden", "200,80"),
    ("model.per_behavior_weighting", "false"),
    ("model.integrate_avg_len1", "false"),
    ("model.variant", "full_fin"),
    ("train.epochs", "2"),
    ("train.batch_size", "128"),
    ("train.seed", "7"),
    ("train.lr", "0.001"),
    ("train.max_steps", "0"),
    ("ablate.seeds", "7,8,9"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|&(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file's assignments.
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FinError::Config(format!("config line {}: expected key=value", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(FinError::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply `key=value` strings from `--set` flags.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| FinError::Config(format!("--set '{o}': expected key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| FinError::Config(format!("unknown config key '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| FinError::Config(format!("config key '{key}': bad value '{}'", self.values[key])))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn get_u32(&self, key: &str) -> Result<u32> {
        self.parse(key)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(FinError::Config(format!(
                "config key '{key}': expected true/false, got '{v}'"
            ))),
        }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            users: self.get_usize("synth.users")?,
            items: self.get_usize("synth.items")?,
            categories: self.get_usize("synth.categories")?,
            geo_cells: self.get_usize("synth.geo_cells")?,
            behaviors_per_user: self.get_usize("synth.behaviors_per_user")?,
            samples_per_user: self.get_usize("synth.samples_per_user")?,
            pref_strength: self.get_f64("synth.pref_strength")?,
            repeat_concentration: self.get_f64("synth.repeat_concentration")?,
            global_repeat: self.get_f64("synth.global_repeat")?,
            period_preference: self.get_bool("synth.period_preference")?,
            seed: self.get_u64("synth.seed")?,
        })
    }

    pub fn prepare_config(&self) -> Result<PrepareConfig> {
        Ok(PrepareConfig {
            geohash_precision: self.get_usize("prep.geohash_precision")?,
            meal_periods: self.get_usize("prep.meal_periods")?,
            price_bins: self.get_usize("prep.price_bins")?,
            train_frac: self.get_f64("prep.train_frac")?,
            seed: self.get_u64("prep.seed")?,
            short_term_window_days: self.get_u32("prep.short_window_days")?,
            long_term_window_days: self.get_u32("prep.long_window_days")?,
        })
    }

    pub fn review_schema(&self) -> Result<ReviewSchema> {
        match self.get("review_schema")? {
            "price" => Ok(ReviewSchema::PriceBased),
            "geo" => Ok(ReviewSchema::GeoBased),
            v => Err(FinError::Config(format!("review_schema: unknown schema '{v}'"))),
        }
    }

    pub fn fin_config(&self) -> Result<FinConfig> {
        let hidden = self.get("model.mlp_hidden")?;
        let (h1, h2) = hidden
            .split_once(',')
            .ok_or_else(|| FinError::Config("model.mlp_hidden: expected 'a,b'".into()))?;
        let mlp_hidden = (
            h1.trim()
                .parse()
                .map_err(|_| FinError::Config("model.mlp_hidden: bad width".into()))?,
            h2.trim()
                .parse()
                .map_err(|_| FinError::Config("model.mlp_hidden: bad width".into()))?,
        );
        Ok(FinConfig {
            emb_dim: self.get_usize("model.emb_dim")?,
            d_model: self.get_usize("model.d_model")?,
            heads: self.get_usize("model.heads")?,
            align_len: self.get_usize("model.align_len")?,
            caps: ExtractionCaps {
                geohash_block: self.get_usize("model.cap_geo")?,
                meal_time: self.get_usize("model.cap_meal")?,
                short_term: self.get_usize("model.cap_short")?,
                long_term_dedup: self.get_usize("model.cap_long")?,
            },
            mha_trunc: self.get_usize("model.mha_trunc")?,
            mlp_hidden,
            per_behavior_weighting: self.get_bool("model.per_behavior_weighting")?,
            integrate_avg_len1: self.get_bool("model.integrate_avg_len1")?,
            variant: Variant::parse(self.get("model.variant")?)?,
            activation: "silu",
            init_seed: self.get_u64("train.seed")?,
        })
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            epochs: self.get_usize("train.epochs")?,
            batch_size: self.get_usize("train.batch_size")?,
            seed: self.get_u64("train.seed")?,
            adam: AdamConfig {
                learning_rate: self.get_f64("train.lr")?,
                ..AdamConfig::default()
            },
            max_steps: self.get_u64("train.max_steps")?,
        })
    }

    pub fn ablate_seeds(&self) -> Result<Vec<u64>> {
        self.get("ablate.seeds")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| FinError::Config("ablate.seeds: bad seed".into()))
            })
            .collect()
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a hash of the canonical text form.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.echo().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Create `out_dir/<config hash>-<unix timestamp>/` and echo the
    /// effective config into it.
    pub fn make_run_dir(&self) -> Result<PathBuf> {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let dir = PathBuf::from(self.get("out_dir")?).join(format!("{:016x}-{ts}", self.hash()));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.txt"), self.echo())?;
        Ok(dir)
    }
}
