//! Whole-run configuration: every tunable in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembly::{Modalities, SequenceConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::retrieval::EvalConfig;
use crate::serving::ServingConfig;
use crate::synth::{DataConfig, Vocab};
use crate::vision::VisionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every module derives its own seed from it.
    pub seed: u64,
    /// Fraction of the click log (by time) used for training.
    pub train_fraction: f64,
    pub data: DataConfig,
    pub vision: VisionConfig,
    pub encoder: EncoderConfig,
    pub sequence: SequenceConfig,
    pub modalities: Modalities,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub serving: ServingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vision = VisionConfig::default();
        let encoder = EncoderConfig {
            patch_feature_dim: vision.feature_dim,
            pixel_patch_dim: vision.pixel_dim(3),
            ..EncoderConfig::default()
        };
        RunConfig {
            seed: 42,
            train_fraction: 0.8,
            data: DataConfig::default(),
            vision,
            encoder,
            sequence: SequenceConfig::default(),
            modalities: Modalities::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            serving: ServingConfig::default(),
        }
    }
}

/// Stable per-module seed: the first eight bytes of `sha256(master || label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(field_of(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn seed_for(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    /// Short hex digest of the resolved config.
    pub fn hash8(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<root>/<YYYYmmdd-HHMMSS>-<hash8>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        root.join(format!("{stamp}-{}", self.hash8()))
    }

    /// Longest product sequence the sequence settings can produce.
    pub fn max_product_len(&self) -> usize {
        let m = &self.modalities;
        let patches = if m.use_roi { self.vision.patch_count() + 1 } else { 0 };
        let pixels = if m.use_pixel { self.vision.pixel_count() + 1 } else { 0 };
        let hot = if m.use_hot_query { self.sequence.hot_budget } else { 0 };
        3 + self.sequence.max_text + hot + patches + pixels
    }

    /// Checks every section and the cross-module contracts.
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.serving.validate(&self.encoder)?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must be in (0, 1)"));
        }
        if self.data.products < 2 {
            return Err(Error::config("data.products", "need at least two products"));
        }
        if self.encoder.patch_feature_dim != self.vision.feature_dim {
            return Err(Error::config(
                "encoder.patch_feature_dim",
                format!("must equal vision.feature_dim ({})", self.vision.feature_dim),
            ));
        }
        if self.encoder.pixel_patch_dim != self.vision.pixel_dim(3) {
            return Err(Error::config(
                "encoder.pixel_patch_dim",
                format!("must equal 3 * vision.pixel_patch^2 ({})", self.vision.pixel_dim(3)),
            ));
        }
        let vocab = Vocab::default().len();
        if self.encoder.vocab_size < vocab {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("must cover the {vocab}-word vocabulary"),
            ));
        }
        let need = self.max_product_len();
        if need > self.encoder.max_positions {
            return Err(Error::config(
                "encoder.max_positions",
                format!("{} is below the longest product sequence ({need})", self.encoder.max_positions),
            ));
        }
        if self.eval.ks.is_empty() || self.eval.ks.iter().any(|k| *k == 0 || *k > self.data.products) {
            return Err(Error::config("eval.ks", format!("values must be in 1..={}", self.data.products)));
        }
        Ok(())
    }
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown keys as "unknown field `name`, expected ..."
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "config".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(r: Result<RunConfig>) -> String {
        match r.and_then(|c| c.validate().map(|_| c)) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn default_is_valid_and_roundtrips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_files_override_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[finetune]\nk = 3\n[modalities]\nuse_hot_query = false\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.finetune.k, 3);
        assert!(!c.modalities.use_hot_query);
        assert_eq!(c.finetune.gamma, FinetuneConfig::default().gamma);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(field(RunConfig::from_toml("sed = 1\n")), "sed");
        assert_eq!(field(RunConfig::from_toml("[finetune]\ngama = 2.0\n")), "gama");
        assert_eq!(field(RunConfig::from_toml("[modalities]\nuse_rois = true\n")), "use_rois");
    }

    #[test]
    fn validation_names_the_offending_field() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            field(Ok(c))
        };
        assert_eq!(bad(|c| c.finetune.batch_size = 1), "finetune.batch_size");
        assert_eq!(bad(|c| c.finetune.gamma = 0.0), "finetune.gamma");
        assert_eq!(bad(|c| c.serving.student_layers = 2), "serving.student_layers");
        assert_eq!(bad(|c| c.encoder.patch_feature_dim += 1), "encoder.patch_feature_dim");
        assert_eq!(bad(|c| c.encoder.max_positions = 16), "encoder.max_positions");
        assert_eq!(bad(|c| c.eval.ks = vec![10, 5000]), "eval.ks");
        assert_eq!(bad(|c| c.train_fraction = 1.0), "train_fraction");
    }

    #[test]
    fn seeds_fan_out_per_module() {
        let c = RunConfig::default();
        assert_eq!(c.seed_for("data"), derive_seed(c.seed, "data"));
        assert_ne!(c.seed_for("data"), c.seed_for("init"));
        let other = RunConfig {
            seed: c.seed + 1,
            ..c.clone()
        };
        assert_ne!(other.seed_for("data"), c.seed_for("data"));
        assert_eq!(derive_seed(42, "data"), derive_seed(42, "data"));
    }

    #[test]
    fn run_dirs_carry_the_config_hash() {
        let c = RunConfig::default();
        let dir = c.run_dir(Path::new("/runs"));
        let name = dir.file_name().unwrap().to_str().unwrap();
        assert!(name.ends_with(&format!("-{}", c.hash8())));
        assert_eq!(name.len(), 15 + 1 + 8);
        let other = RunConfig {
            seed: 1,
            ..c.clone()
        };
        assert_ne!(other.hash8(), c.hash8());
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(RunConfig::load(Path::new("/nonexistent/run.toml")), Err(Error::Missing(_))));
    }
}
