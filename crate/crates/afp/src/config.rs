//! Run configuration: one JSON document holding every knob of the pipeline.
//! Missing fields take their defaults, unknown fields are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use afp_core::metrics::EvalOptions;
use afp_core::nn::OptimizerConfig;
use afp_core::phantom::{PhantomSpec, TUBE};
use afp_core::preprocess::PreprocessConfig;
use afp_core::segnet::{FeatureTapConfig, SegTrainOptions, UNetConfig};
use afp_core::synth::{Blend, TrainMode, TrainPlan, TranslatorConfig};
use afp_core::Shape3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use crate::io::{read_file, Format, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub format: Format,
    pub n_cases: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub segmenter: UNetConfig,
    pub seg_training: SegTrainOptions,
    /// Dataset labels the segmenter learns; they become classes `1..=n` in
    /// this order and every other label becomes background.
    pub seg_labels: Vec<u32>,
    pub segmenter_checkpoint: Option<PathBuf>,
    pub taps: FeatureTapConfig,
    pub translator: TranslatorConfig,
    pub training: TrainingConfig,
    pub synthesis: SynthesisConfig,
    pub metrics: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let segmenter = UNetConfig::default();
        RunConfig {
            data_dir: "data".into(),
            out_dir: "out".into(),
            seed: 0,
            format: Format::Nifti1,
            n_cases: 30,
            split: [0.7, 0.1, 0.2],
            phantom: PhantomSpec::default(),
            preprocess: PreprocessConfig::default(),
            taps: FeatureTapConfig::default_for_depth(segmenter.depth),
            segmenter,
            seg_training: SegTrainOptions::default(),
            seg_labels: vec![TUBE],
            segmenter_checkpoint: None,
            translator: TranslatorConfig::default(),
            training: TrainingConfig::default(),
            synthesis: SynthesisConfig::default(),
            metrics: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainMode,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub patch_size: Shape3,
    pub batch_size: usize,
    pub patches_per_case: usize,
    pub val_patches_per_case: usize,
    pub fg_bias: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let p = TrainPlan::default();
        TrainingConfig {
            mode: TrainMode::L1ThenAfp,
            stage1_epochs: 12,
            stage2_epochs: 8,
            patch_size: p.patch_size,
            batch_size: p.batch_size,
            patches_per_case: p.patches_per_case,
            val_patches_per_case: p.val_patches_per_case,
            fg_bias: p.fg_bias,
            optimizer: p.optimizer,
        }
    }
}

impl TrainingConfig {
    pub fn plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            patch_size: self.patch_size,
            batch_size: self.batch_size,
            patches_per_case: self.patches_per_case,
            val_patches_per_case: self.val_patches_per_case,
            fg_bias: self.fg_bias,
            optimizer: self.optimizer,
            seed,
            ..TrainPlan::for_mode(self.mode, self.stage1_epochs, self.stage2_epochs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub patch_size: Shape3,
    pub tiling: f64,
    pub blend: Blend,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            patch_size: [32; 3],
            tiling: 0.5,
            blend: Blend::Median,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> AppError {
    AppError::Config(e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = read_file(path).map_err(|e| AppError::Config(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_slice(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().map_err(invalid)?;
        self.preprocess.validate().map_err(invalid)?;
        self.segmenter.validate().map_err(invalid)?;
        self.translator.validate().map_err(invalid)?;
        self.training
            .plan(self.seed)
            .validate(true)
            .map_err(invalid)?;
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(invalid(format!(
                "split fractions must be in [0, 1] and sum to 1, got {:?}",
                self.split
            )));
        }
        if self.seg_labels.is_empty() || self.seg_labels.contains(&0) {
            return Err(invalid(
                "seg_labels must list at least one non-background label",
            ));
        }
        if self.segmenter.out_labels != self.seg_labels.len() + 1 {
            return Err(invalid(format!(
                "segmenter.out_labels is {} but seg_labels defines {} classes plus background",
                self.segmenter.out_labels,
                self.seg_labels.len()
            )));
        }
        if self.taps.is_empty() {
            return Err(invalid("taps must name at least one layer"));
        }
        if !(self.synthesis.tiling >= 0.0 && self.synthesis.tiling < 1.0) {
            return Err(invalid("synthesis.tiling must lie in [0, 1)"));
        }
        if !(self.metrics.tolerance_mm >= 0.0) {
            return Err(invalid("metrics.tolerance_mm must be >= 0"));
        }
        Ok(())
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON form, as hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Dataset label -> segmenter class.
    pub fn seg_label_map(&self) -> BTreeMap<u32, u32> {
        self.seg_labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i as u32 + 1))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_pretty_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 4, "training": {"stage2_epochs": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.training.stage2_epochs, 3);
        assert_eq!(
            cfg.training.stage1_epochs,
            TrainingConfig::default().stage1_epochs
        );
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 4}"#).is_err());
        let cfg = RunConfig {
            split: [0.5, 0.5, 0.5],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(AppError::Config(_))));
        let cfg = RunConfig {
            seg_labels: vec![1, 2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
