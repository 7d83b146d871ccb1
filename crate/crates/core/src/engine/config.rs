use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EngineError;

/// Which parameters the optimizer updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLayers {
    #[default]
    All,
    /// Backbone frozen at its pretrained values.
    Heads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Background plus tumor.
    pub num_classes: usize,
    /// Side of the square network input in pixels.
    pub input_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; one pass over the training set when unset.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub roi_iou_threshold: f64,
    pub detection_score_threshold: f64,
    /// Cut-off applied to soft mask probabilities.
    pub mask_threshold: f64,
    pub max_detections_per_image: usize,
    pub backbone_id: String,
    pub random_seed: u64,
    pub train_layers: TrainLayers,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            input_size: 64,
            epochs: 20,
            steps_per_epoch: None,
            learning_rate: 1e-3,
            roi_iou_threshold: 0.5,
            detection_score_threshold: 0.5,
            mask_threshold: 0.5,
            max_detections_per_image: 10,
            backbone_id: "tinyconv-s".into(),
            random_seed: 42,
            train_layers: TrainLayers::All,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.num_classes != 2 {
            return bad(format!(
                "only background + tumor (num_classes = 2) is supported, got {}",
                self.num_classes
            ));
        }
        if self.input_size < 16 || !self.input_size.is_multiple_of(4) {
            return bad(format!(
                "input_size must be a multiple of 4 and at least 16, got {}",
                self.input_size
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.roi_iou_threshold > 0.0 && self.roi_iou_threshold < 1.0) {
            return bad(format!(
                "roi_iou_threshold must lie in (0, 1), got {}",
                self.roi_iou_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.detection_score_threshold) {
            return bad(format!(
                "detection_score_threshold must lie in [0, 1], got {}",
                self.detection_score_threshold
            ));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!(
                "mask_threshold must lie in (0, 1), got {}",
                self.mask_threshold
            ));
        }
        if self.max_detections_per_image == 0 {
            return bad("max_detections_per_image must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1 when set".into());
        }
        Ok(())
    }

    pub fn validate_for_training(&self) -> Result<(), EngineError> {
        self.validate()?;
        if self.epochs < 1 {
            return Err(EngineError::Config(
                "epochs must be at least 1 for training".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate_for_training().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let cases: Vec<fn(&mut ModelConfig)> = vec![
            |c| c.epochs = 0,
            |c| c.num_classes = 1,
            |c| c.roi_iou_threshold = 1.0,
            |c| c.roi_iou_threshold = 0.0,
            |c| c.learning_rate = -1.0,
            |c| c.input_size = 30,
            |c| c.detection_score_threshold = 1.5,
        ];
        for f in cases {
            let mut c = ModelConfig::default();
            f(&mut c);
            assert!(matches!(
                c.validate_for_training(),
                Err(EngineError::Config(_))
            ));
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.random_seed += 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c: ModelConfig = toml::from_str("epochs = 3\nbackbone_id = \"tinyconv-m\"").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.input_size, 64);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
    }
}
