use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_AUX_WEIGHT: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Network shape and loss weighting for the keypoint autoencoder.
///
/// Hidden widths exclude the fixed input/output sizes: the encoder head
/// always ends in `n_keypoints` columns, the decoder in `3 * n_points`
/// outputs, the auxiliary head in `n_classes` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KaeConfig {
    pub n_points: usize,
    pub n_keypoints: usize,
    /// Zero disables the auxiliary classifier.
    pub n_classes: usize,
    pub aux_weight: f64,
    pub temperature: f64,
    pub encoder_point_widths: Vec<usize>,
    pub encoder_global_widths: Vec<usize>,
    pub encoder_head_widths: Vec<usize>,
    pub decoder_feature_width: usize,
    pub decoder_hidden_widths: Vec<usize>,
    pub aux_point_widths: Vec<usize>,
    pub aux_head_widths: Vec<usize>,
}

impl KaeConfig {
    /// Plain autoencoder (no auxiliary branch) with the default widths.
    pub fn new(n_points: usize, n_keypoints: usize) -> Self {
        Self {
            n_points,
            n_keypoints,
            n_classes: 0,
            aux_weight: 0.0,
            temperature: DEFAULT_TEMPERATURE,
            encoder_point_widths: vec![64, 64],
            encoder_global_widths: vec![128],
            encoder_head_widths: vec![128],
            decoder_feature_width: 64,
            decoder_hidden_widths: vec![512],
            aux_point_widths: vec![128],
            aux_head_widths: vec![64],
        }
    }

    /// Enables the auxiliary classifier over `n_classes` with the default
    /// weight.
    pub fn with_aux(mut self, n_classes: usize) -> Self {
        self.n_classes = n_classes;
        self.aux_weight = DEFAULT_AUX_WEIGHT;
        self
    }

    pub fn with_aux_weight(mut self, weight: f64) -> Self {
        self.aux_weight = weight;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn aux_enabled(&self) -> bool {
        self.n_classes > 0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_keypoints < 1 || self.n_keypoints > self.n_points {
            return fail(format!(
                "need 1 <= k <= N, got k={} N={}",
                self.n_keypoints, self.n_points
            ));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return fail(format!(
                "aux weight must be finite and >= 0, got {}",
                self.aux_weight
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return fail(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            ));
        }
        if self.n_classes == 1 {
            return fail("the auxiliary classifier needs at least 2 classes".into());
        }
        if self.aux_weight > 0.0 && self.n_classes < 2 {
            return fail(format!(
                "aux weight {} requires at least 2 classes, got {}",
                self.aux_weight, self.n_classes
            ));
        }
        let widths = [
            &self.encoder_point_widths,
            &self.encoder_global_widths,
            &self.encoder_head_widths,
            &self.decoder_hidden_widths,
            &self.aux_point_widths,
            &self.aux_head_widths,
        ];
        if widths.iter().any(|w| w.contains(&0)) || self.decoder_feature_width == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.encoder_point_widths.is_empty() {
            return fail("encoder needs at least one per-point layer".into());
        }
        Ok(())
    }
}
