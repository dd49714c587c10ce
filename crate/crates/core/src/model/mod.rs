//! The keypoint autoencoder network and its auxiliary-classifier variant.
//!
//! Pipeline for one cloud `X [N,3]`:
//!
//! 1. encoder: shared per-point MLP, max-pooled global feature concatenated
//!    back onto each point, head MLP to `[N,k]`, transpose, row softmax
//!    (with temperature) giving `D [k,N]`;
//! 2. soft proposal: `K = D * X`, each keypoint a convex combination of
//!    input points;
//! 3. decoder: shared per-keypoint layer to features `[k,F]`, flattened and
//!    mapped by an FC stack to `3N` outputs, reshaped to `[N,3]`;
//! 4. optional classifier over the keypoint features, trained with
//!    cross-entropy and added to the chamfer loss with weight `aux_weight`.
//!
//! The graph-level functions live in [`graph`]; [`ModelParams`] has
//! value-level conveniences that build a throwaway tape.

mod checkpoint;
mod config;
pub mod graph;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{KaeConfig, DEFAULT_AUX_WEIGHT, DEFAULT_TEMPERATURE};
pub(crate) use params::glorot_layer;
pub use params::{layer_dims, Layer, ModelParams, Network};

use crate::autodiff::{Tape, Tensor};
use crate::data::PointCloud;
use crate::error::Result;

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    /// `[k,N]`, rows sum to one.
    pub distributions: Tensor,
    pub soft_keypoints: Tensor,
    pub keypoint_features: Tensor,
    pub reconstruction: Tensor,
    pub chamfer: f64,
    pub logits: Option<Tensor>,
    pub aux_loss: Option<f64>,
    pub total_loss: f64,
}

impl ForwardResult {
    pub(crate) fn from_tape(tape: &Tape, vars: &graph::ForwardVars) -> Self {
        Self {
            distributions: tape.value(vars.distributions).clone(),
            soft_keypoints: tape.value(vars.soft_keypoints).clone(),
            keypoint_features: tape.value(vars.features).clone(),
            reconstruction: tape.value(vars.reconstruction).clone(),
            chamfer: tape.value(vars.chamfer).item(),
            logits: vars.logits.map(|v| tape.value(v).clone()),
            aux_loss: vars.aux_loss.map(|v| tape.value(v).item()),
            total_loss: tape.value(vars.total).item(),
        }
    }
}

/// `D * X` on plain tensors.
pub fn soft_propose(distributions: &Tensor, cloud: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = tape.constant(distributions.clone());
    let x = tape.constant(cloud.clone());
    let k = graph::soft_propose(&mut tape, d, x)?;
    Ok(tape.value(k).clone())
}

impl ModelParams {
    pub fn encode(&self, cloud: &PointCloud) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind_constant(&mut tape);
        let x = tape.constant(cloud.to_tensor());
        let d = graph::encode(&mut tape, &net, self.config(), x)?;
        Ok(tape.value(d).clone())
    }

    /// `(D, soft keypoints)` for one cloud.
    pub fn propose(&self, cloud: &PointCloud) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let net = self.bind_constant(&mut tape);
        let x = tape.constant(cloud.to_tensor());
        let d = graph::encode(&mut tape, &net, self.config(), x)?;
        let k = graph::soft_propose(&mut tape, d, x)?;
        Ok((tape.value(d).clone(), tape.value(k).clone()))
    }

    /// `(features [k,F], reconstruction [N,3])`.
    pub fn decode(&self, keypoints: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let net = self.bind_constant(&mut tape);
        let k = tape.constant(keypoints.clone());
        let (f, r) = graph::decode(&mut tape, &net, self.config(), k)?;
        Ok((tape.value(f).clone(), tape.value(r).clone()))
    }

    pub fn classify_aux(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let net = self.bind_constant(&mut tape);
        let f = tape.constant(features.clone());
        let logits = graph::classify_aux(&mut tape, &net, self.config(), f)?;
        Ok(tape.value(logits).clone())
    }

    pub fn forward(&self, cloud: &PointCloud, label: Option<usize>) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let net = self.bind_constant(&mut tape);
        let x = tape.constant(cloud.to_tensor());
        let vars = graph::build_forward(&mut tape, &net, self.config(), x, label)?;
        Ok(ForwardResult::from_tape(&tape, &vars))
    }
}

#[cfg(test)]
mod tests;
