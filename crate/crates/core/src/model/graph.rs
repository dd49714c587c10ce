//! The autoencoder graph, built on a [`Tape`].

use super::config::KaeConfig;
use super::params::{Layer, Network};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Applies a layer stack; relu after every layer except, when
/// `linear_output`, the last.
pub(crate) fn mlp(
    tape: &mut Tape,
    x: Var,
    layers: &[Layer<Var>],
    linear_output: bool,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = tape.linear(h, layer.weight, layer.bias)?;
        if !(linear_output && i + 1 == layers.len()) {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn check_cloud(tape: &Tape, cloud: Var, n_points: usize, op: &'static str) -> Result<()> {
    let shape = tape.value(cloud).shape();
    if shape != [n_points, 3] {
        return Err(Error::shape(op, shape, &[n_points, 3]));
    }
    Ok(())
}

/// Point cloud `[N,3]` to the row-stochastic assignment matrix `[k,N]`.
///
/// Per-point features are concatenated with the max-pooled global feature
/// before the head, so every point's scores see the whole shape.
pub fn encode(tape: &mut Tape, net: &Network<Var>, config: &KaeConfig, cloud: Var) -> Result<Var> {
    check_cloud(tape, cloud, config.n_points, "encode")?;
    let local = mlp(tape, cloud, &net.encoder_point, false)?;
    let global_in = mlp(tape, local, &net.encoder_global, false)?;
    let global = tape.maxpool_rows(global_in)?;
    let tiled = tape.repeat_rows(global, config.n_points)?;
    let joined = tape.concat_cols(local, tiled)?;
    let scores = mlp(tape, joined, &net.encoder_head, true)?; // [N,k]
    let per_keypoint = tape.transpose(scores)?; // [k,N]
    let tempered = if config.temperature == 1.0 {
        per_keypoint
    } else {
        tape.scale(per_keypoint, 1.0 / config.temperature)
    };
    tape.softmax_rows(tempered)
}

/// Soft keypoints `D * X`: row i is the `D[i,:]`-weighted average of the
/// input points.
pub fn soft_propose(tape: &mut Tape, distributions: Var, cloud: Var) -> Result<Var> {
    let (k, n) = tape.value(distributions).dims2("soft_propose")?;
    let cloud_shape = tape.value(cloud).shape();
    if cloud_shape != [n, 3] {
        return Err(Error::shape("soft_propose", &[k, n], cloud_shape));
    }
    tape.matmul(distributions, cloud)
}

/// Keypoints `[k,3]` to `(features [k,F], reconstruction [N,3])`.
pub fn decode(
    tape: &mut Tape,
    net: &Network<Var>,
    config: &KaeConfig,
    keypoints: Var,
) -> Result<(Var, Var)> {
    let shape = tape.value(keypoints).shape();
    if shape != [config.n_keypoints, 3] {
        return Err(Error::shape("decode", shape, &[config.n_keypoints, 3]));
    }
    let features = mlp(tape, keypoints, &net.decoder_point, false)?;
    let flat = tape.reshape(
        features,
        &[1, config.n_keypoints * config.decoder_feature_width],
    )?;
    let out = mlp(tape, flat, &net.decoder_fc, true)?;
    let reconstruction = tape.reshape(out, &[config.n_points, 3])?;
    Ok((features, reconstruction))
}

/// Keypoint features `[k,F]` to class logits `[C]`; invariant to the order
/// of the keypoints.
pub fn classify_aux(
    tape: &mut Tape,
    net: &Network<Var>,
    config: &KaeConfig,
    features: Var,
) -> Result<Var> {
    if !config.aux_enabled() {
        return Err(Error::Config(
            "auxiliary classifier is disabled (n_classes = 0)".into(),
        ));
    }
    let per_keypoint = mlp(tape, features, &net.aux_point, false)?;
    let pooled = tape.maxpool_rows(per_keypoint)?;
    let width = tape.value(pooled).len();
    let row = tape.reshape(pooled, &[1, width])?;
    let logits = mlp(tape, row, &net.aux_head, true)?;
    tape.reshape(logits, &[config.n_classes])
}

/// Every named intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub cloud: Var,
    pub distributions: Var,
    pub soft_keypoints: Var,
    pub features: Var,
    pub reconstruction: Var,
    pub chamfer: Var,
    pub logits: Option<Var>,
    pub aux_loss: Option<Var>,
    pub total: Var,
}

/// `L_c + aux_weight * aux_loss`, or just `L_c` when there is no aux term.
pub fn combine_losses(
    tape: &mut Tape,
    config: &KaeConfig,
    chamfer: Var,
    aux_loss: Option<Var>,
) -> Result<Var> {
    match aux_loss {
        Some(aux) => {
            let weighted = tape.scale(aux, config.aux_weight);
            tape.add(chamfer, weighted)
        }
        None => Ok(chamfer),
    }
}

/// Full graph: encode, propose, decode, chamfer against the input, and the
/// optional auxiliary classification loss.
pub fn build_forward(
    tape: &mut Tape,
    net: &Network<Var>,
    config: &KaeConfig,
    cloud: Var,
    label: Option<usize>,
) -> Result<ForwardVars> {
    if config.aux_enabled() && label.is_none() {
        return Err(Error::Config(
            "auxiliary classifier enabled but no label given".into(),
        ));
    }
    let distributions = encode(tape, net, config, cloud)?;
    let soft_keypoints = soft_propose(tape, distributions, cloud)?;
    let (features, reconstruction) = decode(tape, net, config, soft_keypoints)?;
    let chamfer = tape.chamfer_loss(cloud, reconstruction)?;
    let (logits, aux_loss) = match (config.aux_enabled(), label) {
        (true, Some(label)) => {
            let logits = classify_aux(tape, net, config, features)?;
            let loss = tape.cross_entropy(logits, label)?;
            (Some(logits), Some(loss))
        }
        _ => (None, None),
    };
    let total = combine_losses(tape, config, chamfer, aux_loss)?;
    Ok(ForwardVars {
        cloud,
        distributions,
        soft_keypoints,
        features,
        reconstruction,
        chamfer,
        logits,
        aux_loss,
        total,
    })
}
