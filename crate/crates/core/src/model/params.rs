use rand::Rng;

use super::config::KaeConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// One fully connected layer: `y = x * weight + bias`, `weight: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: T,
    pub bias: T,
}

/// Every layer stack of the model, generic over what a layer holds
/// (tensors, tape variables, or shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub encoder_point: Vec<Layer<T>>,
    pub encoder_global: Vec<Layer<T>>,
    pub encoder_head: Vec<Layer<T>>,
    pub decoder_point: Vec<Layer<T>>,
    pub decoder_fc: Vec<Layer<T>>,
    pub aux_point: Vec<Layer<T>>,
    pub aux_head: Vec<Layer<T>>,
}

impl<T> Network<T> {
    fn groups(&self) -> [(&'static str, &[Layer<T>]); 7] {
        [
            ("encoder.point", &self.encoder_point),
            ("encoder.global", &self.encoder_global),
            ("encoder.head", &self.encoder_head),
            ("decoder.point", &self.decoder_point),
            ("decoder.fc", &self.decoder_fc),
            ("aux.point", &self.aux_point),
            ("aux.head", &self.aux_head),
        ]
    }

    /// `(name, value)` for every weight and bias in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (group, layers) in self.groups() {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{group}.{i}.weight"), &layer.weight));
                out.push((format!("{group}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    /// Mutable access in the same order as [`Network::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for layers in [
            &mut self.encoder_point,
            &mut self.encoder_global,
            &mut self.encoder_head,
            &mut self.decoder_point,
            &mut self.decoder_fc,
            &mut self.aux_point,
            &mut self.aux_head,
        ] {
            for layer in layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Network<U>, E> {
        let mut stack = |layers: &[Layer<T>]| -> std::result::Result<Vec<Layer<U>>, E> {
            layers
                .iter()
                .map(|l| {
                    Ok(Layer {
                        weight: f(&l.weight)?,
                        bias: f(&l.bias)?,
                    })
                })
                .collect()
        };
        Ok(Network {
            encoder_point: stack(&self.encoder_point)?,
            encoder_global: stack(&self.encoder_global)?,
            encoder_head: stack(&self.encoder_head)?,
            decoder_point: stack(&self.decoder_point)?,
            decoder_fc: stack(&self.decoder_fc)?,
            aux_point: stack(&self.aux_point)?,
            aux_head: stack(&self.aux_head)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Network<U> {
        self.try_map(|t| Ok::<U, std::convert::Infallible>(f(t)))
            .unwrap_or_else(|e| match e {})
    }
}

/// Input/output width of every layer implied by a config.
pub fn layer_dims(config: &KaeConfig) -> Network<(usize, usize)> {
    fn stack(input: usize, widths: &[usize]) -> Vec<Layer<(usize, usize)>> {
        let mut prev = input;
        widths
            .iter()
            .map(|&w| {
                let l = Layer {
                    weight: (prev, w),
                    bias: (prev, w),
                };
                prev = w;
                l
            })
            .collect()
    }
    fn with_output(mut hidden: Vec<usize>, out: usize) -> Vec<usize> {
        hidden.push(out);
        hidden
    }
    let point_out = *config.encoder_point_widths.last().expect("validated");
    let global_out = config
        .encoder_global_widths
        .last()
        .copied()
        .unwrap_or(point_out);
    let f = config.decoder_feature_width;
    let aux_pooled = config.aux_point_widths.last().copied().unwrap_or(f);
    let (aux_point, aux_head) = if config.aux_enabled() {
        (
            stack(f, &config.aux_point_widths),
            stack(
                aux_pooled,
                &with_output(config.aux_head_widths.clone(), config.n_classes),
            ),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Network {
        encoder_point: stack(3, &config.encoder_point_widths),
        encoder_global: stack(point_out, &config.encoder_global_widths),
        encoder_head: stack(
            point_out + global_out,
            &with_output(config.encoder_head_widths.clone(), config.n_keypoints),
        ),
        decoder_point: stack(3, &[f]),
        decoder_fc: stack(
            config.n_keypoints * f,
            &with_output(config.decoder_hidden_widths.clone(), 3 * config.n_points),
        ),
        aux_point,
        aux_head,
    }
}

/// Glorot-uniform `[fan_in, fan_out]` weight in `±sqrt(6 / (fan_in + fan_out))`
/// and a zero bias.
pub(crate) fn glorot_layer(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Layer<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Layer {
        weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// Trainable weights together with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: KaeConfig,
    net: Network<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero
    /// biases, drawn from the seed's init stream in canonical layer order.
    pub fn init(config: &KaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let dims = layer_dims(config);
        let mut stack = |layers: &[Layer<(usize, usize)>]| -> Vec<Layer<Tensor>> {
            layers
                .iter()
                .map(|l| glorot_layer(l.weight.0, l.weight.1, &mut rng))
                .collect()
        };
        let net = Network {
            encoder_point: stack(&dims.encoder_point),
            encoder_global: stack(&dims.encoder_global),
            encoder_head: stack(&dims.encoder_head),
            decoder_point: stack(&dims.decoder_point),
            decoder_fc: stack(&dims.decoder_fc),
            aux_point: stack(&dims.aux_point),
            aux_head: stack(&dims.aux_head),
        };
        Ok(Self {
            config: config.clone(),
            net,
        })
    }

    /// Assembles params from named arrays, checking names and shapes
    /// against the config.
    pub fn from_named(config: &KaeConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let dims = layer_dims(config);
        let expected: Vec<(String, Vec<usize>)> = dims
            .named()
            .into_iter()
            .map(|(name, &(i, o))| {
                let shape = if name.ends_with(".weight") {
                    vec![i, o]
                } else {
                    vec![o]
                };
                (name, shape)
            })
            .collect();
        if named.len() != expected.len() {
            let have: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
            let missing: Vec<&str> = expected
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !have.contains(n))
                .collect();
            return Err(Error::Data(format!(
                "expected {} parameter arrays, found {} (missing: {missing:?})",
                expected.len(),
                named.len()
            )));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Data(format!("missing parameter '{name}'")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter '{name}' has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "parameter '{name}' has non-finite values"
                )));
            }
            ordered.push(t);
        }
        let mut it = ordered.into_iter();
        let net = dims.map(|_| it.next().expect("counted"));
        // `map` visits weight then bias per layer, matching `named` order.
        Ok(Self {
            config: config.clone(),
            net,
        })
    }

    pub fn config(&self) -> &KaeConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<Tensor> {
        &self.net
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.net.named()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.values_mut()
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Network<Var> {
        self.net.map(|t| tape.param(t.clone()))
    }

    /// Records every tensor as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Network<Var> {
        self.net.map(|t| tape.constant(t.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layer_shapes() {
        let cfg = KaeConfig::new(256, 8).with_aux(3);
        let p = ModelParams::init(&cfg, 0).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = p
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let get = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(get("encoder.point.0.weight"), vec![3, 64]);
        assert_eq!(get("encoder.point.1.weight"), vec![64, 64]);
        assert_eq!(get("encoder.global.0.weight"), vec![64, 128]);
        assert_eq!(get("encoder.head.0.weight"), vec![192, 128]);
        assert_eq!(get("encoder.head.1.weight"), vec![128, 8]);
        assert_eq!(get("decoder.point.0.weight"), vec![3, 64]);
        assert_eq!(get("decoder.fc.0.weight"), vec![512, 512]);
        assert_eq!(get("decoder.fc.1.weight"), vec![512, 768]);
        assert_eq!(get("decoder.fc.1.bias"), vec![768]);
        assert_eq!(get("aux.point.0.weight"), vec![64, 128]);
        assert_eq!(get("aux.head.0.weight"), vec![128, 64]);
        assert_eq!(get("aux.head.1.weight"), vec![64, 3]);
    }

    #[test]
    fn no_aux_layers_without_classes() {
        let p = ModelParams::init(&KaeConfig::new(32, 4), 0).unwrap();
        assert!(p.named().iter().all(|(n, _)| !n.starts_with("aux")));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = KaeConfig::new(32, 4).with_aux(2);
        let a = ModelParams::init(&cfg, 5).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 5).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 6).unwrap());
        for (name, t) in a.named() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / (t.shape()[0] + t.shape()[1]) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn from_named_roundtrip_and_validation() {
        let cfg = KaeConfig::new(32, 4).with_aux(2);
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut named: Vec<(String, Tensor)> =
            p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.reverse();
        assert_eq!(ModelParams::from_named(&cfg, named.clone()).unwrap(), p);

        let mut bad = named.clone();
        bad[0].1 = Tensor::zeros(&[1]);
        assert!(ModelParams::from_named(&cfg, bad).is_err());
        let mut short = named.clone();
        short.pop();
        assert!(ModelParams::from_named(&cfg, short).is_err());
        let mut renamed = named;
        renamed[0].0 = "bogus".into();
        assert!(ModelParams::from_named(&cfg, renamed).is_err());
    }
}
