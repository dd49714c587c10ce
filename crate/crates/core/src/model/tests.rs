use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_check_many, Tape, Tensor};
use crate::data::{synth_generate, PointCloud, ShapeClass};
use crate::error::Error;

/// Small widths so full-graph finite differences stay cheap.
pub(crate) fn toy_config() -> KaeConfig {
    KaeConfig {
        encoder_point_widths: vec![8, 8],
        encoder_global_widths: vec![8],
        encoder_head_widths: vec![8],
        decoder_hidden_widths: vec![16],
        aux_point_widths: vec![8],
        aux_head_widths: vec![8],
        ..KaeConfig::new(16, 2)
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    PointCloud::new(pts).unwrap().normalize().unwrap()
}

fn row_stochastic(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(k * n);
    for _ in 0..k {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![k, n], data).unwrap()
}

fn permute_cloud(cloud: &PointCloud, perm: &[usize]) -> PointCloud {
    PointCloud::new(perm.iter().map(|&i| cloud.points()[i]).collect()).unwrap()
}

#[test]
fn encode_rows_are_distributions() {
    let cfg = KaeConfig::new(32, 4);
    let p = ModelParams::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = p.encode(&random_cloud(&mut rng, 32)).unwrap();
    assert_eq!(d.shape(), &[4, 32]);
    for row in d.data().chunks(32) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn encode_rejects_wrong_point_count() {
    let p = ModelParams::init(&KaeConfig::new(32, 4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(
        p.encode(&random_cloud(&mut rng, 31)),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn encode_permutes_columns_with_points() {
    let cfg = KaeConfig::new(32, 4);
    let p = ModelParams::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = random_cloud(&mut rng, 32);
    let mut perm: Vec<usize> = (0..32).collect();
    perm.shuffle(&mut rng);
    let d = p.encode(&cloud).unwrap();
    let dp = p.encode(&permute_cloud(&cloud, &perm)).unwrap();
    for i in 0..4 {
        for (j, &src) in perm.iter().enumerate() {
            assert!((dp.at(i, j) - d.at(i, src)).abs() < 1e-9);
        }
    }
}

#[test]
fn fresh_encoder_is_near_uniform() {
    let cfg = KaeConfig::new(64, 8);
    let p = ModelParams::init(&cfg, 0).unwrap();
    for seed in 0..5 {
        let cloud = synth_generate(ShapeClass::ALL[seed as usize], 64, seed, 0.01).unwrap();
        let d = p.encode(&cloud).unwrap();
        let max = d.data().iter().copied().fold(0.0, f64::max);
        assert!(max < 5.0 / 64.0, "max entry {max}");
    }
}

#[test]
fn soft_propose_one_hot_and_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = random_cloud(&mut rng, 6).to_tensor();
    let mut d = Tensor::zeros(&[2, 6]);
    d.data_mut()[4] = 1.0; // row 0 picks point 4
    for j in 0..6 {
        d.data_mut()[6 + j] = 1.0 / 6.0;
    }
    let k = soft_propose(&d, &cloud).unwrap();
    assert_eq!(k.row(0), cloud.row(4));
    let centroid: Vec<f64> = (0..3)
        .map(|c| (0..6).map(|j| cloud.at(j, c)).sum::<f64>() / 6.0)
        .collect();
    for c in 0..3 {
        assert!((k.at(1, c) - centroid[c]).abs() < 1e-15);
    }
}

#[test]
fn soft_propose_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_cloud(&mut rng, 20).to_tensor();
    let d = row_stochastic(&mut rng, 5, 20);
    let k = soft_propose(&d, &x).unwrap();
    for i in 0..5 {
        for c in 0..3 {
            let mut acc = 0.0;
            for j in 0..20 {
                acc += d.at(i, j) * x.at(j, c);
            }
            assert_eq!(k.at(i, c), acc);
        }
    }
    assert!(soft_propose(&d, &Tensor::zeros(&[19, 3])).is_err());
}

#[test]
fn decode_shapes_and_determinism() {
    let cfg = KaeConfig::new(32, 4);
    let p = ModelParams::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let kp = random_cloud(&mut rng, 4).to_tensor();
    let (f, r) = p.decode(&kp).unwrap();
    assert_eq!(f.shape(), &[4, 64]);
    assert_eq!(r.shape(), &[32, 3]);
    let (f2, r2) = p.decode(&kp.clone()).unwrap();
    assert_eq!((f, r), (f2, r2));
    assert!(p.decode(&Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn decoder_fc_gradient_matches_finite_differences() {
    let cfg = toy_config();
    let params = ModelParams::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = random_cloud(&mut rng, 16).to_tensor();
    let keypoints = random_cloud(&mut rng, 2).to_tensor();
    let fc: Vec<Tensor> = params
        .network()
        .decoder_fc
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect();
    let r = finite_diff_check_many(
        |tape, vars| {
            let mut net = params.bind_constant(tape);
            for (i, layer) in net.decoder_fc.iter_mut().enumerate() {
                layer.weight = vars[2 * i];
                layer.bias = vars[2 * i + 1];
            }
            let k = tape.constant(keypoints.clone());
            let x = tape.constant(cloud.clone());
            let (_, recon) = graph::decode(tape, &net, &cfg, k)?;
            tape.chamfer_loss(recon, x)
        },
        &fc,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.excluded_fraction() < 0.01);
}

#[test]
fn classify_aux_shape_symmetry_and_disabled() {
    let cfg = KaeConfig::new(32, 4).with_aux(5);
    let p = ModelParams::init(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feats = Tensor::new(
        vec![4, 64],
        (0..256).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let logits = p.classify_aux(&feats).unwrap();
    assert_eq!(logits.shape(), &[5]);
    let rows: Vec<Vec<f64>> = [2, 0, 3, 1]
        .iter()
        .map(|&i| feats.row(i).to_vec())
        .collect();
    let permuted = Tensor::new(vec![4, 64], rows.concat()).unwrap();
    let logits2 = p.classify_aux(&permuted).unwrap();
    assert!(logits.max_abs_diff(&logits2) < 1e-9);

    let plain = ModelParams::init(&KaeConfig::new(32, 4), 10).unwrap();
    assert!(matches!(plain.classify_aux(&feats), Err(Error::Config(_))));
}

#[test]
fn classify_aux_gradient_matches_finite_differences() {
    let cfg = toy_config().with_aux(3);
    let params = ModelParams::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feats = Tensor::new(
        vec![2, 64],
        (0..128).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let mut inputs = vec![feats];
    for l in params
        .network()
        .aux_point
        .iter()
        .chain(&params.network().aux_head)
    {
        inputs.push(l.weight.clone());
        inputs.push(l.bias.clone());
    }
    let n_point = params.network().aux_point.len();
    let r = finite_diff_check_many(
        |tape, vars| {
            let mut net = params.bind_constant(tape);
            let mut it = vars[1..].chunks(2);
            for layer in net.aux_point.iter_mut().chain(net.aux_head.iter_mut()) {
                let pair = it.next().unwrap();
                layer.weight = pair[0];
                layer.bias = pair[1];
            }
            let logits = graph::classify_aux(tape, &net, &cfg, vars[0])?;
            tape.cross_entropy(logits, 1)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(n_point > 0);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.excluded_fraction() < 0.01);
}

#[test]
fn forward_without_aux_weight_is_pure_chamfer() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cloud = random_cloud(&mut rng, 16);
    let cfg = toy_config().with_aux(3).with_aux_weight(0.0);
    let r = ModelParams::init(&cfg, 1)
        .unwrap()
        .forward(&cloud, Some(2))
        .unwrap();
    assert_eq!(r.total_loss, r.chamfer);
    assert!(r.aux_loss.unwrap() > 0.0);

    let plain = ModelParams::init(&toy_config(), 1)
        .unwrap()
        .forward(&cloud, None)
        .unwrap();
    assert_eq!(plain.total_loss, plain.chamfer);
    assert!(plain.aux_loss.is_none());
}

#[test]
fn forward_requires_label_with_aux() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = random_cloud(&mut rng, 16);
    let p = ModelParams::init(&toy_config().with_aux(3), 1).unwrap();
    assert!(matches!(p.forward(&cloud, None), Err(Error::Config(_))));
    assert!(matches!(
        p.forward(&cloud, Some(3)),
        Err(Error::LabelOutOfRange { .. })
    ));
}

#[test]
fn perfect_reconstruction_has_zero_chamfer() {
    // Stand-in decoder: feed the cloud itself as the reconstruction.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cloud = random_cloud(&mut rng, 16).to_tensor();
    let cfg = toy_config();
    let mut tape = Tape::new();
    let x = tape.constant(cloud.clone());
    let recon = tape.constant(cloud);
    let lc = tape.chamfer_loss(x, recon).unwrap();
    let total = graph::combine_losses(&mut tape, &cfg, lc, None).unwrap();
    assert_eq!(tape.value(total).item(), 0.0);
}

#[test]
fn aux_loss_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cloud = random_cloud(&mut rng, 16);
    let cfg = toy_config().with_aux(3).with_aux_weight(0.37);
    let r = ModelParams::init(&cfg, 2)
        .unwrap()
        .forward(&cloud, Some(0))
        .unwrap();
    assert!((r.total_loss - r.chamfer - 0.37 * r.aux_loss.unwrap()).abs() < 1e-12);
}

#[test]
fn full_graph_gradient_matches_finite_differences() {
    for (cfg, label) in [
        (toy_config(), None),
        (toy_config().with_aux(3).with_aux_weight(0.8), Some(1)),
    ] {
        let params = ModelParams::init(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cloud = random_cloud(&mut rng, 16).to_tensor();
        let inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let r = finite_diff_check_many(
            |tape, vars| {
                let mut net = params.bind_constant(tape);
                for (slot, v) in net.values_mut().into_iter().zip(vars) {
                    *slot = *v;
                }
                let x = tape.constant(cloud.clone());
                Ok(graph::build_forward(tape, &net, &cfg, x, label)?.total)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(
            r.excluded_fraction() < 0.01,
            "{} excluded",
            r.excluded.len()
        );
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = toy_config().with_aux(3);
    let cloud = synth_generate(ShapeClass::Torus, 16, 3, 0.02).unwrap();
    let a = ModelParams::init(&cfg, 4)
        .unwrap()
        .forward(&cloud, Some(1))
        .unwrap();
    let b = ModelParams::init(&cfg, 4)
        .unwrap()
        .forward(&cloud, Some(1))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = KaeConfig::new(32, 4).with_aux(3).with_temperature(0.7);
    let p = ModelParams::init(&cfg, 77).unwrap();
    let ck = Checkpoint::new(p.clone(), None);
    let back = Checkpoint::from_json(&ck.to_json()).unwrap();
    assert_eq!(back.params, p);
    for ((_, a), (_, b)) in p.named().iter().zip(back.params.named()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn checkpoint_load_validates_shapes() {
    let cfg = KaeConfig::new(32, 4);
    let p = ModelParams::init(&cfg, 1).unwrap();
    let json = Checkpoint::new(p, None).to_json();
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["config"]["n_keypoints"] = 5.into();
    assert!(Checkpoint::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["format"] = "something-else".into();
    assert!(Checkpoint::from_json(&v.to_string()).is_err());
    assert!(Checkpoint::from_json("{").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn soft_keypoints_stay_in_bounding_box(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, 24);
        let cfg = KaeConfig::new(24, 5);
        let (_, k) = ModelParams::init(&cfg, seed).unwrap().propose(&cloud).unwrap();
        let (lo, hi) = cloud.bounding_box();
        for row in k.data().chunks(3) {
            for c in 0..3 {
                prop_assert!(row[c] >= lo[c] - 1e-12 && row[c] <= hi[c] + 1e-12);
            }
        }
    }

    #[test]
    fn outputs_invariant_to_point_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, 16);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let cfg = toy_config().with_aux(3);
        let p = ModelParams::init(&cfg, seed).unwrap();
        let a = p.forward(&cloud, Some(0)).unwrap();
        let b = p.forward(&permute_cloud(&cloud, &perm), Some(0)).unwrap();
        prop_assert!(a.soft_keypoints.max_abs_diff(&b.soft_keypoints) < 1e-6);
        prop_assert!(a.reconstruction.max_abs_diff(&b.reconstruction) < 1e-6);
        prop_assert!((a.chamfer - b.chamfer).abs() < 1e-6);
        prop_assert!(a.logits.unwrap().max_abs_diff(&b.logits.unwrap()) < 1e-6);
    }
}
