use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use kae::data::{
    load_manifest, load_xyz, make_dataset, save_dataset, save_ply, save_xyz_points, ShapeClass,
};
use kae::detection::{nms_select, point_scores, Fallback, NmsConfig, DEFAULT_NMS_RADIUS};
use kae::eval::{run_comparison, Detector, DownstreamConfig};
use kae::model::{Checkpoint, KaeConfig};
use kae::training::{history_csv, TrainConfig, Trainer};

use crate::settings::Settings;
use crate::{Common, Failure};

type Outcome = Result<(), Failure>;

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn split_list<T: std::str::FromStr<Err = kae::Error>>(list: &str) -> Result<Vec<T>, Failure> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(Failure::from))
        .collect()
}

#[derive(Args)]
pub struct SynthArgs {
    /// Comma-separated shape classes: sphere, box, cylinder, torus, two-spheres.
    #[arg(long)]
    classes: Option<String>,
    /// Clouds per class in the train split.
    #[arg(long)]
    train: Option<usize>,
    /// Clouds per class in the test split.
    #[arg(long)]
    test: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    n: Option<usize>,
    /// Standard deviation of Gaussian jitter added to surface samples.
    #[arg(long)]
    noise: Option<f64>,
    #[command(flatten)]
    common: Common,
}

pub fn synth(args: SynthArgs) -> Outcome {
    let mut s = Settings::load("synth", args.common.config.as_deref())?;
    let classes: String = s.resolve("classes", args.classes, "sphere,box,torus".into())?;
    let per_train = s.resolve("train", args.train, 50)?;
    let per_test = s.resolve("test", args.test, 20)?;
    let n = s.resolve("n", args.n, 256)?;
    let noise = s.resolve("noise", args.noise, 0.01)?;
    let seed = s.resolve("seed", args.common.seed, 0)?;
    let out: PathBuf = s.required("out", args.common.out)?;
    s.check_unused()?;

    let classes: Vec<ShapeClass> = split_list(&classes)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Failure::Usage(format!(
            "--noise must be finite and >= 0, got {noise}"
        )));
    }
    let (train, test) = make_dataset(&classes, per_train, per_test, n, seed, noise)?;
    let manifest = save_dataset(&out, &train, &test)?;
    s.write(&out)?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest written by `kae synth`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of keypoints.
    #[arg(long)]
    k: Option<usize>,
    /// Total epochs; with --resume, the epoch count to reach.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the auxiliary classification loss; > 0 enables the classifier.
    #[arg(long)]
    aux_weight: Option<f64>,
    /// Softmax temperature of the keypoint distributions.
    #[arg(long)]
    temperature: Option<f64>,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

pub fn train(args: TrainArgs) -> Outcome {
    let mut s = Settings::load("train", args.common.config.as_deref())?;
    let manifest: PathBuf = s.required("manifest", args.manifest)?;
    let resume: Option<PathBuf> = s.optional("resume", args.resume)?;
    let model_flags = [
        ("k", args.k.is_some()),
        ("lr", args.lr.is_some()),
        ("aux-weight", args.aux_weight.is_some()),
        ("temperature", args.temperature.is_some()),
        ("seed", args.common.seed.is_some()),
    ];
    let k = s.resolve("k", args.k, 8)?;
    let epochs = s.resolve("epochs", args.epochs, 100)?;
    let lr = s.resolve("lr", args.lr, 1e-3)?;
    let aux_weight = s.resolve("aux-weight", args.aux_weight, 0.0)?;
    let temperature = s.resolve("temperature", args.temperature, 1.0)?;
    let interval = s.resolve("checkpoint-interval", args.checkpoint_interval, 0)?;
    let seed = s.resolve("seed", args.common.seed, 0)?;
    let out: PathBuf = s.required("out", args.common.out)?;
    s.check_unused()?;

    let (_, train_set, _) = load_manifest(&manifest)?;
    let mut trainer = match &resume {
        Some(path) => {
            if let Some((flag, _)) = model_flags.iter().find(|(f, given)| s.provided(f, *given)) {
                return Err(Failure::Usage(format!(
                    "--{flag} cannot be combined with --resume; the checkpoint fixes it"
                )));
            }
            let mut t = Trainer::resume(Checkpoint::load(path)?)?;
            t.set_epochs(epochs)?;
            let kae = t.params().config().clone();
            s.record("k", &kae.n_keypoints);
            s.record("lr", &t.config().learning_rate);
            s.record(
                "aux-weight",
                &if kae.aux_enabled() {
                    kae.aux_weight
                } else {
                    0.0
                },
            );
            s.record("temperature", &kae.temperature);
            s.record("seed", &t.config().seed);
            t
        }
        None => {
            if !(aux_weight >= 0.0 && aux_weight.is_finite()) {
                return Err(Failure::Usage(format!(
                    "--aux-weight must be finite and >= 0, got {aux_weight}"
                )));
            }
            let n = train_set.n_points().ok_or_else(|| {
                Failure::Usage(format!("{} has no training clouds", manifest.display()))
            })?;
            let mut kae = KaeConfig::new(n, k).with_temperature(temperature);
            if aux_weight > 0.0 {
                kae = kae
                    .with_aux(train_set.n_classes())
                    .with_aux_weight(aux_weight);
            }
            let config = TrainConfig {
                epochs,
                learning_rate: lr,
                seed,
                checkpoint_interval: interval,
                ..TrainConfig::default()
            };
            Trainer::new(&kae, config)?
        }
    };
    s.write(&out)?;

    let total = trainer.config().epochs;
    trainer.run(&train_set, |t, h| {
        let aux = if t.params().config().aux_enabled() {
            format!(" aux {:.6}", h.mean_aux)
        } else {
            String::new()
        };
        eprintln!(
            "epoch {}/{total} chamfer {:.6}{aux} total {:.6}",
            h.epoch, h.mean_chamfer, h.mean_total
        );
        if t.checkpoint_due() {
            t.checkpoint().save(
                out.join("checkpoints")
                    .join(format!("epoch-{:04}.json", h.epoch)),
            )?;
        }
        Ok(())
    })?;

    trainer.checkpoint().save(out.join("checkpoint.json"))?;
    write(&out.join("loss.csv"), &history_csv(trainer.history()))?;
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

#[derive(Args)]
pub struct DetectArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Input .xyz clouds (repeatable).
    #[arg(long = "in", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Keypoints per cloud; soft mode always yields the model's count.
    #[arg(long)]
    k: Option<usize>,
    /// `soft` for convex-combination keypoints, `nms` for selected input points.
    #[arg(long)]
    mode: Option<String>,
    /// NMS suppression radius, in normalized units.
    #[arg(long)]
    radius: Option<f64>,
    /// NMS policy when too few points survive: top-up or shrink-radius.
    #[arg(long)]
    fallback: Option<String>,
    /// Also write a colored PLY per cloud with keypoints in red.
    #[arg(long)]
    ply: bool,
    #[command(flatten)]
    common: Common,
}

pub fn detect(args: DetectArgs) -> Outcome {
    let mut s = Settings::load("detect", args.common.config.as_deref())?;
    let ckpt: PathBuf = s.required("ckpt", args.ckpt)?;
    let inputs: Vec<PathBuf> =
        s.required("in", (!args.inputs.is_empty()).then_some(args.inputs))?;
    let k: Option<usize> = s.optional("k", args.k)?;
    let mode: String = s.resolve("mode", args.mode, "soft".into())?;
    let radius = s.resolve("radius", args.radius, DEFAULT_NMS_RADIUS)?;
    let fallback: String = s.resolve("fallback", args.fallback, "top-up".into())?;
    let ply = s.resolve("ply", args.ply.then_some(true), false)?;
    let _: Option<u64> = s.optional("seed", args.common.seed)?;
    let out: PathBuf = s.required("out", args.common.out)?;
    s.check_unused()?;

    let soft = match mode.as_str() {
        "soft" => true,
        "nms" => false,
        other => {
            return Err(Failure::Usage(format!(
                "unknown --mode '{other}' (expected soft or nms)"
            )))
        }
    };
    let nms = NmsConfig {
        radius,
        fallback: fallback.parse::<Fallback>()?,
    };
    let mut stems = BTreeSet::new();
    for input in &inputs {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !stems.insert(stem.clone()) {
            return Err(Failure::Usage(format!(
                "two inputs share the file name '{stem}'"
            )));
        }
    }

    let params = Checkpoint::load(&ckpt)?.params;
    let model_k = params.config().n_keypoints;
    let k = k.unwrap_or(model_k);
    if soft && k != model_k {
        return Err(Failure::Usage(format!(
            "soft mode yields the model's {model_k} keypoints, got --k {k}"
        )));
    }
    s.record("k", &k);
    s.write(&out)?;

    for input in &inputs {
        let cloud = load_xyz(input)?;
        if cloud.len() != params.config().n_points {
            return Err(kae::Error::PointCount {
                context: input.display().to_string(),
                expected: params.config().n_points,
                found: cloud.len(),
            }
            .into());
        }
        let (normalized, transform) = cloud.normalize_with_transform()?;
        let keypoints: Vec<[f64; 3]> = if soft {
            let (_, kp) = params.propose(&normalized)?;
            kp.to_points()?
                .into_iter()
                .map(|p| transform.invert(p))
                .collect()
        } else {
            let scores = point_scores(&params.encode(&normalized)?)?;
            let hk = nms_select(&normalized, &scores, k, &nms)?;
            hk.indices.iter().map(|&i| cloud.points()[i]).collect()
        };
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy())
            .unwrap_or_default();
        save_xyz_points(&keypoints, out.join(format!("{stem}.keypoints.xyz")))?;
        if ply {
            save_ply(&cloud, Some(&keypoints), out.join(format!("{stem}.ply")))?;
        }
    }
    println!("{}", out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset manifest written by `kae synth`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Trained checkpoint; required for kae-soft and kae-nms.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated detectors: kae-soft, kae-nms, fps, random.
    #[arg(long)]
    detectors: Option<String>,
    /// Keypoints per cloud.
    #[arg(long)]
    k: Option<usize>,
    /// Classifier training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// NMS radius for kae-nms.
    #[arg(long)]
    radius: Option<f64>,
    #[command(flatten)]
    common: Common,
}

pub fn eval(args: EvalArgs) -> Outcome {
    let mut s = Settings::load("eval", args.common.config.as_deref())?;
    let manifest: PathBuf = s.required("manifest", args.manifest)?;
    let ckpt: Option<PathBuf> = s.optional("ckpt", args.ckpt)?;
    let default_detectors = if ckpt.is_some() {
        "kae-soft,kae-nms,fps,random"
    } else {
        "fps,random"
    };
    let detectors: String = s.resolve("detectors", args.detectors, default_detectors.into())?;
    let defaults = DownstreamConfig::default();
    let k = s.resolve("k", args.k, defaults.k)?;
    let epochs = s.resolve("epochs", args.epochs, defaults.epochs)?;
    let lr = s.resolve("lr", args.lr, defaults.learning_rate)?;
    let radius = s.resolve("radius", args.radius, DEFAULT_NMS_RADIUS)?;
    let seed = s.resolve("seed", args.common.seed, 0)?;
    let out: PathBuf = s.required("out", args.common.out)?;
    s.check_unused()?;

    let detectors: Vec<Detector> = split_list(&detectors)?;
    if let Some(d) = detectors.iter().find(|d| d.needs_model()) {
        if ckpt.is_none() {
            return Err(Failure::Usage(format!("detector {d} needs --ckpt")));
        }
    }
    let config = DownstreamConfig {
        k,
        epochs,
        learning_rate: lr,
        seed,
        nms: NmsConfig {
            radius,
            ..NmsConfig::default()
        },
        ..defaults
    };
    config.validate()?;

    let (_, train_set, test_set) = load_manifest(&manifest)?;
    let params = match &ckpt {
        Some(path) if detectors.iter().any(|d| d.needs_model()) => {
            Some(Checkpoint::load(path)?.params)
        }
        _ => None,
    };
    let report = run_comparison(&train_set, &test_set, params.as_ref(), &detectors, &config)?;
    s.write(&out)?;
    report.save(&out)?;
    print!("{}", report.to_table());
    Ok(())
}
