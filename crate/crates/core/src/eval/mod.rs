//! Downstream comparison of keypoint detectors.
//!
//! Each detector reduces every cloud to `k` points; a small PointNet-style
//! classifier is then trained on those points alone and scored on the test
//! split. All detectors share one classifier config and seed, so accuracy
//! differences come from the keypoints.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{io_write_file, Dataset, PointCloud};
use crate::detection::{fps_select_seeded, nms_select, point_scores, random_select, NmsConfig};
use crate::error::{Error, Result};
use crate::model::graph::{decode, encode, mlp, soft_propose};
use crate::model::{glorot_layer, Layer, ModelParams};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::training::{adam_update, OptimizerState, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detector {
    KaeSoft,
    KaeNms,
    Fps,
    Random,
}

impl Detector {
    pub const ALL: [Detector; 4] = [
        Detector::KaeSoft,
        Detector::KaeNms,
        Detector::Fps,
        Detector::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Detector::KaeSoft => "kae-soft",
            Detector::KaeNms => "kae-nms",
            Detector::Fps => "fps",
            Detector::Random => "random",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Detector::KaeSoft | Detector::KaeNms)
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Detector::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown detector '{s}' (expected kae-soft, kae-nms, fps or random)"
                ))
            })
    }
}

/// Keypoints of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f64; 3]>,
    /// Source indices for selection detectors; `None` for soft keypoints.
    pub indices: Option<Vec<usize>>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("k x 3")
    }
}

/// Detector-independent settings for keypoint extraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub k: usize,
    pub nms: NmsConfig,
    /// Seeds FPS start points and random selection; cloud `i` uses the
    /// stream index `i`.
    pub seed: u64,
}

/// Runs `detector` on every cloud, in dataset order.
///
/// `kae-soft` emits the model's own `k` soft keypoints, so `config.k` must
/// equal the model's keypoint count. `kae-nms` may pick any `k <= N`.
pub fn extract_keypoints(
    detector: Detector,
    model: Option<&ModelParams>,
    dataset: &Dataset,
    config: &ExtractConfig,
) -> Result<Vec<KeypointSet>> {
    if config.k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let model = match (detector.needs_model(), model) {
        (true, None) => {
            return Err(Error::Config(format!(
                "detector {detector} needs a trained model"
            )));
        }
        (true, Some(m)) => {
            if detector == Detector::KaeSoft && m.config().n_keypoints != config.k {
                return Err(Error::Config(format!(
                    "kae-soft yields the model's {} keypoints, but k = {} was requested",
                    m.config().n_keypoints,
                    config.k
                )));
            }
            Some(m)
        }
        (false, _) => None,
    };
    dataset
        .clouds()
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let stream_seed = |s| derive_seed(config.seed, s, i as u64);
            let selected = |hk: crate::detection::HardKeypoints| KeypointSet {
                points: hk.points,
                indices: Some(hk.indices),
            };
            Ok(match (detector, model) {
                (Detector::KaeSoft, Some(m)) => {
                    let (_, k) = m.propose(cloud)?;
                    KeypointSet {
                        points: k.to_points()?,
                        indices: None,
                    }
                }
                (Detector::KaeNms, Some(m)) => {
                    let scores = point_scores(&m.encode(cloud)?)?;
                    selected(nms_select(cloud, &scores, config.k, &config.nms)?)
                }
                (Detector::Fps, _) => selected(fps_select_seeded(
                    cloud,
                    config.k,
                    stream_seed(Stream::FpsStart),
                )?),
                (Detector::Random, _) => selected(random_select(
                    cloud,
                    config.k,
                    stream_seed(Stream::RandomSelect),
                )?),
                (_, None) => unreachable!("model presence checked above"),
            })
        })
        .collect()
}

/// The downstream classifier and its training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub detector: Detector,
    pub k: usize,
    /// Shared per-point layers, applied before the max-pool.
    pub point_widths: Vec<usize>,
    /// Hidden layers after the pool; a linear layer to the class count
    /// follows.
    pub head_widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub nms: NmsConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            detector: Detector::KaeSoft,
            k: 8,
            point_widths: vec![64],
            head_widths: vec![32],
            epochs: 50,
            learning_rate: 1e-3,
            seed: 0,
            nms: NmsConfig::default(),
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.point_widths.is_empty() {
            return Err(Error::Config(
                "the classifier needs at least one per-point layer".into(),
            ));
        }
        if self
            .point_widths
            .iter()
            .chain(&self.head_widths)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        self.train_config().validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            k: self.k,
            nms: self.nms,
            seed: self.seed,
        }
    }

    /// SHA-256 of everything except the detector, as lowercase hex. Equal
    /// hashes mean identically configured and seeded classifiers.
    pub fn classifier_hash(&self) -> String {
        let shared = DownstreamConfig {
            detector: Detector::KaeSoft,
            ..self.clone()
        };
        let json = serde_json::to_string(&shared).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// PointNet-style classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub point: Vec<Layer<Tensor>>,
    pub head: Vec<Layer<Tensor>>,
}

impl Classifier {
    pub fn init(config: &DownstreamConfig, n_classes: usize) -> Result<Self> {
        config.validate()?;
        if n_classes < 1 {
            return Err(Error::Config(
                "the classifier needs at least one class".into(),
            ));
        }
        let mut rng = stream_rng(config.seed, Stream::DownstreamInit, 0);
        let mut stack = |input: usize, widths: &[usize]| {
            let mut fan_in = input;
            widths
                .iter()
                .map(|&w| {
                    let layer = glorot_layer(fan_in, w, &mut rng);
                    fan_in = w;
                    layer
                })
                .collect::<Vec<_>>()
        };
        let point = stack(3, &config.point_widths);
        let pooled = *config.point_widths.last().expect("validated");
        let mut head_widths = config.head_widths.clone();
        head_widths.push(n_classes);
        let head = stack(pooled, &head_widths);
        Ok(Self { point, head })
    }

    pub fn n_classes(&self) -> usize {
        self.head.last().map_or(0, |l| l.bias.len())
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.point
            .iter_mut()
            .chain(&mut self.head)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.point
            .iter()
            .chain(&self.head)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> (Vec<Layer<Var>>, Vec<Layer<Var>>) {
        let mut bind = |layers: &[Layer<Tensor>]| {
            layers
                .iter()
                .map(|l| Layer {
                    weight: tape.leaf(l.weight.clone(), trainable),
                    bias: tape.leaf(l.bias.clone(), trainable),
                })
                .collect::<Vec<_>>()
        };
        (bind(&self.point), bind(&self.head))
    }

    fn graph(
        tape: &mut Tape,
        point: &[Layer<Var>],
        head: &[Layer<Var>],
        keypoints: Var,
    ) -> Result<Var> {
        let h = mlp(tape, keypoints, point, false)?;
        let pooled = tape.maxpool_rows(h)?;
        let pooled = tape.reshape(pooled, &[1, tape.value(pooled).len()])?;
        let logits = mlp(tape, pooled, head, true)?;
        tape.reshape(logits, &[tape.value(logits).len()])
    }

    pub fn logits(&self, keypoints: &KeypointSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (point, head) = self.bind(&mut tape, false);
        let x = tape.constant(keypoints.to_tensor());
        let logits = Self::graph(&mut tape, &point, &head, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Arg-max class; ties go to the lowest class index.
    pub fn predict(&self, keypoints: &KeypointSet) -> Result<usize> {
        let logits = self.logits(keypoints)?;
        let mut best = 0;
        for (c, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = c;
            }
        }
        Ok(best)
    }
}

/// Overall and per-class accuracy of a classifier on a labelled split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
}

pub fn accuracy(
    classifier: &Classifier,
    sets: &[KeypointSet],
    labels: &[usize],
) -> Result<Accuracy> {
    if sets.len() != labels.len() {
        return Err(Error::shape("accuracy", &[sets.len()], &[labels.len()]));
    }
    if sets.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let c = classifier.n_classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (set, &label) in sets.iter().zip(labels) {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        totals[label] += 1;
        if classifier.predict(set)? == label {
            hits[label] += 1;
        }
    }
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    Ok(Accuracy {
        overall: hits.iter().sum::<usize>() as f64 / sets.len() as f64,
        per_class,
    })
}

/// A trained classifier with its held-out score.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamResult {
    pub classifier: Classifier,
    pub accuracy: Accuracy,
    /// Mean training cross-entropy per epoch.
    pub loss_history: Vec<f64>,
}

/// Labelled keypoint sets for one split.
#[derive(Clone, Copy, Debug)]
pub struct LabelledSets<'a> {
    pub sets: &'a [KeypointSet],
    pub labels: &'a [usize],
}

/// Trains a fresh classifier on `train` with per-sample Adam and scores it
/// on `test`.
pub fn train_downstream(
    train: LabelledSets<'_>,
    test: LabelledSets<'_>,
    n_classes: usize,
    config: &DownstreamConfig,
) -> Result<DownstreamResult> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    for split in [train, test] {
        if split.sets.len() != split.labels.len() {
            return Err(Error::shape(
                "train_downstream",
                &[split.sets.len()],
                &[split.labels.len()],
            ));
        }
        if let Some(&label) = split.labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        if let Some(s) = split.sets.iter().find(|s| s.len() != config.k) {
            return Err(Error::Config(format!(
                "expected {} keypoints per set, got {}",
                config.k,
                s.len()
            )));
        }
    }
    if train.sets.is_empty() {
        return Err(Error::EmptyInput("train_downstream"));
    }

    let mut classifier = Classifier::init(config, n_classes)?;
    let mut state = OptimizerState::for_tensors(classifier.tensors());
    let train_cfg = config.train_config();
    let mut order: Vec<usize> = (0..train.sets.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(
            config.seed,
            Stream::DownstreamShuffle,
            epoch as u64,
        ));
        let mut sum = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let (point, head) = classifier.bind(&mut tape, true);
            let x = tape.constant(train.sets[i].to_tensor());
            let logits = Classifier::graph(&mut tape, &point, &head, x)?;
            let loss = tape.cross_entropy(logits, train.labels[i])?;
            tape.backward(loss)?;
            sum += tape.value(loss).item();
            let grads: Vec<Tensor> = point
                .iter()
                .chain(&head)
                .flat_map(|l| [l.weight, l.bias])
                .map(|v| {
                    tape.take_grad(v)
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
                })
                .collect();
            adam_update(classifier.tensors_mut(), &grads, &mut state, &train_cfg)?;
        }
        loss_history.push(sum / train.sets.len() as f64);
    }
    let accuracy = accuracy(&classifier, test.sets, test.labels)?;
    Ok(DownstreamResult {
        classifier,
        accuracy,
        loss_history,
    })
}

/// Mean chamfer loss between each cloud and its reconstruction.
pub fn eval_reconstruction(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("eval_reconstruction"));
    }
    let mut total = 0.0;
    for cloud in dataset.clouds() {
        total += reconstruction_chamfer(params, cloud)?;
    }
    Ok(total / dataset.len() as f64)
}

fn reconstruction_chamfer(params: &ModelParams, cloud: &PointCloud) -> Result<f64> {
    let mut tape = Tape::new();
    let net = params.bind_constant(&mut tape);
    let x = tape.constant(cloud.to_tensor());
    let d = encode(&mut tape, &net, params.config(), x)?;
    let k = soft_propose(&mut tape, d, x)?;
    let (_, recon) = decode(&mut tape, &net, params.config(), k)?;
    let loss = tape.chamfer_loss(x, recon)?;
    Ok(tape.value(loss).item())
}

/// One detector's line in the comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorRow {
    pub detector: Detector,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub final_train_loss: f64,
    pub classifier_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub train_mean_chamfer: f64,
    pub test_mean_chamfer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub n_points: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Classifier settings shared by every row (the detector field is
    /// irrelevant here).
    pub classifier: DownstreamConfig,
    pub classifier_hash: String,
    pub rows: Vec<DetectorRow>,
    pub reconstruction: Option<ReconstructionReport>,
}

impl EvalReport {
    pub fn row(&self, detector: Detector) -> Option<&DetectorRow> {
        self.rows.iter().find(|r| r.detector == detector)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Detectors as columns, accuracies as rows.
    pub fn to_table(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.rows.iter().map(|r| r.detector.to_string()));
        let fmt_acc = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{:.1}%", 100.0 * a));
        let mut lines = vec![header];
        let mut overall = vec!["accuracy".to_string()];
        overall.extend(self.rows.iter().map(|r| fmt_acc(Some(r.accuracy))));
        lines.push(overall);
        for (c, name) in self.class_names.iter().enumerate() {
            let mut line = vec![format!("  {name}")];
            line.extend(
                self.rows
                    .iter()
                    .map(|r| fmt_acc(r.per_class_accuracy.get(c).copied().flatten())),
            );
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, &w))| {
                    if j == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        }
        writeln!(
            out,
            "\nk={} epochs={} seed={} train={} test={} classifier={}",
            self.classifier.k,
            self.classifier.epochs,
            self.seed,
            self.n_train,
            self.n_test,
            &self.classifier_hash[..12]
        )
        .expect("string write");
        if let Some(r) = &self.reconstruction {
            writeln!(
                out,
                "reconstruction mean chamfer: train {:.6} test {:.6}",
                r.train_mean_chamfer, r.test_mean_chamfer
            )
            .expect("string write");
        }
        out
    }

    /// Writes `report.json` and `report.txt` under `dir`; returns both paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let json = dir.as_ref().join("report.json");
        let txt = dir.as_ref().join("report.txt");
        io_write_file(&json, self.to_json().as_bytes())?;
        io_write_file(&txt, self.to_table().as_bytes())?;
        Ok((json, txt))
    }
}

/// Trains one classifier per detector with identical settings and
/// collects held-out accuracies. `config.detector` is ignored.
pub fn run_comparison(
    train: &Dataset,
    test: &Dataset,
    model: Option<&ModelParams>,
    detectors: &[Detector],
    config: &DownstreamConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if detectors.is_empty() {
        return Err(Error::Config("no detectors requested".into()));
    }
    if let Some(d) = detectors
        .iter()
        .enumerate()
        .find_map(|(i, d)| detectors[..i].contains(d).then_some(d))
    {
        return Err(Error::Config(format!("detector {d} listed twice")));
    }
    if train.class_names() != test.class_names() {
        return Err(Error::Data(
            "train and test splits disagree on class names".into(),
        ));
    }
    let labels = |d: &Dataset| {
        d.labels()
            .ok_or_else(|| Error::Data(format!("{} split has unlabelled clouds", d.split())))
    };
    let (train_labels, test_labels) = (labels(train)?, labels(test)?);
    let n_points = train.n_points().or(test.n_points()).unwrap_or(0);

    let mut rows = Vec::with_capacity(detectors.len());
    for &detector in detectors {
        let cfg = DownstreamConfig {
            detector,
            ..config.clone()
        };
        let extract = cfg.extract_config();
        let train_sets = extract_keypoints(detector, model, train, &extract)?;
        let test_sets = extract_keypoints(detector, model, test, &extract)?;
        let result = train_downstream(
            LabelledSets {
                sets: &train_sets,
                labels: &train_labels,
            },
            LabelledSets {
                sets: &test_sets,
                labels: &test_labels,
            },
            train.n_classes(),
            &cfg,
        )?;
        rows.push(DetectorRow {
            detector,
            accuracy: result.accuracy.overall,
            per_class_accuracy: result.accuracy.per_class,
            final_train_loss: *result.loss_history.last().expect("epochs >= 1"),
            classifier_hash: cfg.classifier_hash(),
        });
    }
    let classifier_hash = config.classifier_hash();
    debug_assert!(rows.iter().all(|r| r.classifier_hash == classifier_hash));

    let reconstruction = match model {
        Some(m) if detectors.iter().any(|d| d.needs_model()) => Some(ReconstructionReport {
            train_mean_chamfer: eval_reconstruction(m, train)?,
            test_mean_chamfer: eval_reconstruction(m, test)?,
        }),
        _ => None,
    };
    Ok(EvalReport {
        seed: config.seed,
        class_names: train.class_names().to_vec(),
        n_points,
        n_train: train.len(),
        n_test: test.len(),
        classifier: config.clone(),
        classifier_hash,
        rows,
        reconstruction,
    })
}
