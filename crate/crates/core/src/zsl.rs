//! Post-training pipeline: latent training-set generation, the softmax
//! classifier over latent codes, ZSL/GZSL metrics, and the experiment and
//! ablation drivers.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_splits, FeatureTable, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{ModelDims, VaePair};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::{self, Tensor2D};
use crate::numerics::Rng;
use crate::train::{adam_step, train_with_dims, AdamState, HyperParams, TrainResult};

/// Classifier-training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Test instances come only from unseen classes.
    Zsl,
    /// Test instances may come from seen or unseen classes.
    Gzsl,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Zsl => write!(f, "zsl"),
            Mode::Gzsl => write!(f, "gzsl"),
        }
    }
}

/// Where a latent training row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SemanticGenerated,
    VisualEncoded,
}

/// Latent rows with labels, used to train the classifier.
#[derive(Clone, Debug)]
pub struct LatentDataset {
    pub rows: Tensor2D,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

/// Samples the classifier's training set in latent space.
///
/// For every unseen class the descriptor is encoded once and `n_gen`
/// reparameterized samples are drawn. Under GZSL each seen-class training
/// instance is additionally encoded and sampled once.
pub fn generate_latent_training_set(
    model: &VaePair,
    table: &FeatureTable,
    split: &SplitSpec,
    mode: Mode,
    n_gen: usize,
    rng: &mut Rng,
) -> Result<LatentDataset> {
    if n_gen == 0 {
        return Err(Error::Config("n_gen must be at least 1".into()));
    }
    let gamma = model.dims.latent_dim;
    let mut rows: Vec<Tensor2D> = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();

    let descriptors = table.descriptor_rows(&split.unseen)?;
    let posterior = model.encode_semantic(&descriptors)?;
    let std = posterior.std();
    for (row, &class) in split.unseen.iter().enumerate() {
        let mut class_rows = Tensor2D::zeros(n_gen, gamma);
        for g in 0..n_gen {
            for j in 0..gamma {
                let z = posterior.mu.get(row, j) + std.get(row, j) * rng.normal();
                class_rows.set(g, j, z);
            }
            labels.push(class);
            provenance.push(Provenance::SemanticGenerated);
        }
        rows.push(class_rows);
    }

    if mode == Mode::Gzsl {
        for (&class, indices) in &split.train_instances(table, mode) {
            if indices.is_empty() {
                continue;
            }
            let visual = table.visual_rows(indices)?;
            let post = model.encode_visual(&visual)?;
            let eps = rng.normal_tensor(visual.rows(), gamma);
            rows.push(crate::model::gaussian_reparam(&post.mu, &post.log_var, &eps));
            labels.extend(std::iter::repeat(class).take(indices.len()));
            provenance.extend(std::iter::repeat(Provenance::VisualEncoded).take(indices.len()));
        }
    }

    let total: usize = rows.iter().map(Tensor2D::rows).sum();
    let mut stacked = Tensor2D::zeros(total, gamma);
    let mut at = 0;
    for block in rows {
        for i in 0..block.rows() {
            stacked.row_mut(at).copy_from_slice(block.row(i));
            at += 1;
        }
    }
    Ok(LatentDataset { rows: stacked, labels, provenance })
}

/// Multinomial logistic-regression settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSettings {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings { epochs: 50, learning_rate: 1e-2 }
    }
}

/// Linear softmax classifier over latent codes.
#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    pub weights: Tensor2D,
    pub bias: Tensor2D,
    /// Dense class id of each output column, ascending.
    pub classes: Vec<usize>,
}

impl SoftmaxClassifier {
    pub fn logits(&self, latent: &Tensor2D) -> Result<Tensor2D> {
        tensor::affine(latent, &self.weights, &self.bias)
    }

    /// Argmax per row; ties break toward the smaller class id.
    pub fn predict(&self, latent: &Tensor2D) -> Result<Vec<usize>> {
        let logits = self.logits(latent)?;
        let mut out = Vec::with_capacity(logits.rows());
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(self.classes[best]);
        }
        Ok(out)
    }
}

/// Trains the softmax classifier by full-batch adaptive-moment descent on
/// the cross-entropy; returns the classifier and the per-epoch loss history.
pub fn train_classifier(
    ds: &LatentDataset,
    settings: &ClassifierSettings,
) -> Result<(SoftmaxClassifier, Vec<f64>)> {
    if ds.rows.rows() == 0 {
        return Err(Error::Data("latent dataset is empty".into()));
    }
    let mut classes: Vec<usize> = ds.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "classifier needs at least 2 classes, dataset has {}",
            classes.len()
        )));
    }
    let col_of: BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();

    let n = ds.rows.rows();
    let gamma = ds.rows.cols();
    let c = classes.len();
    let mut weights = Tensor2D::zeros(gamma, c);
    let mut bias = Tensor2D::zeros(1, c);

    let mut onehot = Tensor2D::zeros(n, c);
    for (i, &label) in ds.labels.iter().enumerate() {
        onehot.set(i, col_of[&label], 1.0);
    }
    let full_mask = Tensor2D::filled(n, c, 1.0);

    let hp = HyperParams {
        learning_rate: settings.learning_rate,
        ..HyperParams::default()
    };
    let mut state = AdamState::new(&[&weights, &bias]);
    let mut history = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let mut tape = Tape::new();
        let x = tape.input(ds.rows.clone());
        let w = tape.input(weights.clone());
        let b = tape.input(bias.clone());
        let logits = tape.affine(x, w, b)?;
        let lse = tape.masked_row_lse(logits, full_mask.clone())?;
        let denom = tape.sum_all(lse);
        let numer = tape.weighted_sum(logits, onehot.clone())?;
        let diff = tape.sub(denom, numer)?;
        let ce = tape.scale(diff, 1.0 / n as f64);
        history.push(tape.scalar(ce));
        tape.backward(ce)?;
        let grads = vec![tape.grad(w), tape.grad(b)];
        adam_step(&mut [&mut weights, &mut bias], &grads, &mut state, &hp)?;
    }
    Ok((SoftmaxClassifier { weights, bias, classes }, history))
}

/// Encodes visual features and classifies their posterior means.
pub fn classify(
    model: &VaePair,
    clf: &SoftmaxClassifier,
    visual: &Tensor2D,
) -> Result<Vec<usize>> {
    let posterior = model.encode_visual(visual)?;
    clf.predict(&posterior.mu)
}

/// As [`classify`], but optionally classifying one reparameterized sample
/// per instance instead of the posterior mean.
pub fn classify_with(
    model: &VaePair,
    clf: &SoftmaxClassifier,
    visual: &Tensor2D,
    eval_on_sample: bool,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let posterior = model.encode_visual(visual)?;
    let codes = if eval_on_sample {
        model.sample_latent(&posterior, rng)
    } else {
        posterior.mu
    };
    clf.predict(&codes)
}

/// Metrics of one evaluated split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zsl_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic_mean: Option<f64>,
    /// Per-class accuracies, for diagnostics.
    pub per_class: BTreeMap<usize, f64>,
}

impl SplitMetrics {
    /// The metric that gets averaged across splits: overall accuracy under
    /// ZSL, the harmonic mean under GZSL.
    pub fn headline(&self) -> f64 {
        self.zsl_acc.or(self.harmonic_mean).unwrap_or(0.0)
    }
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

fn micro_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    correct as f64 / truth.len().max(1) as f64
}

fn per_class_accuracy(pred: &[usize], truth: &[usize]) -> BTreeMap<usize, f64> {
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, &t) in pred.iter().zip(truth) {
        let e = hits.entry(t).or_insert((0, 0));
        e.1 += 1;
        if *p == t {
            e.0 += 1;
        }
    }
    hits.into_iter()
        .map(|(c, (ok, n))| (c, ok as f64 / n as f64))
        .collect()
}

/// Scores the trained classifier on the split's test partition.
pub fn evaluate(
    model: &VaePair,
    clf: &SoftmaxClassifier,
    table: &FeatureTable,
    split: &SplitSpec,
    mode: Mode,
) -> Result<SplitMetrics> {
    let mut rng = Rng::new(0);
    evaluate_with(model, clf, table, split, mode, false, &mut rng)
}

pub fn evaluate_with(
    model: &VaePair,
    clf: &SoftmaxClassifier,
    table: &FeatureTable,
    split: &SplitSpec,
    mode: Mode,
    eval_on_sample: bool,
    rng: &mut Rng,
) -> Result<SplitMetrics> {
    let unseen_idx = split.unseen_test_instances(table);
    if unseen_idx.is_empty() {
        return Err(Error::Evaluation("unseen test partition is empty".into()));
    }
    let unseen_truth: Vec<usize> = unseen_idx.iter().map(|&i| table.labels()[i]).collect();
    let unseen_pred = classify_with(
        model,
        clf,
        &table.visual_rows(&unseen_idx)?,
        eval_on_sample,
        rng,
    )?;

    match mode {
        Mode::Zsl => {
            let per_class = per_class_accuracy(&unseen_pred, &unseen_truth);
            let macro_acc =
                per_class.values().sum::<f64>() / per_class.len().max(1) as f64;
            Ok(SplitMetrics {
                split_index: split.split_index,
                zsl_acc: Some(micro_accuracy(&unseen_pred, &unseen_truth)),
                macro_acc: Some(macro_acc),
                seen_acc: None,
                unseen_acc: None,
                harmonic_mean: None,
                per_class,
            })
        }
        Mode::Gzsl => {
            let seen_idx = split.seen_test_instances(table, mode);
            if seen_idx.is_empty() {
                return Err(Error::Evaluation("seen test partition is empty".into()));
            }
            let seen_truth: Vec<usize> = seen_idx.iter().map(|&i| table.labels()[i]).collect();
            let seen_pred = classify_with(
                model,
                clf,
                &table.visual_rows(&seen_idx)?,
                eval_on_sample,
                rng,
            )?;
            let s = micro_accuracy(&seen_pred, &seen_truth);
            let u = micro_accuracy(&unseen_pred, &unseen_truth);
            let h = harmonic_mean(s, u);
            debug_assert!((0.0..=1.0).contains(&h) && h <= (s + u) / 2.0 + 1e-12);
            let mut per_class = per_class_accuracy(&seen_pred, &seen_truth);
            per_class.extend(per_class_accuracy(&unseen_pred, &unseen_truth));
            Ok(SplitMetrics {
                split_index: split.split_index,
                zsl_acc: None,
                macro_acc: None,
                seen_acc: Some(s),
                unseen_acc: Some(u),
                harmonic_mean: Some(h),
                per_class,
            })
        }
    }
}

// ── Experiment driver ───────────────────────────────────────────────

/// Full pipeline settings for one experiment (all splits of one ratio).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub ratio: (usize, usize),
    pub num_splits: usize,
    pub hp: HyperParams,
    /// Hidden and latent widths; feature dims are taken from the table.
    pub hidden_visual: usize,
    pub hidden_semantic: usize,
    pub latent_dim: usize,
    /// Generated latent samples per unseen class.
    pub n_gen: usize,
    pub classifier: ClassifierSettings,
    pub eval_on_sample: bool,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn new(mode: Mode, ratio: (usize, usize), master_seed: u64) -> Self {
        ExperimentConfig {
            mode,
            ratio,
            num_splits: 5,
            hp: HyperParams::preset(mode),
            hidden_visual: ModelDims::default().hidden_visual,
            hidden_semantic: ModelDims::default().hidden_semantic,
            latent_dim: ModelDims::default().latent_dim,
            n_gen: 200,
            classifier: ClassifierSettings::default(),
            eval_on_sample: false,
            master_seed,
        }
    }

    pub fn dims_for(&self, table: &FeatureTable) -> ModelDims {
        ModelDims {
            visual_dim: table.visual_dim(),
            semantic_dim: table.semantic_dim(),
            hidden_visual: self.hidden_visual,
            hidden_semantic: self.hidden_semantic,
            latent_dim: self.latent_dim,
        }
    }
}

/// One split's artifacts.
#[derive(Debug)]
pub struct SplitRun {
    pub split: SplitSpec,
    pub train: TrainResult,
    pub classifier_history: Vec<f64>,
    pub metrics: SplitMetrics,
}

/// Aggregated report in the on-disk schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub ratio: (usize, usize),
    pub per_split: Vec<SplitMetrics>,
    pub mean: f64,
    pub std: f64,
    pub config_echo: serde_json::Value,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub runs: Vec<SplitRun>,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs one split end to end: train, generate, fit classifier, evaluate.
pub fn run_split(
    table: &FeatureTable,
    split: &SplitSpec,
    cfg: &ExperimentConfig,
    split_rng: &Rng,
) -> Result<SplitRun> {
    let dims = cfg.dims_for(table);
    let train = train_with_dims(table, split, cfg.mode, &cfg.hp, &dims, split_rng)?;
    let mut classifier_rng = split_rng.derive(5);
    let ds = generate_latent_training_set(
        &train.model,
        table,
        split,
        cfg.mode,
        cfg.n_gen,
        &mut classifier_rng,
    )?;
    let (clf, classifier_history) = train_classifier(&ds, &cfg.classifier)?;
    let metrics = evaluate_with(
        &train.model,
        &clf,
        table,
        split,
        cfg.mode,
        cfg.eval_on_sample,
        &mut classifier_rng,
    )?;
    Ok(SplitRun { split: split.clone(), train, classifier_history, metrics })
}

/// Trains and evaluates every split, in parallel, and aggregates.
///
/// Sub-streams of the master seed: split construction uses label 1, the
/// pipeline of split `i` uses label `6 + i`.
pub fn run_experiment(table: &FeatureTable, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.hp.validate()?;
    let master = Rng::new(cfg.master_seed);
    let splits = make_splits(
        table.num_classes(),
        cfg.ratio,
        cfg.num_splits,
        master.derive(1).seed_value(),
    )?;
    let runs: Vec<Result<SplitRun>> = splits
        .par_iter()
        .map(|split| run_split(table, split, cfg, &master.derive(6 + split.split_index as u64)))
        .collect();
    let mut collected = Vec::with_capacity(runs.len());
    for r in runs {
        collected.push(r?);
    }
    let headlines: Vec<f64> = collected.iter().map(|r| r.metrics.headline()).collect();
    let (mean, std) = mean_and_std(&headlines);
    let report = ExperimentReport {
        mode: cfg.mode,
        ratio: cfg.ratio,
        per_split: collected.iter().map(|r| r.metrics.clone()).collect(),
        mean,
        std,
        config_echo: serde_json::to_value(cfg)?,
    };
    Ok(ExperimentOutput { report, runs: collected })
}

// ── Ablation ────────────────────────────────────────────────────────

/// Which contrastive terms each ablation variant keeps.
pub const ABLATION_VARIANTS: [(&str, bool, bool, bool); 6] = [
    ("v0", false, false, false),
    ("v1", true, false, false),
    ("v2", false, true, false),
    ("v3", false, false, true),
    ("v4", true, true, false),
    ("v5", true, true, true),
];

/// Zeroes the disabled contrastive weights of a base configuration.
pub fn variant_weights(base: &crate::losses::LossWeights, variant: usize) -> crate::losses::LossWeights {
    let (_, vtov, vtos, stov) = ABLATION_VARIANTS[variant];
    crate::losses::LossWeights {
        vtov: if vtov { base.vtov } else { 0.0 },
        vtos: if vtos { base.vtos } else { 0.0 },
        stov: if stov { base.stov } else { 0.0 },
        ..base.clone()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub vtov: bool,
    pub vtos: bool,
    pub stov: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zsl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gzsl: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Full per-mode reports keyed by `"<variant>/<mode>"`.
    pub details: BTreeMap<String, ExperimentReport>,
}

/// Runs the six ablation variants for each requested mode.
///
/// All variants of one mode share the master seed, so they see identical
/// splits, initializations, and batch orders; only the loss terms differ.
pub fn run_ablation(
    table: &FeatureTable,
    zsl_cfg: Option<&ExperimentConfig>,
    gzsl_cfg: Option<&ExperimentConfig>,
) -> Result<AblationReport> {
    let mut rows: Vec<AblationRow> = ABLATION_VARIANTS
        .iter()
        .map(|(name, vtov, vtos, stov)| AblationRow {
            variant: (*name).to_string(),
            vtov: *vtov,
            vtos: *vtos,
            stov: *stov,
            zsl: None,
            gzsl: None,
        })
        .collect();
    let mut details = BTreeMap::new();

    for (cfg, mode) in [(zsl_cfg, Mode::Zsl), (gzsl_cfg, Mode::Gzsl)] {
        let Some(cfg) = cfg else { continue };
        if cfg.mode != mode {
            return Err(Error::Config(format!(
                "ablation {mode} slot received a {} configuration",
                cfg.mode
            )));
        }
        let outputs: Vec<Result<(usize, ExperimentReport)>> = (0..ABLATION_VARIANTS.len())
            .into_par_iter()
            .map(|v| {
                let mut vcfg = cfg.clone();
                vcfg.hp.weights = variant_weights(&cfg.hp.weights, v);
                // Disabled vtov lifts the k >= 2 requirement; keep k as given.
                let out = run_experiment(table, &vcfg)?;
                Ok((v, out.report))
            })
            .collect();
        for item in outputs {
            let (v, report) = item?;
            match mode {
                Mode::Zsl => rows[v].zsl = Some(report.mean),
                Mode::Gzsl => rows[v].gzsl = Some(report.mean),
            }
            details.insert(format!("{}/{mode}", ABLATION_VARIANTS[v].0), report);
        }
    }
    Ok(AblationReport { rows, details })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::model::init_params;

    fn tiny_model() -> VaePair {
        init_params(
            &mut Rng::new(3),
            &ModelDims {
                visual_dim: 8,
                semantic_dim: 6,
                hidden_visual: 8,
                hidden_semantic: 6,
                latent_dim: 4,
            },
        )
        .unwrap()
    }

    fn tiny_table(classes: usize, per_class: usize) -> FeatureTable {
        synth_dataset(&SynthConfig {
            num_classes: classes,
            instances_per_class: per_class,
            visual_dim: 8,
            semantic_dim: 6,
            concept_dim: 4,
            intra_class_std: 0.2,
            inter_class_sim: 0.1,
            label_noise_rate: 0.0,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn zsl_generation_counts() {
        let model = tiny_model();
        let table = tiny_table(12, 10);
        let split = &make_splits(12, (2, 10), 1, 1).unwrap()[0];
        let ds = generate_latent_training_set(
            &model, &table, split, Mode::Zsl, 200, &mut Rng::new(5),
        )
        .unwrap();
        assert_eq!(ds.rows.rows(), 2000);
        assert!(ds.provenance.iter().all(|p| *p == Provenance::SemanticGenerated));
        // Every label is an unseen class.
        assert!(ds.labels.iter().all(|l| split.unseen.contains(l)));
    }

    #[test]
    fn gzsl_generation_counts() {
        let model = tiny_model();
        let table = tiny_table(20, 100);
        let split = &make_splits(20, (16, 4), 1, 1).unwrap()[0];
        let ds = generate_latent_training_set(
            &model, &table, split, Mode::Gzsl, 200, &mut Rng::new(5),
        )
        .unwrap();
        // 4 unseen x 200 generated + 16 seen x 75 encoded.
        assert_eq!(ds.rows.rows(), 800 + 1200);
        let generated = ds
            .provenance
            .iter()
            .filter(|p| **p == Provenance::SemanticGenerated)
            .count();
        assert_eq!(generated, 800);
    }

    #[test]
    fn clamped_posterior_generates_near_identical_rows() {
        let mut model = tiny_model();
        // Force the log-variance half of the encoder output far below the
        // clamp floor; sampled std is then exp(-5).
        for j in 4..8 {
            model.semantic_encoder.b2.set(0, j, -1e6);
        }
        model.semantic_encoder.w2 = Tensor2D::zeros(6, 8);
        let table = tiny_table(4, 4);
        let split = &make_splits(4, (3, 1), 1, 1).unwrap()[0];
        let ds = generate_latent_training_set(
            &model, &table, split, Mode::Zsl, 50, &mut Rng::new(5),
        )
        .unwrap();
        let mut max_dist: f64 = 0.0;
        for a in 0..50 {
            for b in (a + 1)..50 {
                let d: f64 = ds
                    .rows
                    .row(a)
                    .iter()
                    .zip(ds.rows.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                max_dist = max_dist.max(d);
            }
        }
        // std = exp(-5) ~ 6.7e-3 per coordinate at the clamp floor.
        assert!(max_dist < 0.1, "max pairwise distance {max_dist}");
    }

    fn separable_dataset() -> LatentDataset {
        let mut rows = Tensor2D::zeros(40, 3);
        let mut labels = Vec::new();
        for i in 0..40 {
            let class = i / 20;
            rows.set(i, 0, if class == 0 { 2.0 } else { -2.0 });
            rows.set(i, 1, (i % 20) as f64 * 0.01);
            rows.set(i, 2, -0.5 + (i % 7) as f64 * 0.1);
            labels.push(class + 3);
        }
        LatentDataset {
            rows,
            labels,
            provenance: vec![Provenance::SemanticGenerated; 40],
        }
    }

    #[test]
    fn classifier_fits_separable_data_within_twenty_epochs() {
        let ds = separable_dataset();
        let settings = ClassifierSettings { epochs: 20, learning_rate: 1e-2 };
        let (clf, history) = train_classifier(&ds, &settings).unwrap();
        assert_eq!(history.len(), 20);
        let pred = clf.predict(&ds.rows).unwrap();
        let acc = micro_accuracy(&pred, &ds.labels);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn classifier_is_shift_invariant() {
        let ds = separable_dataset();
        let (mut clf, _) = train_classifier(&ds, &ClassifierSettings::default()).unwrap();
        let before = clf.predict(&ds.rows).unwrap();
        for v in clf.bias.data_mut() {
            *v += 17.5;
        }
        let after = clf.predict(&ds.rows).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn single_class_dataset_rejected() {
        let ds = LatentDataset {
            rows: Tensor2D::filled(5, 2, 1.0),
            labels: vec![4; 5],
            provenance: vec![Provenance::SemanticGenerated; 5],
        };
        assert!(matches!(
            train_classifier(&ds, &ClassifierSettings::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn classify_is_deterministic_and_ordered() {
        let model = tiny_model();
        let ds = separable_dataset();
        let (clf, _) = train_classifier(&ds, &ClassifierSettings::default()).unwrap();
        let visual = Tensor2D::filled(7, 8, 0.3);
        let a = classify(&model, &clf, &visual).unwrap();
        let b = classify(&model, &clf, &visual).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn tie_breaks_toward_smaller_class_id() {
        let clf = SoftmaxClassifier {
            weights: Tensor2D::zeros(2, 3),
            bias: Tensor2D::zeros(1, 3),
            classes: vec![2, 5, 9],
        };
        // All logits equal: the smallest class id wins.
        let pred = clf.predict(&Tensor2D::filled(4, 2, 1.0)).unwrap();
        assert_eq!(pred, vec![2, 2, 2, 2]);
    }

    #[test]
    fn harmonic_mean_identities() {
        assert!((harmonic_mean(0.5, 0.25) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.7, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(1.0, 1.0), 1.0);
    }

    #[test]
    fn mean_and_std_degenerate_cases() {
        let (m, s) = mean_and_std(&[0.4]);
        assert_eq!((m, s), (0.4, 0.0));
        let (m, s) = mean_and_std(&[0.25, 0.75]);
        assert!((m - 0.5).abs() < 1e-15);
        assert!(s > 0.0);
    }

    #[test]
    fn variant_patterns_match_the_ablation_table() {
        let base = crate::losses::LossWeights::zsl();
        let v0 = variant_weights(&base, 0);
        assert_eq!((v0.vtov, v0.vtos, v0.stov), (0.0, 0.0, 0.0));
        assert_eq!((v0.cmfr, v0.cmda), (10.0, 1.0));
        let v3 = variant_weights(&base, 3);
        assert_eq!((v3.vtov, v3.vtos, v3.stov), (0.0, 0.0, 10.0));
        let v4 = variant_weights(&base, 4);
        assert_eq!((v4.vtov, v4.vtos, v4.stov), (100.0, 100.0, 0.0));
        let v5 = variant_weights(&base, 5);
        assert_eq!(v5, base);
    }
}
