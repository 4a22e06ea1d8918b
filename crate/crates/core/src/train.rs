//! Minimization of the weighted total loss over the seen-class training set.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, FeatureTable, SplitSpec, TrainPool};
use crate::error::{Error, Result};
use crate::losses::{
    attach_terms, breakdown_from, weighted_total, LatentNodes, LossBreakdown, LossNodes,
    LossOptions, LossWeights, TermSelection,
};
use crate::model::{self, ModelDims, VaePair};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor2D;
use crate::numerics::Rng;
use crate::zsl::Mode;

/// Everything the optimization loop needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub weights: LossWeights,
    pub options: LossOptions,
    /// Classes per batch.
    pub c: usize,
    /// Instances per class per batch.
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear loss-weight warm-up over this many leading epochs (0 = off).
    pub warmup_epochs: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            weights: LossWeights::zsl(),
            options: LossOptions::default(),
            c: 5,
            k: 5,
            epochs: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 0,
        }
    }
}

impl HyperParams {
    /// Presets: ZSL uses `k = 5`, GZSL `k = 10`, each with its own loss
    /// weights; everything else is shared.
    pub fn preset(mode: Mode) -> Self {
        match mode {
            Mode::Zsl => HyperParams::default(),
            Mode::Gzsl => HyperParams {
                weights: LossWeights::gzsl(),
                k: 10,
                ..HyperParams::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.c == 0 || self.k == 0 {
            return Err(Error::Config("batch shape c and k must be at least 1".into()));
        }
        if self.weights.any_contrastive() && self.c < 2 {
            return Err(Error::Config(
                "contrastive losses need at least 2 classes per batch (c >= 2)".into(),
            ));
        }
        if self.weights.vtov > 0.0 && self.k < 2 {
            return Err(Error::Config(
                "visual-to-visual loss needs at least 2 instances per class (k >= 2)".into(),
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("optimizer eps must be positive".into()));
        }
        Ok(())
    }
}

/// First/second-moment state of the adaptive optimizer.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor2D]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor2D::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor2D::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }
}

/// One adaptive-moment update with bias correction.
pub fn adam_step(
    params: &mut [&mut Tensor2D],
    grads: &[Tensor2D],
    state: &mut AdamState,
    hp: &HyperParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != param.shape() {
            return Err(Error::Dimension(format!(
                "adam_step: gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                param.shape()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((p, gv), mv), vv) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *p -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// One loss record per optimization step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub vae: f64,
    pub cmfr: f64,
    pub cmda: f64,
    pub vtov: f64,
    pub vtos: f64,
    pub stov: f64,
    pub total: f64,
}

/// Mean unweighted terms over one epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub vae: f64,
    pub cmfr: f64,
    pub cmda: f64,
    pub vtov: f64,
    pub vtos: f64,
    pub stov: f64,
    pub total: f64,
}

/// Trained model plus the recorded loss trajectory.
#[derive(Debug)]
pub struct TrainResult {
    pub model: VaePair,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn scaled_weights(hp: &HyperParams, epoch: usize) -> LossWeights {
    if hp.warmup_epochs == 0 || epoch >= hp.warmup_epochs {
        return hp.weights.clone();
    }
    let f = (epoch + 1) as f64 / hp.warmup_epochs as f64;
    LossWeights {
        cmfr: hp.weights.cmfr * f,
        cmda: hp.weights.cmda * f,
        vtov: hp.weights.vtov * f,
        vtos: hp.weights.vtos * f,
        stov: hp.weights.stov * f,
        tau: hp.weights.tau,
    }
}

/// Forward pass + losses for one batch on a fresh tape.
///
/// Returns the tape, the sixteen parameter node ids in checkpoint order,
/// the per-term nodes, and the weighted total node. `eps_v`/`eps_s` are the
/// reparameterization draws, treated as constants.
pub fn build_step_graph(
    model: &VaePair,
    batch_visual: &Tensor2D,
    batch_descriptors: &Tensor2D,
    labels: &[usize],
    class_ids: &[usize],
    eps_v: Tensor2D,
    eps_s: Tensor2D,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<(Tape, [usize; 16], LossNodes, usize)> {
    let gamma = model.dims.latent_dim;
    let mut tape = Tape::new();
    let params = model::register_params(&mut tape, model);
    let v = tape.input(batch_visual.clone());
    let s = tape.input(batch_descriptors.clone());

    let (mu_v, log_var_v) = model::encode_on(&mut tape, &params.visual_encoder, v, gamma)?;
    let (mu_s, log_var_s) = model::encode_on(&mut tape, &params.semantic_encoder, s, gamma)?;
    let zv = model::reparam_on(&mut tape, mu_v, log_var_v, eps_v)?;
    let zs = model::reparam_on(&mut tape, mu_s, log_var_s, eps_s)?;

    let visual_recon = model::mlp_forward_on(&mut tape, &params.visual_decoder, zv)?;
    let semantic_recon = model::mlp_forward_on(&mut tape, &params.semantic_decoder, zs)?;
    let cross_visual = model::mlp_forward_on(&mut tape, &params.visual_decoder, zs)?;
    let cross_semantic = model::mlp_forward_on(&mut tape, &params.semantic_decoder, zv)?;

    let nodes = LatentNodes {
        v,
        s,
        mu_v,
        log_var_v,
        mu_s,
        log_var_s,
        zv,
        zs,
        visual_recon,
        semantic_recon,
        cross_visual_recon: cross_visual,
        cross_semantic_recon: cross_semantic,
    };
    let select = TermSelection::from_weights(weights);
    let terms = attach_terms(&mut tape, &nodes, labels, class_ids, &select, weights.tau, options)?;
    let total = weighted_total(&mut tape, &terms, weights)?;
    Ok((tape, params.ordered(), terms, total))
}

/// Trains with feature dims taken from the table and default hidden/latent
/// widths.
pub fn train(
    table: &FeatureTable,
    split: &SplitSpec,
    mode: Mode,
    hp: &HyperParams,
    rng: &Rng,
) -> Result<TrainResult> {
    let dims = ModelDims {
        visual_dim: table.visual_dim(),
        semantic_dim: table.semantic_dim(),
        ..Default::default()
    };
    train_with_dims(table, split, mode, hp, &dims, rng)
}

/// Trains with explicit model widths; feature dims must match the table.
///
/// Sub-streams: init = `rng.derive(2)`, batch sampler = `rng.derive(3)`,
/// reparameterization = `rng.derive(4)`.
pub fn train_with_dims(
    table: &FeatureTable,
    split: &SplitSpec,
    mode: Mode,
    hp: &HyperParams,
    dims: &ModelDims,
    rng: &Rng,
) -> Result<TrainResult> {
    hp.validate()?;
    dims.validate()?;
    if dims.visual_dim != table.visual_dim() || dims.semantic_dim != table.semantic_dim() {
        return Err(Error::Config(format!(
            "model feature dims {}x{} do not match table dims {}x{}",
            dims.visual_dim,
            dims.semantic_dim,
            table.visual_dim(),
            table.semantic_dim()
        )));
    }
    let pool = TrainPool::new(table, split, mode);
    if pool.total_instances() == 0 {
        return Err(Error::Sampling("training pool is empty".into()));
    }
    let mut model = model::init_params(&mut rng.derive(2), dims)?;
    let mut sampler = rng.derive(3);
    let mut reparam = rng.derive(4);

    let mut state = AdamState::new(&model.params());
    let steps_per_epoch = pool.steps_per_epoch(hp.c, hp.k);
    let gamma = model.dims.latent_dim;

    let mut steps = Vec::with_capacity(hp.epochs * steps_per_epoch);
    let mut epochs = Vec::with_capacity(hp.epochs);
    let mut step_no = 0usize;

    for epoch in 0..hp.epochs {
        let weights = scaled_weights(hp, epoch);
        let mut sums = LossBreakdown::default();
        for _ in 0..steps_per_epoch {
            step_no += 1;
            let batch = sample_batch(table, &pool, hp.c, hp.k, &mut sampler)?;
            let eps_v = reparam.normal_tensor(batch.visual.rows(), gamma);
            let eps_s = reparam.normal_tensor(batch.descriptors.rows(), gamma);

            let (mut tape, param_ids, terms, total) = build_step_graph(
                &model,
                &batch.visual,
                &batch.descriptors,
                &batch.labels,
                &batch.class_ids,
                eps_v,
                eps_s,
                &weights,
                &hp.options,
            )?;
            let breakdown = breakdown_from(&tape, &terms, Some(total));
            if !breakdown.is_finite() {
                return Err(Error::Divergence {
                    step: step_no,
                    detail: format!("non-finite loss: {breakdown:?}"),
                });
            }
            tape.backward(total)?;
            let grads: Vec<Tensor2D> = param_ids.iter().map(|&id| tape.grad(id)).collect();
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step: step_no,
                    detail: format!(
                        "non-finite gradient for parameter tensor {bad}; terms: {breakdown:?}"
                    ),
                });
            }
            adam_step(&mut model.params_mut(), &grads, &mut state, hp)?;

            sums.vae += breakdown.vae;
            sums.cmfr += breakdown.cmfr;
            sums.cmda += breakdown.cmda;
            sums.vtov += breakdown.vtov;
            sums.vtos += breakdown.vtos;
            sums.stov += breakdown.stov;
            sums.total += breakdown.total;
            steps.push(StepRecord {
                step: step_no,
                epoch,
                vae: breakdown.vae,
                cmfr: breakdown.cmfr,
                cmda: breakdown.cmda,
                vtov: breakdown.vtov,
                vtos: breakdown.vtos,
                stov: breakdown.stov,
                total: breakdown.total,
            });
        }
        let inv = 1.0 / steps_per_epoch as f64;
        epochs.push(EpochRecord {
            epoch,
            steps: steps_per_epoch,
            vae: sums.vae * inv,
            cmfr: sums.cmfr * inv,
            cmda: sums.cmda * inv,
            vtov: sums.vtov * inv,
            vtos: sums.vtos * inv,
            stov: sums.stov * inv,
            total: sums.total * inv,
        });
    }
    Ok(TrainResult { model, steps, epochs })
}

/// Writes the per-step records plus one summary line per epoch as JSON lines.
pub fn write_train_log(path: &std::path::Path, result: &TrainResult) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let mut next_step = 0usize;
    for e in &result.epochs {
        while next_step < result.steps.len() && result.steps[next_step].epoch == e.epoch {
            serde_json::to_writer(&mut w, &result.steps[next_step])?;
            writeln!(w)?;
            next_step += 1;
        }
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, synth_dataset, SynthConfig};

    fn one_param(v: Vec<f64>) -> Tensor2D {
        let n = v.len();
        Tensor2D::from_vec(1, n, v).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = one_param(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut state = AdamState::new(&[&p]);
        let hp = HyperParams::default();
        adam_step(&mut [&mut p], &[Tensor2D::zeros(1, 3)], &mut state, &hp).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_matches_scalar_oracle() {
        // Independent single-step recomputation of the update rule.
        let g = [0.5, -2.0, 1e-3];
        let mut p = one_param(vec![0.0, 0.0, 0.0]);
        let mut state = AdamState::new(&[&p]);
        let hp = HyperParams { learning_rate: 0.01, ..HyperParams::default() };
        adam_step(&mut [&mut p], &[one_param(g.to_vec())], &mut state, &hp).unwrap();
        for (i, &gv) in g.iter().enumerate() {
            let m_hat = (1.0 - hp.beta1) * gv / (1.0 - hp.beta1);
            let v_hat = (1.0 - hp.beta2) * gv * gv / (1.0 - hp.beta2);
            let expect = -hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
            assert_eq!(p.data()[i], expect, "coordinate {i}");
            // Bias-corrected moments cancel: the move is lr * sign(g) up to eps.
            let sign_move = -hp.learning_rate * gv.signum();
            assert!((p.data()[i] - sign_move).abs() < hp.learning_rate * 1e-4);
        }
    }

    #[test]
    fn adam_two_runs_are_bit_identical() {
        let run = || {
            let mut p = one_param(vec![0.3, -0.6]);
            let mut state = AdamState::new(&[&p]);
            let hp = HyperParams::default();
            for step in 0..25 {
                let g = one_param(vec![0.1 * (step as f64 + 1.0), -0.05]);
                adam_step(&mut [&mut p], &[g], &mut state, &hp).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn tiny_setup() -> (crate::data::FeatureTable, crate::data::SplitSpec) {
        let table = synth_dataset(&SynthConfig {
            num_classes: 6,
            instances_per_class: 10,
            visual_dim: 8,
            semantic_dim: 6,
            concept_dim: 4,
            intra_class_std: 0.3,
            inter_class_sim: 0.2,
            label_noise_rate: 0.0,
            seed: 11,
        })
        .unwrap();
        let split = make_splits(6, (4, 2), 1, 3).unwrap().remove(0);
        (table, split)
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            visual_dim: 8,
            semantic_dim: 6,
            hidden_visual: 8,
            hidden_semantic: 6,
            latent_dim: 4,
        }
    }

    #[test]
    fn vae_only_run_reports_only_vae_term() {
        let (table, split) = tiny_setup();
        let hp = HyperParams {
            weights: LossWeights { cmfr: 0.0, cmda: 0.0, vtov: 0.0, vtos: 0.0, stov: 0.0, tau: 2.0 },
            epochs: 1,
            c: 2,
            k: 2,
            ..HyperParams::default()
        };
        let result =
            train_with_dims(&table, &split, Mode::Zsl, &hp, &tiny_dims(), &Rng::new(5)).unwrap();
        assert_eq!(result.epochs.len(), 1);
        let e = &result.epochs[0];
        assert!(e.vae > 0.0);
        assert_eq!((e.cmfr, e.cmda, e.vtov, e.vtos, e.stov), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(e.total, e.vae);
    }

    #[test]
    fn default_epochs_is_fifty() {
        assert_eq!(HyperParams::default().epochs, 50);
        assert_eq!(HyperParams::preset(Mode::Gzsl).k, 10);
    }

    #[test]
    fn history_is_finite_and_full_length() {
        let (table, split) = tiny_setup();
        let hp = HyperParams { epochs: 3, c: 2, k: 2, ..HyperParams::default() };
        let result =
            train_with_dims(&table, &split, Mode::Zsl, &hp, &tiny_dims(), &Rng::new(5)).unwrap();
        assert_eq!(result.epochs.len(), 3);
        assert!(result.epochs.iter().all(|e| e.total.is_finite()));
        assert!(result.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn full_run_is_deterministic() {
        let (table, split) = tiny_setup();
        let hp = HyperParams { epochs: 2, c: 2, k: 2, ..HyperParams::default() };
        let a = train_with_dims(&table, &split, Mode::Zsl, &hp, &tiny_dims(), &Rng::new(5)).unwrap();
        let b = train_with_dims(&table, &split, Mode::Zsl, &hp, &tiny_dims(), &Rng::new(5)).unwrap();
        for (x, y) in a.model.params().iter().zip(b.model.params()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(a.epochs.last().unwrap().total, b.epochs.last().unwrap().total);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_at_initialization() {
        let (table, split) = tiny_setup();
        let hp = HyperParams { learning_rate: 0.0, epochs: 1, c: 2, k: 2, ..HyperParams::default() };
        let dims = tiny_dims();
        let rng = Rng::new(5);
        let result = train_with_dims(&table, &split, Mode::Zsl, &hp, &dims, &rng).unwrap();
        let init = crate::model::init_params(&mut rng.derive(2), &dims).unwrap();
        for (a, b) in result.model.params().iter().zip(init.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn k1_with_vtov_enabled_is_rejected() {
        let hp = HyperParams { k: 1, ..HyperParams::default() };
        let err = hp.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("k >= 2"), "{err}");
    }
}
