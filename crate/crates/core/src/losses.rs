//! The six training losses and their weighted sum.
//!
//! Three single-instance alignment terms (VAE reconstruction+KL, cross-modal
//! feature reconstruction, cross-modal distribution alignment) and three
//! cross-instance contrastive terms (visual-to-visual, visual-to-semantic,
//! semantic-to-visual). Each is a differentiable scalar over one batch.
//!
//! Values follow the printed formulas as plain sums over anchors; with
//! `sum_reduction = false` (the default used in training) every term is
//! divided by its anchor count so the loss weights are batch-size
//! independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentGaussian;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor2D;

/// Weights of the five auxiliary terms plus the contrastive temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-modal feature reconstruction weight (lambda 1).
    pub cmfr: f64,
    /// Cross-modal distribution alignment weight (lambda 2).
    pub cmda: f64,
    /// Visual-to-visual contrastive weight (lambda 3).
    pub vtov: f64,
    /// Visual-to-semantic contrastive weight (lambda 4).
    pub vtos: f64,
    /// Semantic-to-visual contrastive weight (lambda 5).
    pub stov: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl LossWeights {
    /// Zero-shot training defaults.
    pub fn zsl() -> Self {
        LossWeights { cmfr: 10.0, cmda: 1.0, vtov: 100.0, vtos: 100.0, stov: 10.0, tau: 2.0 }
    }

    /// Generalized zero-shot training defaults.
    pub fn gzsl() -> Self {
        LossWeights { cmfr: 1.0, cmda: 1.0, vtov: 0.1, vtos: 1.0, stov: 1.0, tau: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda1 (cmfr)", self.cmfr),
            ("lambda2 (cmda)", self.cmda),
            ("lambda3 (vtov)", self.vtov),
            ("lambda4 (vtos)", self.vtos),
            ("lambda5 (stov)", self.stov),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn any_contrastive(&self) -> bool {
        self.vtov > 0.0 || self.vtos > 0.0 || self.stov > 0.0
    }
}

/// Behavior flags for loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    /// `true` keeps the printed plain-sum form; `false` divides each term
    /// by its anchor count (N or M).
    pub sum_reduction: bool,
    /// Compute the contrastive terms on posterior means instead of the
    /// reparameterized samples.
    pub contrastive_on_mu: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { sum_reduction: false, contrastive_on_mu: false }
    }
}

/// Everything the losses consume for one batch.
///
/// Visual rows are per instance (N of them); semantic rows hold one entry
/// per distinct class in the batch (M of them). `labels[i]` is the semantic
/// row index of instance `i`.
#[derive(Clone, Debug)]
pub struct BatchLatents {
    pub v: Tensor2D,
    pub s: Tensor2D,
    pub labels: Vec<usize>,
    /// Dataset class id of each semantic row, for error reporting.
    pub class_ids: Vec<usize>,
    pub visual_posterior: LatentGaussian,
    pub semantic_posterior: LatentGaussian,
    pub zv: Tensor2D,
    pub zs: Tensor2D,
    /// Self reconstruction of `v` from `zv`.
    pub visual_recon: Tensor2D,
    /// Self reconstruction of `s` from `zs`.
    pub semantic_recon: Tensor2D,
    /// Visual features decoded from the semantic latents (one row per class).
    pub cross_visual_recon: Tensor2D,
    /// Semantic features decoded from the visual latents (one row per instance).
    pub cross_semantic_recon: Tensor2D,
}

impl BatchLatents {
    pub fn num_instances(&self) -> usize {
        self.v.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.s.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.v.rows();
        let m = self.s.rows();
        if n == 0 || m == 0 {
            return Err(Error::Precondition("batch must be non-empty".into()));
        }
        if self.labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} instances", self.labels.len())));
        }
        if self.class_ids.len() != m {
            return Err(Error::Data(format!("{} class ids for {m} semantic rows", self.class_ids.len())));
        }
        let mut used = vec![false; m];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= m {
                return Err(Error::Data(format!(
                    "instance {i} refers to semantic row {l}, but only {m} descriptors are present"
                )));
            }
            used[l] = true;
        }
        if let Some(row) = used.iter().position(|u| !u) {
            return Err(Error::Data(format!(
                "descriptor for class {} has no instance in the batch",
                self.class_ids[row]
            )));
        }
        let gamma = self.zv.cols();
        let checks = [
            ("zv", self.zv.shape(), (n, gamma)),
            ("zs", self.zs.shape(), (m, gamma)),
            ("visual mu", self.visual_posterior.mu.shape(), (n, gamma)),
            ("visual log_var", self.visual_posterior.log_var.shape(), (n, gamma)),
            ("semantic mu", self.semantic_posterior.mu.shape(), (m, gamma)),
            ("semantic log_var", self.semantic_posterior.log_var.shape(), (m, gamma)),
            ("visual recon", self.visual_recon.shape(), self.v.shape()),
            ("semantic recon", self.semantic_recon.shape(), self.s.shape()),
            ("cross visual recon", self.cross_visual_recon.shape(), (m, self.v.cols())),
            ("cross semantic recon", self.cross_semantic_recon.shape(), (n, self.s.cols())),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension(format!("{name}: got {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    fn instances_per_row(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.s.rows()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Unweighted per-term values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vae: f64,
    pub cmfr: f64,
    pub cmda: f64,
    pub vtov: f64,
    pub vtos: f64,
    pub stov: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.vae, self.cmfr, self.cmda, self.vtov, self.vtos, self.stov, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

// ── Graph construction ──────────────────────────────────────────────

/// Node ids of the forward quantities the losses read.
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub v: NodeId,
    pub s: NodeId,
    pub mu_v: NodeId,
    pub log_var_v: NodeId,
    pub mu_s: NodeId,
    pub log_var_s: NodeId,
    pub zv: NodeId,
    pub zs: NodeId,
    pub visual_recon: NodeId,
    pub semantic_recon: NodeId,
    pub cross_visual_recon: NodeId,
    pub cross_semantic_recon: NodeId,
}

/// Which terms to materialize on the tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermSelection {
    pub vae: bool,
    pub cmfr: bool,
    pub cmda: bool,
    pub vtov: bool,
    pub vtos: bool,
    pub stov: bool,
}

impl TermSelection {
    pub fn from_weights(w: &LossWeights) -> Self {
        TermSelection {
            vae: true,
            cmfr: w.cmfr > 0.0,
            cmda: w.cmda > 0.0,
            vtov: w.vtov > 0.0,
            vtos: w.vtos > 0.0,
            stov: w.stov > 0.0,
        }
    }
}

/// Node ids of the attached loss terms; absent terms were not built.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossNodes {
    pub vae: Option<NodeId>,
    pub cmfr: Option<NodeId>,
    pub cmda: Option<NodeId>,
    pub vtov: Option<NodeId>,
    pub vtos: Option<NodeId>,
    pub stov: Option<NodeId>,
}

fn check_vtov_precondition(class_ids: &[usize], counts: &[usize]) -> Result<()> {
    for (row, &c) in counts.iter().enumerate() {
        if c == 1 {
            return Err(Error::Precondition(format!(
                "visual-to-visual loss needs at least 2 instances per class, class {} has 1",
                class_ids[row]
            )));
        }
    }
    Ok(())
}

/// L1 distance `sum |a - b|` as a scalar node.
fn l1_distance(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d);
    Ok(tape.sum_all(ad))
}

/// Closed-form KL to the standard normal: `0.5 * sum(mu^2 + e^lv - 1 - lv)`.
fn kl_to_standard_normal(tape: &mut Tape, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
    let mu_sq = tape.mul(mu, mu)?;
    let var = tape.exp(log_var);
    let lhs = tape.add(mu_sq, var)?;
    let rhs = tape.add_scalar(log_var, 1.0);
    let inner = tape.sub(lhs, rhs)?;
    let total = tape.sum_all(inner);
    Ok(tape.scale(total, 0.5))
}

fn reduce(tape: &mut Tape, node: NodeId, anchors: usize, opts: &LossOptions) -> NodeId {
    if opts.sum_reduction {
        node
    } else {
        tape.scale(node, 1.0 / anchors as f64)
    }
}

/// Attaches the selected loss terms for one batch to the tape.
///
/// `labels` maps each visual row to its semantic row; `class_ids` names the
/// classes for error messages. Contrastive similarity matrices are built on
/// L2-normalized latents with max-subtracted log-sum-exp denominators.
pub fn attach_terms(
    tape: &mut Tape,
    nodes: &LatentNodes,
    labels: &[usize],
    class_ids: &[usize],
    select: &TermSelection,
    tau: f64,
    opts: &LossOptions,
) -> Result<LossNodes> {
    let n = tape.value(nodes.v).rows();
    let m = tape.value(nodes.s).rows();
    let counts = {
        let mut c = vec![0usize; m];
        for &l in labels {
            c[l] += 1;
        }
        c
    };
    let mut out = LossNodes::default();

    if select.vae {
        let recon_v = l1_distance(tape, nodes.v, nodes.visual_recon)?;
        let kl_v = kl_to_standard_normal(tape, nodes.mu_v, nodes.log_var_v)?;
        let vis = tape.add(recon_v, kl_v)?;
        let vis = reduce(tape, vis, n, opts);

        let recon_s = l1_distance(tape, nodes.s, nodes.semantic_recon)?;
        let kl_s = kl_to_standard_normal(tape, nodes.mu_s, nodes.log_var_s)?;
        let sem = tape.add(recon_s, kl_s)?;
        let sem = reduce(tape, sem, m, opts);

        out.vae = Some(tape.add(vis, sem)?);
    }

    if select.cmfr {
        let vhat = tape.gather_rows(nodes.cross_visual_recon, labels)?;
        let s_per_instance = tape.gather_rows(nodes.s, labels)?;
        let dv = l1_distance(tape, nodes.v, vhat)?;
        let ds = l1_distance(tape, s_per_instance, nodes.cross_semantic_recon)?;
        let sum = tape.add(dv, ds)?;
        out.cmfr = Some(reduce(tape, sum, n, opts));
    }

    if select.cmda {
        let half_v = tape.scale(nodes.log_var_v, 0.5);
        let std_v = tape.exp(half_v);
        let half_s = tape.scale(nodes.log_var_s, 0.5);
        let std_s = tape.exp(half_s);
        let mu_s_i = tape.gather_rows(nodes.mu_s, labels)?;
        let std_s_i = tape.gather_rows(std_s, labels)?;
        let dmu = tape.sub(nodes.mu_v, mu_s_i)?;
        let dstd = tape.sub(std_v, std_s_i)?;
        let dmu_sq = tape.mul(dmu, dmu)?;
        let dstd_sq = tape.mul(dstd, dstd)?;
        let row_mu = tape.row_sum(dmu_sq);
        let row_std = tape.row_sum(dstd_sq);
        let row_total = tape.add(row_mu, row_std)?;
        let per_instance = tape.sqrt(row_total);
        let sum = tape.sum_all(per_instance);
        out.cmda = Some(reduce(tape, sum, n, opts));
    }

    if select.vtov || select.vtos || select.stov {
        let (zv_base, zs_base) = if opts.contrastive_on_mu {
            (nodes.mu_v, nodes.mu_s)
        } else {
            (nodes.zv, nodes.zs)
        };
        let zvn = tape.l2_normalize_rows(zv_base)?;
        let zsn = if select.vtos || select.stov {
            Some(tape.l2_normalize_rows(zs_base)?)
        } else {
            None
        };

        if select.vtov {
            check_vtov_precondition(class_ids, &counts)?;
            let sims = tape.matmul_nt(zvn, zvn)?;
            let sims = tape.scale(sims, 1.0 / tau);
            // The anchor itself is excluded from the denominator.
            let mut mask = Tensor2D::filled(n, n, 1.0);
            for i in 0..n {
                mask.set(i, i, 0.0);
            }
            let mut pos = Tensor2D::zeros(n, n);
            for i in 0..n {
                let w = 1.0 / (counts[labels[i]] - 1) as f64;
                for p in 0..n {
                    if p != i && labels[p] == labels[i] {
                        pos.set(i, p, w);
                    }
                }
            }
            let lse = tape.masked_row_lse(sims, mask)?;
            let denom = tape.sum_all(lse);
            let numer = tape.weighted_sum(sims, pos)?;
            let diff = tape.sub(denom, numer)?;
            out.vtov = Some(reduce(tape, diff, n, opts));
        }

        if select.vtos {
            let zsn = zsn.expect("semantic latents normalized above");
            let sims = tape.matmul_nt(zvn, zsn)?;
            let sims = tape.scale(sims, 1.0 / tau);
            let mask = Tensor2D::filled(n, m, 1.0);
            let mut pos = Tensor2D::zeros(n, m);
            for (i, &l) in labels.iter().enumerate() {
                pos.set(i, l, 1.0);
            }
            let lse = tape.masked_row_lse(sims, mask)?;
            let denom = tape.sum_all(lse);
            let numer = tape.weighted_sum(sims, pos)?;
            let diff = tape.sub(denom, numer)?;
            out.vtos = Some(reduce(tape, diff, n, opts));
        }

        if select.stov {
            // Every descriptor anchor needs at least one same-class instance.
            if let Some(row) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Precondition(format!(
                    "semantic-to-visual loss: descriptor for class {} has no instance in the batch",
                    class_ids[row]
                )));
            }
            let sims = tape.matmul_nt(zsn.expect("semantic latents normalized above"), zvn)?;
            let sims = tape.scale(sims, 1.0 / tau);
            let mask = Tensor2D::filled(m, n, 1.0);
            let mut pos = Tensor2D::zeros(m, n);
            for (p, &l) in labels.iter().enumerate() {
                pos.set(l, p, 1.0 / counts[l] as f64);
            }
            let lse = tape.masked_row_lse(sims, mask)?;
            let denom = tape.sum_all(lse);
            let numer = tape.weighted_sum(sims, pos)?;
            let diff = tape.sub(denom, numer)?;
            out.stov = Some(reduce(tape, diff, m, opts));
        }
    }

    Ok(out)
}

/// Combines attached terms into the weighted total node.
pub fn weighted_total(
    tape: &mut Tape,
    terms: &LossNodes,
    weights: &LossWeights,
) -> Result<NodeId> {
    let mut total = terms.vae.ok_or_else(|| {
        Error::Precondition("total loss requires the VAE term".into())
    })?;
    for (node, lambda) in [
        (terms.cmfr, weights.cmfr),
        (terms.cmda, weights.cmda),
        (terms.vtov, weights.vtov),
        (terms.vtos, weights.vtos),
        (terms.stov, weights.stov),
    ] {
        if let Some(node) = node {
            let scaled = tape.scale(node, lambda);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

pub fn breakdown_from(tape: &Tape, terms: &LossNodes, total: Option<NodeId>) -> LossBreakdown {
    let read = |n: Option<NodeId>| n.map_or(0.0, |id| tape.scalar(id));
    LossBreakdown {
        vae: read(terms.vae),
        cmfr: read(terms.cmfr),
        cmda: read(terms.cmda),
        vtov: read(terms.vtov),
        vtos: read(terms.vtos),
        stov: read(terms.stov),
        total: read(total),
    }
}

// ── Standalone evaluation over concrete batch values ────────────────

fn batch_to_nodes(tape: &mut Tape, batch: &BatchLatents) -> LatentNodes {
    LatentNodes {
        v: tape.input(batch.v.clone()),
        s: tape.input(batch.s.clone()),
        mu_v: tape.input(batch.visual_posterior.mu.clone()),
        log_var_v: tape.input(batch.visual_posterior.log_var.clone()),
        mu_s: tape.input(batch.semantic_posterior.mu.clone()),
        log_var_s: tape.input(batch.semantic_posterior.log_var.clone()),
        zv: tape.input(batch.zv.clone()),
        zs: tape.input(batch.zs.clone()),
        visual_recon: tape.input(batch.visual_recon.clone()),
        semantic_recon: tape.input(batch.semantic_recon.clone()),
        cross_visual_recon: tape.input(batch.cross_visual_recon.clone()),
        cross_semantic_recon: tape.input(batch.cross_semantic_recon.clone()),
    }
}

fn eval_single(
    batch: &BatchLatents,
    select: TermSelection,
    tau: f64,
    opts: &LossOptions,
) -> Result<f64> {
    batch.validate()?;
    let mut tape = Tape::new();
    let nodes = batch_to_nodes(&mut tape, batch);
    let terms = attach_terms(&mut tape, &nodes, &batch.labels, &batch.class_ids, &select, tau, opts)?;
    let node = [terms.vae, terms.cmfr, terms.cmda, terms.vtov, terms.vtos, terms.stov]
        .into_iter()
        .flatten()
        .next()
        .expect("exactly one term selected");
    Ok(tape.scalar(node))
}

/// Reconstruction L1 plus KL-to-standard-normal for both modalities.
pub fn vae_loss(batch: &BatchLatents, opts: &LossOptions) -> Result<f64> {
    eval_single(batch, TermSelection { vae: true, ..Default::default() }, 1.0, opts)
}

/// Cross-modal feature reconstruction (decode each modality from the
/// other's latent and compare by L1).
pub fn cmfr_loss(batch: &BatchLatents, opts: &LossOptions) -> Result<f64> {
    eval_single(batch, TermSelection { cmfr: true, ..Default::default() }, 1.0, opts)
}

/// Cross-modal distribution alignment: per instance, the root of the summed
/// squared differences of posterior means and standard deviations.
pub fn cmda_loss(batch: &BatchLatents, opts: &LossOptions) -> Result<f64> {
    eval_single(batch, TermSelection { cmda: true, ..Default::default() }, 1.0, opts)
}

/// Visual-to-visual supervised contrastive loss.
pub fn vtov_loss(batch: &BatchLatents, tau: f64, opts: &LossOptions) -> Result<f64> {
    eval_single(batch, TermSelection { vtov: true, ..Default::default() }, tau, opts)
}

/// Visual-to-semantic contrastive loss (anchors are instances, the
/// denominator runs over the batch's descriptors).
pub fn vtos_loss(batch: &BatchLatents, tau: f64, opts: &LossOptions) -> Result<f64> {
    eval_single(batch, TermSelection { vtos: true, ..Default::default() }, tau, opts)
}

/// Semantic-to-visual contrastive loss (anchors are descriptors, the
/// denominator runs over all visual instances).
pub fn stov_loss(batch: &BatchLatents, tau: f64, opts: &LossOptions) -> Result<f64> {
    eval_single(batch, TermSelection { stov: true, ..Default::default() }, tau, opts)
}

/// Weighted total with the per-term breakdown. Terms with zero weight are
/// skipped entirely, including their preconditions.
pub fn total_loss(
    batch: &BatchLatents,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    batch.validate()?;
    weights.validate()?;
    let mut tape = Tape::new();
    let nodes = batch_to_nodes(&mut tape, batch);
    let select = TermSelection::from_weights(weights);
    let terms = attach_terms(
        &mut tape,
        &nodes,
        &batch.labels,
        &batch.class_ids,
        &select,
        weights.tau,
        opts,
    )?;
    let total = weighted_total(&mut tape, &terms, weights)?;
    Ok(breakdown_from(&tape, &terms, Some(total)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SUM: LossOptions = LossOptions { sum_reduction: true, contrastive_on_mu: false };

    /// A batch with perfect reconstructions and standard-normal posteriors.
    fn neutral_batch(labels: Vec<usize>, m: usize, gamma: usize) -> BatchLatents {
        let n = labels.len();
        let v = Tensor2D::filled(n, 3, 0.5);
        let s = Tensor2D::filled(m, 2, -0.25);
        let class_ids: Vec<usize> = (0..m).collect();
        let cross_semantic = {
            let mut t = Tensor2D::zeros(n, 2);
            for i in 0..n {
                t.row_mut(i).copy_from_slice(s.row(labels[i]));
            }
            t
        };
        BatchLatents {
            visual_recon: v.clone(),
            semantic_recon: s.clone(),
            cross_visual_recon: Tensor2D::filled(m, 3, 0.5),
            cross_semantic_recon: cross_semantic,
            visual_posterior: LatentGaussian {
                mu: Tensor2D::zeros(n, gamma),
                log_var: Tensor2D::zeros(n, gamma),
            },
            semantic_posterior: LatentGaussian {
                mu: Tensor2D::zeros(m, gamma),
                log_var: Tensor2D::zeros(m, gamma),
            },
            zv: Tensor2D::filled(n, gamma, 0.3),
            zs: Tensor2D::filled(m, gamma, 0.3),
            v,
            s,
            labels,
            class_ids,
        }
    }

    #[test]
    fn vae_zero_at_standard_normal_perfect_reconstruction() {
        let batch = neutral_batch(vec![0, 0], 1, 2);
        assert_eq!(vae_loss(&batch, &SUM).unwrap(), 0.0);
    }

    #[test]
    fn vae_kl_closed_form_unit_mean() {
        // One instance, scalar latent, mu = 1, log_var = 0: KL = 0.5.
        let mut batch = neutral_batch(vec![0], 1, 1);
        batch.visual_posterior.mu = Tensor2D::filled(1, 1, 1.0);
        let v = vae_loss(&batch, &SUM).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn vae_increases_with_reconstruction_error() {
        let batch = neutral_batch(vec![0, 0], 1, 2);
        let base = vae_loss(&batch, &SUM).unwrap();
        let mut worse = batch.clone();
        worse.visual_recon = worse.visual_recon.map(|x| x + 1.0);
        let w1 = vae_loss(&worse, &SUM).unwrap();
        let mut worst = batch.clone();
        worst.visual_recon = worst.visual_recon.map(|x| x + 2.0);
        let w2 = vae_loss(&worst, &SUM).unwrap();
        assert!(base < w1 && w1 < w2);
    }

    #[test]
    fn cmfr_zero_when_cross_reconstructions_match() {
        let batch = neutral_batch(vec![0, 1, 1], 2, 2);
        assert_eq!(cmfr_loss(&batch, &SUM).unwrap(), 0.0);
    }

    #[test]
    fn cmfr_single_instance_arithmetic() {
        // v = (1, 0), cross visual recon = (0, 0), semantic side perfect: 1.0.
        let mut batch = neutral_batch(vec![0], 1, 2);
        batch.v = Tensor2D::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        batch.visual_recon = batch.v.clone();
        batch.cross_visual_recon = Tensor2D::zeros(1, 3);
        let got = cmfr_loss(&batch, &SUM).unwrap();
        assert!((got - 1.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn cmda_zero_for_identical_posteriors_and_euclidean_case() {
        let batch = neutral_batch(vec![0], 1, 2);
        assert_eq!(cmda_loss(&batch, &SUM).unwrap(), 0.0);

        let mut shifted = batch.clone();
        shifted.visual_posterior.mu = Tensor2D::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let got = cmda_loss(&shifted, &SUM).unwrap();
        assert!((got - 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn vtov_identical_pair_is_zero() {
        let mut batch = neutral_batch(vec![0, 0], 1, 2);
        batch.zv = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let got = vtov_loss(&batch, 1.0, &SUM).unwrap();
        assert!(got.abs() < 1e-12, "{got}");
    }

    #[test]
    fn vtov_two_class_fixture() {
        let mut batch = neutral_batch(vec![0, 0, 1, 1], 2, 2);
        batch.zv = Tensor2D::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let got = vtov_loss(&batch, 1.0, &SUM).unwrap();
        let expect = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((got - 2.2058).abs() < 1e-4);
    }

    #[test]
    fn vtov_rejects_singleton_class() {
        let mut batch = neutral_batch(vec![0, 0, 1], 2, 2);
        batch.class_ids = vec![4, 9];
        batch.zv = Tensor2D::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let err = vtov_loss(&batch, 1.0, &SUM).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(err.to_string().contains('9'), "{err}");
    }

    #[test]
    fn vtos_single_class_is_zero() {
        let batch = neutral_batch(vec![0, 0], 1, 2);
        let got = vtos_loss(&batch, 1.0, &SUM).unwrap();
        assert!(got.abs() < 1e-12, "{got}");
    }

    #[test]
    fn vtos_two_class_fixture() {
        let mut batch = neutral_batch(vec![0, 1], 2, 2);
        batch.zv = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        batch.zs = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let got = vtos_loss(&batch, 1.0, &SUM).unwrap();
        let expect = 2.0 * (1.0 + 1.0 / std::f64::consts::E).ln();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((got - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn vtos_decreases_when_positive_similarity_grows() {
        let mut batch = neutral_batch(vec![0, 1], 2, 2);
        batch.zv = Tensor2D::from_rows(&[vec![0.8, 0.6], vec![0.0, 1.0]]).unwrap();
        batch.zs = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let before = vtos_loss(&batch, 1.0, &SUM).unwrap();
        batch.zv = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let after = vtos_loss(&batch, 1.0, &SUM).unwrap();
        assert!(after < before);
    }

    #[test]
    fn stov_single_pair_is_zero() {
        let mut batch = neutral_batch(vec![0], 1, 2);
        batch.zv = Tensor2D::from_rows(&[vec![1.0, 0.0]]).unwrap();
        batch.zs = Tensor2D::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let got = stov_loss(&batch, 1.0, &SUM).unwrap();
        assert!(got.abs() < 1e-12, "{got}");
    }

    #[test]
    fn stov_two_class_fixture() {
        let mut batch = neutral_batch(vec![0, 0, 1, 1], 2, 2);
        batch.zv = Tensor2D::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        batch.zs = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let got = stov_loss(&batch, 1.0, &SUM).unwrap();
        let e = std::f64::consts::E;
        let expect = 2.0 * ((2.0 * e + 2.0) / e).ln();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((got - 2.0128).abs() < 1e-4);
    }

    #[test]
    fn stov_invariant_to_visual_row_order() {
        let mut batch = neutral_batch(vec![0, 0, 1, 1], 2, 3);
        batch.zv = Tensor2D::from_rows(&[
            vec![0.9, 0.1, 0.2],
            vec![0.7, -0.3, 0.4],
            vec![-0.2, 1.1, 0.5],
            vec![0.1, 0.8, -0.6],
        ])
        .unwrap();
        batch.zs = Tensor2D::from_rows(&[vec![1.0, 0.0, 0.1], vec![0.0, 1.0, -0.2]]).unwrap();
        let a = stov_loss(&batch, 1.7, &SUM).unwrap();

        let mut permuted = batch.clone();
        permuted.labels = vec![1, 0, 0, 1];
        permuted.zv = Tensor2D::from_rows(&[
            vec![-0.2, 1.1, 0.5],
            vec![0.9, 0.1, 0.2],
            vec![0.7, -0.3, 0.4],
            vec![0.1, 0.8, -0.6],
        ])
        .unwrap();
        let b = stov_loss(&permuted, 1.7, &SUM).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_with_zero_weights_is_vae_alone() {
        let mut batch = neutral_batch(vec![0, 0, 1, 1], 2, 2);
        batch.visual_posterior.mu = Tensor2D::filled(4, 2, 0.4);
        let weights = LossWeights { cmfr: 0.0, cmda: 0.0, vtov: 0.0, vtos: 0.0, stov: 0.0, tau: 2.0 };
        let breakdown = total_loss(&batch, &weights, &LossOptions::default()).unwrap();
        let vae = vae_loss(&batch, &LossOptions::default()).unwrap();
        assert_eq!(breakdown.total, vae);
        assert_eq!(breakdown.cmfr, 0.0);
    }

    #[test]
    fn zero_weight_skips_preconditions() {
        // Singleton class would break vtov, but vtov is disabled.
        let mut batch = neutral_batch(vec![0, 0, 1], 2, 2);
        batch.zv = Tensor2D::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let weights = LossWeights { cmfr: 1.0, cmda: 1.0, vtov: 0.0, vtos: 1.0, stov: 1.0, tau: 2.0 };
        assert!(total_loss(&batch, &weights, &LossOptions::default()).is_ok());
    }

    #[test]
    fn preset_values() {
        let z = LossWeights::zsl();
        assert_eq!((z.cmfr, z.cmda, z.vtov, z.vtos, z.stov), (10.0, 1.0, 100.0, 100.0, 10.0));
        assert_eq!(z.tau, 2.0);
        let g = LossWeights::gzsl();
        assert_eq!((g.cmfr, g.cmda, g.vtov, g.vtos, g.stov), (1.0, 1.0, 0.1, 1.0, 1.0));
    }

    #[test]
    fn missing_descriptor_is_a_data_error() {
        let mut batch = neutral_batch(vec![0, 1], 2, 2);
        batch.labels = vec![0, 2];
        assert!(matches!(
            cmfr_loss(&batch, &SUM),
            Err(Error::Data(_))
        ));
    }
}
