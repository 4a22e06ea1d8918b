//! The two modality VAEs: visual and semantic encoder/decoder pairs with a
//! shared latent space.
//!
//! Every encoder and decoder is a single-hidden-layer MLP (affine, relu,
//! affine). Encoders emit `2 * latent_dim` values split into a mean and a
//! clamped log-variance; decoders emit unbounded linear reconstructions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::{self, Tensor2D};
use crate::numerics::{Rng, LOG_VAR_CLAMP};

/// Layer widths for both VAEs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub hidden_visual: usize,
    pub hidden_semantic: usize,
    pub latent_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            visual_dim: 512,
            semantic_dim: 1024,
            hidden_visual: 512,
            hidden_semantic: 256,
            latent_dim: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("hidden_visual", self.hidden_visual),
            ("hidden_semantic", self.hidden_semantic),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Per-input diagonal Gaussian posterior in latent space.
#[derive(Clone, Debug)]
pub struct LatentGaussian {
    pub mu: Tensor2D,
    pub log_var: Tensor2D,
}

impl LatentGaussian {
    /// Standard deviation, `exp(log_var / 2)`.
    pub fn std(&self) -> Tensor2D {
        self.log_var.map(|v| (v / 2.0).exp())
    }
}

/// One-hidden-layer MLP: `affine -> relu -> affine`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Tensor2D,
    pub b1: Tensor2D,
    pub w2: Tensor2D,
    pub b2: Tensor2D,
}

impl Mlp {
    fn init(rng: &mut Rng, d_in: usize, hidden: usize, d_out: usize) -> Mlp {
        Mlp {
            w1: xavier(rng, d_in, hidden),
            b1: Tensor2D::zeros(1, hidden),
            w2: xavier(rng, hidden, d_out),
            b2: Tensor2D::zeros(1, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let h = tensor::relu(&tensor::affine(x, &self.w1, &self.b1)?);
        tensor::affine(&h, &self.w2, &self.b2)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Uniform Glorot initialization: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2D {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor2D::zeros(rows, cols);
    for v in t.data_mut() {
        *v = bound * (2.0 * rng.uniform() - 1.0);
    }
    t
}

/// The visual and semantic VAEs.
#[derive(Clone, Debug)]
pub struct VaePair {
    pub dims: ModelDims,
    pub visual_encoder: Mlp,
    pub visual_decoder: Mlp,
    pub semantic_encoder: Mlp,
    pub semantic_decoder: Mlp,
}

/// Deterministically initializes both VAEs from the given stream.
pub fn init_params(rng: &mut Rng, dims: &ModelDims) -> Result<VaePair> {
    dims.validate()?;
    let g = dims.latent_dim;
    Ok(VaePair {
        visual_encoder: Mlp::init(rng, dims.visual_dim, dims.hidden_visual, 2 * g),
        visual_decoder: Mlp::init(rng, g, dims.hidden_visual, dims.visual_dim),
        semantic_encoder: Mlp::init(rng, dims.semantic_dim, dims.hidden_semantic, 2 * g),
        semantic_decoder: Mlp::init(rng, g, dims.hidden_semantic, dims.semantic_dim),
        dims: dims.clone(),
    })
}

impl VaePair {
    pub fn encode_visual(&self, v: &Tensor2D) -> Result<LatentGaussian> {
        if v.cols() != self.dims.visual_dim {
            return Err(Error::Dimension(format!(
                "visual features are {} wide, model expects {}",
                v.cols(),
                self.dims.visual_dim
            )));
        }
        split_posterior(self.visual_encoder.forward(v)?, self.dims.latent_dim)
    }

    pub fn encode_semantic(&self, s: &Tensor2D) -> Result<LatentGaussian> {
        if s.cols() != self.dims.semantic_dim {
            return Err(Error::Dimension(format!(
                "semantic features are {} wide, model expects {}",
                s.cols(),
                self.dims.semantic_dim
            )));
        }
        split_posterior(self.semantic_encoder.forward(s)?, self.dims.latent_dim)
    }

    pub fn decode_visual(&self, z: &Tensor2D) -> Result<Tensor2D> {
        self.check_latent(z)?;
        self.visual_decoder.forward(z)
    }

    pub fn decode_semantic(&self, z: &Tensor2D) -> Result<Tensor2D> {
        self.check_latent(z)?;
        self.semantic_decoder.forward(z)
    }

    fn check_latent(&self, z: &Tensor2D) -> Result<()> {
        if z.cols() != self.dims.latent_dim {
            return Err(Error::Dimension(format!(
                "latent codes are {} wide, model expects {}",
                z.cols(),
                self.dims.latent_dim
            )));
        }
        Ok(())
    }

    /// Draws one reparameterized sample `mu + std * eps` for each row.
    pub fn sample_latent(&self, posterior: &LatentGaussian, rng: &mut Rng) -> Tensor2D {
        let (r, c) = posterior.mu.shape();
        let eps = rng.normal_tensor(r, c);
        gaussian_reparam(&posterior.mu, &posterior.log_var, &eps)
    }

    pub fn param_count(&self) -> usize {
        self.visual_encoder.param_count()
            + self.visual_decoder.param_count()
            + self.semantic_encoder.param_count()
            + self.semantic_decoder.param_count()
    }

    /// Parameter tensors in checkpoint order.
    pub fn params(&self) -> Vec<&Tensor2D> {
        let mut out = Vec::with_capacity(16);
        for mlp in [
            &self.visual_encoder,
            &self.visual_decoder,
            &self.semantic_encoder,
            &self.semantic_decoder,
        ] {
            out.extend([&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2D> {
        let VaePair {
            visual_encoder: ve,
            visual_decoder: vd,
            semantic_encoder: se,
            semantic_decoder: sd,
            ..
        } = self;
        vec![
            &mut ve.w1, &mut ve.b1, &mut ve.w2, &mut ve.b2,
            &mut vd.w1, &mut vd.b1, &mut vd.w2, &mut vd.b2,
            &mut se.w1, &mut se.b1, &mut se.w2, &mut se.b2,
            &mut sd.w1, &mut sd.b1, &mut sd.w2, &mut sd.b2,
        ]
    }

    fn param_names() -> [&'static str; 16] {
        [
            "visual_encoder.w1", "visual_encoder.b1", "visual_encoder.w2", "visual_encoder.b2",
            "visual_decoder.w1", "visual_decoder.b1", "visual_decoder.w2", "visual_decoder.b2",
            "semantic_encoder.w1", "semantic_encoder.b1", "semantic_encoder.w2", "semantic_encoder.b2",
            "semantic_decoder.w1", "semantic_decoder.b1", "semantic_decoder.w2", "semantic_decoder.b2",
        ]
    }
}

fn split_posterior(out: Tensor2D, latent_dim: usize) -> Result<LatentGaussian> {
    let mu = out.slice_cols(0, latent_dim)?;
    let raw = out.slice_cols(latent_dim, latent_dim)?;
    let log_var = tensor::clamp(&raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
    Ok(LatentGaussian { mu, log_var })
}

/// `z = mu + exp(log_var / 2) * eps` with `eps` treated as a constant.
pub fn gaussian_reparam(mu: &Tensor2D, log_var: &Tensor2D, eps: &Tensor2D) -> Tensor2D {
    let mut out = mu.clone();
    for ((o, lv), e) in out
        .data_mut()
        .iter_mut()
        .zip(log_var.data())
        .zip(eps.data())
    {
        *o += (lv / 2.0).exp() * e;
    }
    out
}

// ── Tape-mode forward passes (training path) ────────────────────────

/// Node ids of one MLP's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Node ids of all sixteen parameter tensors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VaeNodes {
    pub visual_encoder: MlpNodes,
    pub visual_decoder: MlpNodes,
    pub semantic_encoder: MlpNodes,
    pub semantic_decoder: MlpNodes,
}

impl VaeNodes {
    /// Node ids in the same order as [`VaePair::params`].
    pub fn ordered(&self) -> [NodeId; 16] {
        let m = |n: &MlpNodes| [n.w1, n.b1, n.w2, n.b2];
        let mut out = [0; 16];
        out[0..4].copy_from_slice(&m(&self.visual_encoder));
        out[4..8].copy_from_slice(&m(&self.visual_decoder));
        out[8..12].copy_from_slice(&m(&self.semantic_encoder));
        out[12..16].copy_from_slice(&m(&self.semantic_decoder));
        out
    }
}

/// Registers every parameter tensor on the tape.
pub fn register_params(tape: &mut Tape, model: &VaePair) -> VaeNodes {
    let mut reg = |mlp: &Mlp| MlpNodes {
        w1: tape.input(mlp.w1.clone()),
        b1: tape.input(mlp.b1.clone()),
        w2: tape.input(mlp.w2.clone()),
        b2: tape.input(mlp.b2.clone()),
    };
    VaeNodes {
        visual_encoder: reg(&model.visual_encoder),
        visual_decoder: reg(&model.visual_decoder),
        semantic_encoder: reg(&model.semantic_encoder),
        semantic_decoder: reg(&model.semantic_decoder),
    }
}

pub fn mlp_forward_on(tape: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let pre = tape.affine(x, nodes.w1, nodes.b1)?;
    let h = tape.relu(pre);
    tape.affine(h, nodes.w2, nodes.b2)
}

/// Encoder forward on the tape; returns `(mu, log_var)` node ids.
pub fn encode_on(
    tape: &mut Tape,
    encoder: &MlpNodes,
    x: NodeId,
    latent_dim: usize,
) -> Result<(NodeId, NodeId)> {
    let out = mlp_forward_on(tape, encoder, x)?;
    let mu = tape.slice_cols(out, 0, latent_dim)?;
    let raw = tape.slice_cols(out, latent_dim, latent_dim)?;
    let log_var = tape.clamp(raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
    Ok((mu, log_var))
}

/// Reparameterized sample on the tape: `mu + exp(log_var / 2) * eps`.
pub fn reparam_on(tape: &mut Tape, mu: NodeId, log_var: NodeId, eps: Tensor2D) -> Result<NodeId> {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let eps = tape.input(eps);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

// ── Checkpoint I/O ──────────────────────────────────────────────────

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    rows: usize,
    cols: usize,
    /// Big-endian hex of each f64's bit pattern; bit-exact round trips.
    data: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    dims: ModelDims,
    tensors: BTreeMap<String, TensorDoc>,
}

fn tensor_to_doc(t: &Tensor2D) -> TensorDoc {
    TensorDoc {
        rows: t.rows(),
        cols: t.cols(),
        data: t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
    }
}

fn tensor_from_doc(name: &str, doc: &TensorDoc) -> Result<Tensor2D> {
    let mut data = Vec::with_capacity(doc.data.len());
    for s in &doc.data {
        let bits = u64::from_str_radix(s, 16)
            .map_err(|e| Error::Data(format!("checkpoint tensor {name}: bad hex value: {e}")))?;
        data.push(f64::from_bits(bits));
    }
    Tensor2D::from_vec(doc.rows, doc.cols, data)
}

impl VaePair {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = BTreeMap::new();
        for (name, t) in Self::param_names().iter().zip(self.params()) {
            tensors.insert((*name).to_string(), tensor_to_doc(t));
        }
        let doc = CheckpointDoc {
            format_version: CHECKPOINT_VERSION,
            dims: self.dims.clone(),
            tensors,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<VaePair> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                doc.format_version
            )));
        }
        doc.dims.validate()?;
        let mut model = init_params(&mut Rng::new(0), &doc.dims)?;
        {
            let names = Self::param_names();
            let mut slots = model.params_mut();
            for (name, slot) in names.iter().zip(slots.iter_mut()) {
                let tdoc = doc
                    .tensors
                    .get(*name)
                    .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
                let t = tensor_from_doc(name, tdoc)?;
                if t.shape() != slot.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint tensor {name} has shape {:?}, dims imply {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                **slot = t;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VaePair> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            visual_dim: 6,
            semantic_dim: 4,
            hidden_visual: 5,
            hidden_semantic: 3,
            latent_dim: 2,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let dims = small_dims();
        let a = init_params(&mut Rng::new(11), &dims).unwrap();
        let b = init_params(&mut Rng::new(11), &dims).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn encoder_output_width_is_twice_latent() {
        let model = init_params(&mut Rng::new(1), &ModelDims::default()).unwrap();
        assert_eq!(model.visual_encoder.w2.cols(), 128);
    }

    #[test]
    fn xavier_bound_holds() {
        let model = init_params(&mut Rng::new(5), &ModelDims::default()).unwrap();
        let bound = (6.0f64 / 1024.0).sqrt() + 1e-12;
        assert!(model
            .visual_encoder
            .w1
            .data()
            .iter()
            .all(|v| v.abs() < bound));
    }

    #[test]
    fn rejects_zero_dimension() {
        let mut dims = small_dims();
        dims.latent_dim = 0;
        assert!(matches!(
            init_params(&mut Rng::new(0), &dims),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_final_layer_gives_zero_posterior() {
        let mut model = init_params(&mut Rng::new(3), &small_dims()).unwrap();
        model.visual_encoder.w2 = Tensor2D::zeros(5, 4);
        model.visual_encoder.b2 = Tensor2D::zeros(1, 4);
        let v = Tensor2D::filled(3, 6, 0.7);
        let post = model.encode_visual(&v).unwrap();
        assert!(post.mu.data().iter().all(|&x| x == 0.0));
        assert!(post.log_var.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_inputs_give_identical_posteriors() {
        let model = init_params(&mut Rng::new(3), &small_dims()).unwrap();
        let row = vec![0.3, -0.2, 0.9, 1.4, -1.1, 0.05];
        let v = Tensor2D::from_rows(&[row.clone(), row]).unwrap();
        let post = model.encode_visual(&v).unwrap();
        assert_eq!(post.mu.row(0), post.mu.row(1));
        assert_eq!(post.log_var.row(0), post.log_var.row(1));
    }

    #[test]
    fn shape_contracts_at_defaults() {
        let model = init_params(&mut Rng::new(9), &ModelDims::default()).unwrap();
        let v = Tensor2D::zeros(25, 512);
        let post = model.encode_visual(&v).unwrap();
        assert_eq!(post.mu.shape(), (25, 64));
        assert_eq!(post.log_var.shape(), (25, 64));
        let recon = model.decode_visual(&post.mu).unwrap();
        assert_eq!(recon.shape(), (25, 512));
        let s = Tensor2D::zeros(5, 1024);
        let spost = model.encode_semantic(&s).unwrap();
        assert_eq!(spost.mu.shape(), (5, 64));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let model = init_params(&mut Rng::new(9), &small_dims()).unwrap();
        assert!(matches!(
            model.encode_visual(&Tensor2D::zeros(2, 7)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            model.decode_visual(&Tensor2D::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn default_parameter_count_regression() {
        let model = init_params(&mut Rng::new(2), &ModelDims::default()).unwrap();
        assert_eq!(model.param_count(), 1_199_360);
    }

    #[test]
    fn reparam_zero_variance_limit() {
        let mu = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        // Extreme raw value; the encoder clamp floors log_var at -10.
        let log_var = Tensor2D::filled(1, 2, LOG_VAR_CLAMP.0);
        let eps = Tensor2D::from_rows(&[vec![1.3, -0.4]]).unwrap();
        let z = gaussian_reparam(&mu, &log_var, &eps);
        assert!((z.get(0, 0) - 1.0).abs() < 0.05);
        assert!((z.get(0, 1) - 2.0).abs() < 0.05);
    }

    #[test]
    fn reparam_determinism() {
        let model = init_params(&mut Rng::new(4), &small_dims()).unwrap();
        let post = LatentGaussian {
            mu: Tensor2D::zeros(3, 2),
            log_var: Tensor2D::zeros(3, 2),
        };
        let a = model.sample_latent(&post, &mut Rng::new(77));
        let b = model.sample_latent(&post, &mut Rng::new(77));
        assert_eq!(a, b);
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        // 1e5 standard-normal samples per coordinate: mean within 0.02.
        let mut rng = Rng::new(31);
        let n = 100_000;
        let mu = Tensor2D::zeros(n, 2);
        let log_var = Tensor2D::zeros(n, 2);
        let eps = rng.normal_tensor(n, 2);
        let z = gaussian_reparam(&mu, &log_var, &eps);
        for j in 0..2 {
            let mean: f64 = (0..n).map(|i| z.get(i, j)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "coordinate {j} mean {mean}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = init_params(&mut Rng::new(8), &small_dims()).unwrap();
        let text = model.to_json().unwrap();
        let back = VaePair::from_json(&text).unwrap();
        assert_eq!(back.dims, model.dims);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.data().len(), b.data().len());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn concurrent_readonly_encoding_is_safe() {
        let model = std::sync::Arc::new(init_params(&mut Rng::new(6), &small_dims()).unwrap());
        let v = Tensor2D::filled(4, 6, 0.25);
        let baseline = model.encode_visual(&v).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let m = model.clone();
                let input = v.clone();
                std::thread::spawn(move || m.encode_visual(&input).unwrap().mu)
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), baseline.mu);
        }
    }
}
