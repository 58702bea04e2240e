//! The task network and its SVAE side branch.
//!
//! An encoder stack maps inputs to features; the task head maps features
//! to logits. The optional branch re-encodes (gradient-blocked) features
//! into a Gaussian posterior, samples a latent via the reparameterization
//! trick, and decodes it into reconstructed features plus an auxiliary
//! label prediction from its own head. Branch parameters are disjoint
//! from the main set, so each loss can update only its own side.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::datagen::TaskKind;
use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

/// Architecture sizes; every dimension must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    /// Raw input width F (channel count for segmentation).
    pub input_dim: usize,
    /// Hidden widths of the encoder stack.
    pub hidden_dims: Vec<usize>,
    /// Representation width D.
    pub feature_dim: usize,
    /// Latent width J of the variational branch.
    pub latent_dim: usize,
    /// Class count C.
    pub num_classes: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        let all = self
            .hidden_dims
            .iter()
            .chain([
                &self.input_dim,
                &self.feature_dim,
                &self.latent_dim,
                &self.num_classes,
            ])
            .all(|&d| d > 0);
        if all {
            Ok(())
        } else {
            Err(TensorError::InvalidShape {
                op: "ModelDims",
                shape: vec![],
                reason: format!("all dimensions must be positive: {self:?}"),
            })
        }
    }
}

/// One fully-connected layer: `weight` is `[in, out]`, `bias` is `[out]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// He-style init: weights uniform on `+-sqrt(6 / fan_in)` (variance
    /// `2 / fan_in`), biases zero.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Affine {
            weight: Tensor::param(weight, vec![fan_in, fan_out]).expect("sized by construction"),
            bias: Tensor::param(vec![0.0; fan_out], vec![fan_out]).expect("sized by construction"),
        }
    }

    /// `x @ weight + bias` for `x` of shape `[n, in]`.
    fn forward(&self, tape: &mut Tape, x: NodeId, binds: &mut Vec<NodeId>) -> Result<NodeId> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        binds.push(w);
        binds.push(b);
        let xw = tape.matmul(x, w)?;
        let shape = tape.shape(xw).to_vec();
        let wide = tape.broadcast(b, &shape)?;
        tape.add(xw, wide)
    }

    fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Variational branch: posterior heads, feature decoder, auxiliary task
/// head. All parameters disjoint from the main network.
#[derive(Debug, Clone)]
pub struct SvaeBranch {
    pub mu_head: Affine,
    pub logvar_head: Affine,
    pub decoder: Affine,
    pub psi_svae: Affine,
}

/// Task network with optional SVAE branch.
#[derive(Debug, Clone)]
pub struct SvaeModel {
    pub task: TaskKind,
    pub dims: ModelDims,
    pub phi: Vec<Affine>,
    pub psi: Affine,
    pub branch: Option<SvaeBranch>,
}

/// Node handles produced by one main forward pass.
pub struct MainForward {
    /// Features flattened to `[rows, D]` (`rows = B` or `B*P`).
    pub features: NodeId,
    /// Logits: `[B, C]` for multilabel, `[B, P, C]` for segmentation.
    pub logits: NodeId,
    /// Leaf ids in `main_params()` order, for gradient write-back.
    pub param_nodes: Vec<NodeId>,
    pub batch: usize,
    pub pixels: usize,
}

/// Node handles produced by one branch forward pass.
pub struct SvaeForward {
    /// Stop-gradient copy of the features the branch consumed; also the
    /// reconstruction target.
    pub features_detached: NodeId,
    /// Posterior mean, `[B, J]` or `[B, P, J]`.
    pub mu: NodeId,
    /// Posterior log-variance, same shape as `mu`.
    pub logvar: NodeId,
    /// Reparameterized latent sample.
    pub z: NodeId,
    /// Reconstructed features, `[B, D]` or `[B, P, D]`.
    pub reconstructed: NodeId,
    /// Auxiliary logits, `[B, C]` or `[B, P, C]`.
    pub logits: NodeId,
    /// Leaf ids in `svae_params()` order.
    pub param_nodes: Vec<NodeId>,
    /// The noise draw, recorded for reproducibility.
    pub epsilon: Tensor,
}

impl SvaeModel {
    /// Initializes all parameters from `seed`. The main network is drawn
    /// first, so a model with a branch shares its main initialization
    /// bit-for-bit with a branch-free model at the same seed.
    pub fn init(task: TaskKind, dims: ModelDims, with_branch: bool, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = Vec::new();
        let mut prev = dims.input_dim;
        for &h in &dims.hidden_dims {
            phi.push(Affine::init(prev, h, &mut rng));
            prev = h;
        }
        phi.push(Affine::init(prev, dims.feature_dim, &mut rng));
        let psi = Affine::init(dims.feature_dim, dims.num_classes, &mut rng);
        let branch = with_branch.then(|| SvaeBranch {
            mu_head: Affine::init(dims.feature_dim, dims.latent_dim, &mut rng),
            logvar_head: Affine::init(dims.feature_dim, dims.latent_dim, &mut rng),
            decoder: Affine::init(dims.latent_dim, dims.feature_dim, &mut rng),
            psi_svae: Affine::init(dims.latent_dim, dims.num_classes, &mut rng),
        });
        Ok(SvaeModel {
            task,
            dims,
            phi,
            psi,
            branch,
        })
    }

    /// Encoder + task head. Input is `[B, F]` for multilabel or
    /// `[B, P, F]` for segmentation (encoder shared across pixels).
    pub fn forward_main(&self, tape: &mut Tape, input: NodeId) -> Result<MainForward> {
        let in_shape = tape.shape(input).to_vec();
        let (batch, pixels, rows) = match (self.task, in_shape.as_slice()) {
            (TaskKind::Multilabel, [b, f]) if *f == self.dims.input_dim => (*b, 1, *b),
            (TaskKind::Segmentation, [b, p, f]) if *f == self.dims.input_dim => (*b, *p, b * p),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "forward_main",
                    shape: in_shape,
                    reason: format!(
                        "expected trailing width {} for task {}",
                        self.dims.input_dim, self.task
                    ),
                })
            }
        };
        let mut binds = Vec::new();
        let mut h = if pixels > 1 {
            tape.reshape(input, vec![rows, self.dims.input_dim])?
        } else {
            input
        };
        for layer in &self.phi {
            let a = layer.forward(tape, h, &mut binds)?;
            h = tape.relu(a)?;
        }
        let features = h;
        let flat_logits = self.psi.forward(tape, features, &mut binds)?;
        let logits = if pixels > 1 {
            tape.reshape(flat_logits, vec![batch, pixels, self.dims.num_classes])?
        } else {
            flat_logits
        };
        Ok(MainForward {
            features,
            logits,
            param_nodes: binds,
            batch,
            pixels,
        })
    }

    /// Branch forward with a caller-supplied noise draw (shape must match
    /// the posterior mean). Blocks gradients to the encoder by passing
    /// the features through a stop-gradient.
    pub fn forward_svae_with_eps(
        &self,
        tape: &mut Tape,
        main: &MainForward,
        epsilon: &Tensor,
    ) -> Result<SvaeForward> {
        let branch = self.branch.as_ref().ok_or_else(|| {
            TensorError::Domain {
                op: "forward_svae",
                reason: "model has no SVAE branch".into(),
            }
        })?;
        let f_detached = tape.stop_gradient(main.features);
        let mut binds = Vec::new();
        let mu = branch.mu_head.forward(tape, f_detached, &mut binds)?;
        let logvar = branch.logvar_head.forward(tape, f_detached, &mut binds)?;
        // sigma = exp(logvar / 2); overflow here signals divergence and
        // surfaces as a non-finite error from exp.
        let half = tape.scalar_const(0.5);
        let lv_shape = tape.shape(logvar).to_vec();
        let half_wide = tape.broadcast(half, &lv_shape)?;
        let half_logvar = tape.mul(logvar, half_wide)?;
        let sigma = tape.exp(half_logvar)?;
        if epsilon.shape() != lv_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_svae",
                lhs: epsilon.shape().to_vec(),
                rhs: lv_shape,
            });
        }
        let eps = tape.constant(epsilon);
        let noise = tape.mul(sigma, eps)?;
        let z = tape.add(mu, noise)?;
        let reconstructed = branch.decoder.forward(tape, z, &mut binds)?;
        let logits_flat = branch.psi_svae.forward(tape, z, &mut binds)?;

        // Reshape per-pixel results to [B, P, .] so the losses can take
        // pixel means per sample.
        let (mu, logvar, z, reconstructed, logits, features_detached) = if main.pixels > 1 {
            let b = main.batch;
            let p = main.pixels;
            (
                tape.reshape(mu, vec![b, p, self.dims.latent_dim])?,
                tape.reshape(logvar, vec![b, p, self.dims.latent_dim])?,
                tape.reshape(z, vec![b, p, self.dims.latent_dim])?,
                tape.reshape(reconstructed, vec![b, p, self.dims.feature_dim])?,
                tape.reshape(logits_flat, vec![b, p, self.dims.num_classes])?,
                tape.reshape(f_detached, vec![b, p, self.dims.feature_dim])?,
            )
        } else {
            (mu, logvar, z, reconstructed, logits_flat, f_detached)
        };
        Ok(SvaeForward {
            features_detached,
            mu,
            logvar,
            z,
            reconstructed,
            logits,
            param_nodes: binds,
            epsilon: epsilon.clone(),
        })
    }

    /// Branch forward drawing one standard-normal epsilon per latent
    /// coordinate from the run's generator.
    pub fn forward_svae(
        &self,
        tape: &mut Tape,
        main: &MainForward,
        rng: &mut ChaCha8Rng,
    ) -> Result<SvaeForward> {
        let rows = main.batch * main.pixels;
        let eps: Vec<f64> = (0..rows * self.dims.latent_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let eps = Tensor::new(eps, vec![rows, self.dims.latent_dim])?;
        self.forward_svae_with_eps(tape, main, &eps)
    }

    pub fn main_params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.phi {
            out.extend(layer.params());
        }
        out.extend(self.psi.params());
        out
    }

    pub fn main_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.phi {
            out.extend(layer.params_mut());
        }
        out.extend(self.psi.params_mut());
        out
    }

    pub fn svae_params(&self) -> Vec<&Tensor> {
        match &self.branch {
            None => Vec::new(),
            Some(b) => {
                let mut out = Vec::new();
                out.extend(b.mu_head.params());
                out.extend(b.logvar_head.params());
                out.extend(b.decoder.params());
                out.extend(b.psi_svae.params());
                out
            }
        }
    }

    pub fn svae_params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.branch {
            None => Vec::new(),
            Some(b) => {
                let mut out: Vec<&mut Tensor> = Vec::new();
                out.extend(b.mu_head.params_mut());
                out.extend(b.logvar_head.params_mut());
                out.extend(b.decoder.params_mut());
                out.extend(b.psi_svae.params_mut());
                out
            }
        }
    }

    /// Copies gradients off the tape into the parameter buffers, in the
    /// same order the forward pass bound them.
    pub fn accumulate_grads(
        tape: &Tape,
        param_nodes: &[NodeId],
        params: Vec<&mut Tensor>,
    ) -> Result<()> {
        debug_assert_eq!(param_nodes.len(), params.len());
        for (node, param) in param_nodes.iter().zip(params) {
            param.accumulate_grad(tape.grad(*node)?)?;
        }
        Ok(())
    }

    /// Name/tensor pairs in deterministic order, for checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.phi.iter().enumerate() {
            out.push((format!("phi.{i}.weight"), &layer.weight));
            out.push((format!("phi.{i}.bias"), &layer.bias));
        }
        out.push(("psi.weight".into(), &self.psi.weight));
        out.push(("psi.bias".into(), &self.psi.bias));
        if let Some(b) = &self.branch {
            for (name, layer) in [
                ("svae.mu", &b.mu_head),
                ("svae.logvar", &b.logvar_head),
                ("svae.decoder", &b.decoder),
                ("svae.psi", &b.psi_svae),
            ] {
                out.push((format!("{name}.weight"), &layer.weight));
                out.push((format!("{name}.bias"), &layer.bias));
            }
        }
        out
    }

    /// In-memory parameter snapshot (values only).
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Restores parameter values from a snapshot or loaded checkpoint.
    pub fn restore(&mut self, saved: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in saved {
            let target = self.named_param_mut(name).ok_or_else(|| {
                TensorError::NoGrad(format!("checkpoint names unknown parameter {name}"))
            })?;
            if target.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "restore",
                    lhs: target.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            target.data_mut().copy_from_slice(tensor.data());
        }
        Ok(())
    }

    fn named_param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let names: Vec<String> = self.named_params().iter().map(|(n, _)| n.clone()).collect();
        let idx = names.iter().position(|n| n == name)?;
        let main_len = self.phi.len() * 2 + 2;
        if idx < main_len {
            self.main_params_mut().into_iter().nth(idx)
        } else {
            self.svae_params_mut().into_iter().nth(idx - main_len)
        }
    }
}

// ── Checkpoint files ─────────────────────────────────────────────────
//
// `<base>.manifest` lists `name dim0 dim1 ...` per tensor in order;
// `<base>.bin` is the concatenated raw little-endian f64 data.

pub fn save_checkpoint(base: &Path, named: &[(String, &Tensor)]) -> std::io::Result<()> {
    let mut manifest = String::from("format svae-reweight-checkpoint v1\n");
    let mut bin = Vec::new();
    for (name, tensor) in named {
        manifest.push_str(name);
        for d in tensor.shape() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push('\n');
        for v in tensor.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(base.with_extension("manifest"), manifest)?;
    fs::write(base.with_extension("bin"), bin)
}

pub fn load_checkpoint(base: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = fs::read_to_string(base.with_extension("manifest"))
        .map_err(|e| TensorError::NoGrad(format!("checkpoint manifest: {e}")))?;
    let mut file = fs::File::open(base.with_extension("bin"))
        .map_err(|e| TensorError::NoGrad(format!("checkpoint data: {e}")))?;
    let mut bin = Vec::new();
    file.read_to_end(&mut bin)
        .map_err(|e| TensorError::NoGrad(format!("checkpoint data: {e}")))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in manifest.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap().to_string();
        let shape: Vec<usize> = parts
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|e| TensorError::NoGrad(format!("checkpoint manifest: {e}")))
            })
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        if bin.len() < (offset + numel) * 8 {
            return Err(TensorError::NoGrad("checkpoint data truncated".into()));
        }
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                f64::from_le_bytes(
                    bin[(offset + i) * 8..(offset + i + 1) * 8]
                        .try_into()
                        .unwrap(),
                )
            })
            .collect();
        offset += numel;
        out.push((name, Tensor::new(data, shape)?));
    }
    if offset * 8 != bin.len() {
        return Err(TensorError::NoGrad(
            "checkpoint data longer than manifest".into(),
        ));
    }
    Ok(out)
}
