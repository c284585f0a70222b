//! The multi-task twin network.
//!
//! ```text
//!   x_i ──► backbone ──► h_i ──► cls head ──► sigmoid ──► p(x_i)
//!                          │
//!                          ├──► Φ(h_i, h_j) ──► sim head ──► sigmoid ──► q(x_i, x_j)
//!                          │
//!   x_j ──► backbone ──► h_j ──► cls head ──► sigmoid ──► p(x_j)
//! ```
//!
//! Both branches use the same backbone and classification-head parameters;
//! they are literally one parameter set evaluated twice. The backbone is a
//! ReLU multilayer perceptron whose last width is the embedding size.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{activate, affine_forward, Activation, Graph, Var};
use crate::loss::LossWeights;
use crate::params::{FormatError, ParamSet};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension mismatch: model expects {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Elementwise distance between two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    /// `|h_i - h_j|`
    #[default]
    Vad,
    /// `(h_i - h_j)^2`
    Vsd,
}

impl std::str::FromStr for Phi {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vad" => Ok(Phi::Vad),
            "vsd" => Ok(Phi::Vsd),
            other => Err(format!("unknown distance {other:?} (expected vad or vsd)")),
        }
    }
}

pub fn distance_phi(h_i: &[f64], h_j: &[f64], phi: Phi) -> Result<Vec<f64>, ModelError> {
    if h_i.len() != h_j.len() {
        return Err(ModelError::Dim {
            expected: h_i.len(),
            found: h_j.len(),
        });
    }
    Ok(h_i
        .iter()
        .zip(h_j)
        .map(|(a, b)| match phi {
            Phi::Vad => (a - b).abs(),
            Phi::Vsd => (a - b) * (a - b),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Backbone layer widths; the last one is the embedding size.
    pub hidden: Vec<usize>,
    pub phi: Phi,
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(ModelError::Config(format!(
                "input_dim {} and widths {:?} must be non-empty and positive",
                self.input_dim, self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    config: ModelConfig,
    params: ParamSet,
}

/// Graph handles for every model parameter, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn as_slice(&self) -> &[Var] {
        &self.0
    }
}

fn uniform_layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
    let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("layer shape");
    let b = Tensor::new(vec![fan_out], draw(fan_out)).expect("bias shape");
    (w, b)
}

impl TwinModel {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = config.input_dim;
        for (k, &width) in config.hidden.iter().enumerate() {
            let (w, b) = uniform_layer(&mut rng, fan_in, width);
            params.push(format!("backbone.{k}.weight"), w);
            params.push(format!("backbone.{k}.bias"), b);
            fan_in = width;
        }
        for head in ["cls", "sim"] {
            let (w, b) = uniform_layer(&mut rng, fan_in, 1);
            params.push(format!("{head}.weight"), w);
            params.push(format!("{head}.bias"), b);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in reference.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {n2} {:?} does not match expected {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layers(&self) -> usize {
        self.config.hidden.len()
    }

    fn tensor_at(&self, slot: usize) -> &Tensor {
        self.params.iter().nth(slot).map(|(_, t)| t).expect("parameter slot")
    }

    fn check_dim(&self, found: usize) -> Result<(), ModelError> {
        if found != self.config.input_dim {
            return Err(ModelError::Dim {
                expected: self.config.input_dim,
                found,
            });
        }
        Ok(())
    }

    fn rows_to_tensor<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Tensor, ModelError> {
        for r in rows {
            self.check_dim(r.as_ref().len())?;
            if r.as_ref().iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "model input" }.into());
            }
        }
        Ok(Tensor::from_rows(rows)?)
    }

    // ---- inference path (no tape) ----

    /// Embeddings for a batch of inputs, `[n, e]`.
    pub fn embed<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Tensor, ModelError> {
        let mut h = self.rows_to_tensor(rows)?;
        for k in 0..self.layers() {
            h = affine_forward(&h, self.tensor_at(2 * k), self.tensor_at(2 * k + 1))?;
            h = activate(&h, Activation::Relu)?;
        }
        Ok(h)
    }

    fn head(&self, h: &Tensor, which: usize) -> Result<Vec<f64>, ModelError> {
        let slot = 2 * self.layers() + 2 * which;
        let z = affine_forward(h, self.tensor_at(slot), self.tensor_at(slot + 1))?;
        Ok(activate(&z, Activation::Sigmoid)?.into_data())
    }

    /// Classification probabilities for a batch of embeddings.
    pub fn classify_embeddings(&self, h: &Tensor) -> Result<Vec<f64>, ModelError> {
        self.head(h, 0)
    }

    /// Pair dissimilarities for row-aligned embedding batches.
    pub fn similarity_embeddings(&self, h_i: &Tensor, h_j: &Tensor) -> Result<Vec<f64>, ModelError> {
        let d = h_i.zip_map(h_j, "phi", |a, b| match self.config.phi {
            Phi::Vad => (a - b).abs(),
            Phi::Vsd => (a - b) * (a - b),
        })?;
        self.head(&d, 1)
    }

    /// Dissimilarity of every (reference, target) combination:
    /// `out[r][t] = q(refs[r], targets[t])`.
    pub fn similarity_matrix(&self, refs: &Tensor, targets: &Tensor) -> Result<Vec<Vec<f64>>, ModelError> {
        let (nr, e) = refs.matrix_dims("similarity_matrix")?;
        let (nt, _) = targets.matrix_dims("similarity_matrix")?;
        let mut d = Vec::with_capacity(nr * nt * e);
        for r in 0..nr {
            for t in 0..nt {
                d.extend(distance_phi(refs.row(r), targets.row(t), self.config.phi)?);
            }
        }
        let q = self.head(&Tensor::new(vec![nr * nt, e], d)?, 1)?;
        Ok(q.chunks(nt).map(<[f64]>::to_vec).collect())
    }

    pub fn predict_proba<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>, ModelError> {
        let h = self.embed(rows)?;
        self.classify_embeddings(&h)
    }

    pub fn forward_single(&self, x: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
        let h = self.embed(&[x])?;
        let p = self.classify_embeddings(&h)?[0];
        Ok((h.into_data(), p))
    }

    /// `(p_i, p_j, q)` for one pair.
    pub fn forward_pair(&self, x_i: &[f64], x_j: &[f64]) -> Result<(f64, f64, f64), ModelError> {
        let h = self.embed(&[x_i, x_j])?;
        let p = self.classify_embeddings(&h)?;
        let hi = Tensor::from_rows(&[h.row(0)])?;
        let hj = Tensor::from_rows(&[h.row(1)])?;
        let q = self.similarity_embeddings(&hi, &hj)?[0];
        Ok((p[0], p[1], q))
    }

    // ---- taped path ----

    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.params.register(g))
    }

    pub fn embed_graph(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Result<Var, ModelError> {
        self.check_dim(g.value(x).shape().last().copied().unwrap_or(0))?;
        let mut h = x;
        for k in 0..self.layers() {
            h = g.affine(h, pv.0[2 * k], pv.0[2 * k + 1])?;
            h = g.relu(h)?;
        }
        Ok(h)
    }

    pub fn classify_graph(&self, g: &mut Graph, pv: &ParamVars, h: Var) -> Result<Var, ModelError> {
        let slot = 2 * self.layers();
        let z = g.affine(h, pv.0[slot], pv.0[slot + 1])?;
        Ok(g.sigmoid(z)?)
    }

    pub fn similarity_graph(&self, g: &mut Graph, pv: &ParamVars, h_i: Var, h_j: Var) -> Result<Var, ModelError> {
        let slot = 2 * self.layers() + 2;
        let diff = g.sub(h_i, h_j)?;
        let d = match self.config.phi {
            Phi::Vad => g.abs(diff),
            Phi::Vsd => g.square(diff),
        };
        let z = g.affine(d, pv.0[slot], pv.0[slot + 1])?;
        Ok(g.sigmoid(z)?)
    }

    /// Mean combined twin loss over a batch of labeled pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_loss_graph<R: AsRef<[f64]>>(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x_i: &[R],
        x_j: &[R],
        y_i: &[usize],
        y_j: &[usize],
        weights: &LossWeights,
    ) -> Result<Var, ModelError> {
        let n = x_i.len();
        let xi = g.input(self.rows_to_tensor(x_i)?);
        let xj = g.input(self.rows_to_tensor(x_j)?);
        let hi = self.embed_graph(g, pv, xi)?;
        let hj = self.embed_graph(g, pv, xj)?;
        let pi = self.classify_graph(g, pv, hi)?;
        let pj = self.classify_graph(g, pv, hj)?;
        let q = self.similarity_graph(g, pv, hi, hj)?;

        let ti: Vec<f64> = y_i.iter().map(|&y| y as f64).collect();
        let tj: Vec<f64> = y_j.iter().map(|&y| y as f64).collect();
        let differ: Vec<f64> = ti.iter().zip(&tj).map(|(a, b)| (a - b).abs()).collect();
        let cla_i = g.weighted_bce(pi, &ti, weights.cla, 1.0 - weights.cla)?;
        let cla_j = g.weighted_bce(pj, &tj, weights.cla, 1.0 - weights.cla)?;
        let cla = g.add(cla_i, cla_j)?;
        let cla = g.scale(cla, weights.lambda);
        let sim = g.weighted_bce(q, &differ, weights.sim, 1.0 - weights.sim)?;
        let total = g.add(cla, sim)?;
        Ok(g.scale(total, 1.0 / n as f64))
    }

    /// Batch-mean weighted binary cross-entropy of the classification head.
    pub fn classification_loss_graph<R: AsRef<[f64]>>(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: &[R],
        y: &[usize],
        omega_cla: f64,
    ) -> Result<Var, ModelError> {
        let xv = g.input(self.rows_to_tensor(x)?);
        let h = self.embed_graph(g, pv, xv)?;
        let p = self.classify_graph(g, pv, h)?;
        let t: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let total = g.weighted_bce(p, &t, omega_cla, 1.0 - omega_cla)?;
        Ok(g.scale(total, 1.0 / x.len() as f64))
    }

    // ---- checkpoints ----

    /// Header (magic, version, distance, dims) followed by the parameter
    /// container.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.config.phi {
            Phi::Vad => 0,
            Phi::Vsd => 1,
        });
        out.extend_from_slice(&(self.config.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.hidden.len() as u32).to_le_bytes());
        for &w in &self.config.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.get(..4) != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(bad("bad magic bytes"));
        }
        let u32_at = |pos: usize| -> Result<u32, ModelError> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let version = u32_at(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
            )));
        }
        let phi = match bytes.get(8) {
            Some(0) => Phi::Vad,
            Some(1) => Phi::Vsd,
            Some(other) => return Err(ModelError::Checkpoint(format!("unknown distance code {other}"))),
            None => return Err(bad("truncated header")),
        };
        let input_dim = u32_at(9)? as usize;
        let layers = u32_at(13)? as usize;
        if layers > 64 {
            return Err(bad("implausible layer count"));
        }
        let hidden = (0..layers)
            .map(|k| u32_at(17 + 4 * k).map(|w| w as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let params = ParamSet::from_bytes(&bytes[17 + 4 * layers..])?;
        Self::from_parts(ModelConfig { input_dim, hidden, phi }, params)
    }
}
