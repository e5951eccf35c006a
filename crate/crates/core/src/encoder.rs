//! Spatial-temporal encoder: diffusion graph convolution layers applied per
//! time step, a stack of dilated causal temporal convolutions, and the three
//! parameter heads mapping node embeddings to (μ, φ, ρ) forecast fields.

use std::error::Error;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_2d, Array, AutodiffError, NodeId, ParameterStore, Tape};
use crate::data::ODGraph;
use crate::seeds::derive_seed;

#[derive(Debug)]
pub enum EncoderError {
    /// A config field violates its invariant; the message names the field.
    BadConfig { context: String },
    /// Input length shorter than the temporal stack's receptive field.
    TooShort { needed: usize, actual: usize },
    /// Graph/input dimensions disagree with the encoder's expectations.
    Mismatch { context: String },
    Autodiff(AutodiffError),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadConfig { context } => write!(f, "invalid encoder config: {context}"),
            Self::TooShort { needed, actual } => write!(
                f,
                "input length {actual} shorter than the receptive field {needed}"
            ),
            Self::Mismatch { context } => write!(f, "{context}"),
            Self::Autodiff(e) => write!(f, "{e}"),
        }
    }
}

impl Error for EncoderError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            Self::Autodiff(e) => Some(e),
            _ => None,
        }
    }
}

impl From<AutodiffError> for EncoderError {
    fn from(e: AutodiffError) -> Self {
        Self::Autodiff(e)
    }
}

/// Architecture hyperparameters. The defaults reproduce the reference
/// setting: two 42-unit spatial layers, diffusion depth 2, kernel-3 causal
/// convolutions with dilations 1 and 2, dropout 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_units: usize,
    /// Diffusion depth K: transition powers 0..=K enter each spatial layer.
    pub diffusion_steps: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub dropout: f64,
    /// Embedding width F' produced by the temporal stack.
    pub embed_dim: usize,
    /// Forecast horizon k (windows ahead).
    pub horizon: usize,
    /// History length t (windows of input).
    pub input_len: usize,
    /// ε added to φ and ρ so both stay strictly inside their open ranges.
    pub head_epsilon: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_units: 42,
            diffusion_steps: 2,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2],
            dropout: 0.2,
            embed_dim: 42,
            horizon: 1,
            input_len: 8,
            head_epsilon: 1e-6,
        }
    }
}

impl EncoderConfig {
    /// Time steps the last output of the temporal stack can see:
    /// 1 + (kernel − 1) · Σ dilations.
    pub fn receptive_field(&self) -> usize {
        1 + (self.tcn_kernel - 1) * self.tcn_dilations.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |context: String| Err(EncoderError::BadConfig { context });
        if self.num_layers == 0 {
            return bad("num_layers must be positive".into());
        }
        if self.hidden_units == 0 || self.embed_dim == 0 {
            return bad("hidden_units and embed_dim must be positive".into());
        }
        if self.tcn_kernel < 2 {
            return bad(format!("tcn_kernel {} must be at least 2", self.tcn_kernel));
        }
        if self.tcn_dilations.is_empty() || self.tcn_dilations.contains(&0) {
            return bad(format!(
                "tcn_dilations {:?} must be non-empty and positive",
                self.tcn_dilations
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.horizon == 0 || self.input_len == 0 {
            return bad("horizon and input_len must be positive".into());
        }
        if !(self.head_epsilon > 0.0 && self.head_epsilon < 0.5) {
            return bad(format!("head_epsilon {} outside (0, 0.5)", self.head_epsilon));
        }
        if self.receptive_field() > self.input_len {
            return Err(EncoderError::TooShort {
                needed: self.receptive_field(),
                actual: self.input_len,
            });
        }
        Ok(())
    }
}

/// Predicted distribution parameters per pair and horizon step, each
/// |V| × k row-major. `rho` is absent for fixed-ρ family models, whose
/// index parameter is a constant of the family rather than a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastField {
    pub num_pairs: usize,
    pub horizon: usize,
    pub mu: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho: Option<Vec<f64>>,
}

/// Tape handles for one forward pass, used to assemble training losses.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub mu: NodeId,
    pub phi: NodeId,
    pub rho: Option<NodeId>,
}

/// Forward-pass mode. Training mode activates dropout, drawing masks from a
/// stream derived from `dropout_seed` (one sub-stream per dropout site).
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Train { dropout_seed: u64 },
    Eval,
}

/// The encoder's static description: validated config, node count, and the
/// precomputed diffusion transition powers. Parameters live in a
/// [`ParameterStore`]; this type knows their names, shapes, and wiring.
pub struct Encoder {
    config: EncoderConfig,
    num_pairs: usize,
    with_rho_head: bool,
    /// forward_transition^s and backward_transition^s for s = 0..=K.
    tf_pows: Vec<Array>,
    tb_pows: Vec<Array>,
}

impl Encoder {
    /// `with_rho_head = false` drops the ρ head entirely (fixed-ρ families);
    /// its parameters are then never created, trained, or serialized.
    pub fn new(
        config: EncoderConfig,
        graph: &ODGraph,
        with_rho_head: bool,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let v = graph.num_pairs();
        let tf = Array::new(vec![v, v], graph.forward_transition().to_vec())
            .map_err(EncoderError::from)?;
        let tb = Array::new(vec![v, v], graph.backward_transition().to_vec())
            .map_err(EncoderError::from)?;
        let eye = identity(v);
        let mut tf_pows = vec![eye.clone()];
        let mut tb_pows = vec![eye];
        for s in 1..=config.diffusion_steps {
            tf_pows.push(matmul_2d(&tf_pows[s - 1], &tf)?);
            tb_pows.push(matmul_2d(&tb_pows[s - 1], &tb)?);
        }
        Ok(Self {
            config,
            num_pairs: v,
            with_rho_head,
            tf_pows,
            tb_pows,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn with_rho_head(&self) -> bool {
        self.with_rho_head
    }

    /// Parameter names in registration order. The order is part of the
    /// checkpoint format and of training determinism; never reorder.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.config.num_layers {
            for s in 0..=self.config.diffusion_steps {
                names.push(format!("dgcn{l}.fwd{s}.w"));
                names.push(format!("dgcn{l}.bwd{s}.w"));
            }
        }
        for i in 0..self.config.tcn_dilations.len() {
            names.push(format!("tcn{i}.w"));
        }
        for head in self.head_names() {
            names.push(format!("head.{head}.w"));
            names.push(format!("head.{head}.b"));
        }
        names
    }

    fn head_names(&self) -> Vec<&'static str> {
        if self.with_rho_head {
            vec!["mu", "phi", "rho"]
        } else {
            vec!["mu", "phi"]
        }
    }

    /// Register freshly initialized parameters into `store`.
    ///
    /// Weights draw from U(−1/√fan_in, 1/√fan_in) on a ChaCha8 stream seeded
    /// by `seed`, consumed in registration order. Head biases start at
    /// deliberate constants: b_μ = 1 and b_φ = 1 keep early means and
    /// dispersions away from the degenerate corner, b_ρ = 0 centers the
    /// index at 1.5 + ε.
    pub fn init_params(&self, store: &mut ParameterStore, seed: u64) -> Result<(), EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Array {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Array::with_shape_unchecked(shape, data)
        };

        let h = self.config.hidden_units;
        for l in 0..self.config.num_layers {
            let d_in = if l == 0 { 1 } else { h };
            for s in 0..=self.config.diffusion_steps {
                let w_f = uniform(vec![d_in, h], d_in);
                let w_b = uniform(vec![d_in, h], d_in);
                store.add(&format!("dgcn{l}.fwd{s}.w"), w_f)?;
                store.add(&format!("dgcn{l}.bwd{s}.w"), w_b)?;
            }
        }
        for (i, _) in self.config.tcn_dilations.iter().enumerate() {
            let c_in = if i == 0 { h } else { self.config.embed_dim };
            let c_out = self.config.embed_dim;
            let k = self.config.tcn_kernel;
            let w = uniform(vec![c_out, c_in, k], c_in * k);
            store.add(&format!("tcn{i}.w"), w)?;
        }
        let f_prime = self.config.embed_dim;
        let k_out = self.config.horizon;
        for head in self.head_names() {
            let w = uniform(vec![f_prime, k_out], f_prime);
            store.add(&format!("head.{head}.w"), w)?;
            let b0 = match head {
                "mu" | "phi" => 1.0,
                _ => 0.0,
            };
            store.add(&format!("head.{head}.b"), Array::full(&[1, k_out], b0))?;
        }
        Ok(())
    }

    /// Full forward pass: input counts → embeddings → heads.
    ///
    /// `input` is the window's V × t count block (row-major, cast to f64);
    /// `params` are the tape leaves of this encoder's parameters in
    /// registration order (from `ParameterStore::attach`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &[f64],
        mode: ForwardMode,
    ) -> Result<HeadNodes, EncoderError> {
        let z = self.encode(tape, params, input, mode)?;
        self.heads(tape, params, z)
    }

    /// Encoder body producing the V × F' embedding node.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: &[f64],
        mode: ForwardMode,
    ) -> Result<NodeId, EncoderError> {
        let v = self.num_pairs;
        let t = self.config.input_len;
        if input.len() != v * t {
            return Err(EncoderError::Mismatch {
                context: format!(
                    "input has {} values, expected {v} pairs x {t} windows",
                    input.len()
                ),
            });
        }
        let expected = self.param_names().len();
        if params.len() != expected {
            return Err(EncoderError::Mismatch {
                context: format!("{} parameter nodes, encoder needs {expected}", params.len()),
            });
        }

        let k_diff = self.config.diffusion_steps;
        let h = self.config.hidden_units;
        let mut dropout_site = 0u64;

        // Transition powers as constant leaves of this tape.
        let tf_ids: Vec<NodeId> = self.tf_pows.iter().map(|m| tape.leaf(m.clone())).collect();
        let tb_ids: Vec<NodeId> = self.tb_pows.iter().map(|m| tape.leaf(m.clone())).collect();

        // H enters as V × (t·d); d = 1 initially. Row-major means the same
        // buffer reads as (V·t) × d after a reshape, which is where the
        // weight multiplication happens.
        let mut head = tape.leaf(Array::with_shape_unchecked(vec![v, t], input.to_vec()));
        let mut d_in = 1usize;
        let mut p = 0usize; // cursor into params, following registration order

        for _layer in 0..self.config.num_layers {
            let mut acc: Option<NodeId> = None;
            for s in 0..=k_diff {
                let w_f = params[p];
                let w_b = params[p + 1];
                p += 2;
                for (trans, w) in [(tf_ids[s], w_f), (tb_ids[s], w_b)] {
                    let mixed = tape.matmul(trans, head)?; // V × (t·d)
                    let flat = tape.reshape(mixed, &[v * t, d_in])?;
                    let term = tape.matmul(flat, w)?; // (V·t) × h
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
            }
            let pre = acc.expect("diffusion loop ran at least once");
            let mut act = tape.relu(pre);
            if let ForwardMode::Train { dropout_seed } = mode {
                if self.config.dropout > 0.0 {
                    let site_seed = derive_seed(dropout_seed, &format!("site.{dropout_site}"));
                    dropout_site += 1;
                    act = tape.dropout(act, self.config.dropout, site_seed, true)?;
                }
            }
            head = tape.reshape(act, &[v, t * h])?;
            d_in = h;
        }

        // Temporal stack over (V, t, h), relu between layers, last step out.
        let mut seq = tape.reshape(head, &[v, t, d_in])?;
        for (i, &dilation) in self.config.tcn_dilations.iter().enumerate() {
            let w = params[p];
            p += 1;
            let conv = tape.causal_conv1d(seq, w, dilation)?;
            seq = if i + 1 < self.config.tcn_dilations.len() {
                tape.relu(conv)
            } else {
                conv
            };
        }
        let last = tape.slice(seq, 1, t - 1, 1)?;
        let z = tape.reshape(last, &[v, self.config.embed_dim])?;
        Ok(z)
    }

    /// Parameter heads over an embedding node:
    /// μ = relu(Z·W + b), φ = relu(Z·W + b) + ε, ρ = sigmoid(Z·W + b) + 1 + ε
    /// clamped to at most 2 − ε so the index stays inside the compound
    /// regime. Clamps are expressed with relu so they differentiate.
    pub fn heads(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        z: NodeId,
    ) -> Result<HeadNodes, EncoderError> {
        let eps = self.config.head_epsilon;
        let v = self.num_pairs;
        let k = self.config.horizon;
        let head_base = self.param_names().len() - 2 * self.head_names().len();

        let affine = |tape: &mut Tape, idx: usize| -> Result<NodeId, EncoderError> {
            let w = params[head_base + 2 * idx];
            let b = params[head_base + 2 * idx + 1];
            let zw = tape.matmul(z, w)?;
            let bb = tape.broadcast(b, &[v, k])?;
            Ok(tape.add(zw, bb)?)
        };

        let mu_pre = affine(tape, 0)?;
        let mu = tape.relu(mu_pre);

        let phi_pre = affine(tape, 1)?;
        let phi_relu = tape.relu(phi_pre);
        let eps_arr = tape.leaf(Array::full(&[v, k], eps));
        let phi = tape.add(phi_relu, eps_arr)?;

        let rho = if self.with_rho_head {
            let rho_pre = affine(tape, 2)?;
            let sig = tape.sigmoid(rho_pre);
            let one_eps = tape.leaf(Array::full(&[v, k], 1.0 + eps));
            let raw = tape.add(sig, one_eps)?;
            // min(raw, 2 − ε) = (2 − ε) − relu((2 − ε) − raw)
            let cap = tape.leaf(Array::full(&[v, k], 2.0 - eps));
            let gap = tape.sub(cap, raw)?;
            let gap_pos = tape.relu(gap);
            Some(tape.sub(cap, gap_pos)?)
        } else {
            None
        };

        Ok(HeadNodes { mu, phi, rho })
    }

    /// Evaluation-mode forward pass returning plain values.
    pub fn predict(
        &self,
        store: &ParameterStore,
        input: &[f64],
    ) -> Result<ForecastField, EncoderError> {
        let mut tape = Tape::new();
        let params = store.attach(&mut tape);
        let heads = self.forward(&mut tape, &params, input, ForwardMode::Eval)?;
        Ok(ForecastField {
            num_pairs: self.num_pairs,
            horizon: self.config.horizon,
            mu: tape.value(heads.mu).data().to_vec(),
            phi: tape.value(heads.phi).data().to_vec(),
            rho: heads.rho.map(|r| tape.value(r).data().to_vec()),
        })
    }
}

fn identity(n: usize) -> Array {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Array::with_shape_unchecked(vec![n, n], data)
}
