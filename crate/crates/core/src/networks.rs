//! Fully-connected encoder `Q`, decoder `P` and critic `D`.
//!
//! The encoder maps `x` to `[logits_y, h, z]`; the `y` head goes through a
//! softmax and the `h`/`z` heads are linear, so the posterior over `(h, z)`
//! is a point mass. The decoder maps `[y, h, z]` back to data space and the
//! critic scores `(h, z)` (or `(y, h, z)` in the no-CR ablation).

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Graph, NormStats, Var};
use crate::distributions::PriorSpec;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Rows per forward pass when scoring whole datasets.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Leaky ReLU with slope [`LEAKY_SLOPE`].
    LeakyRelu,
    Relu,
    Sigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dropout_p: f64,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation) -> Self {
        LayerSpec { width, activation, batch_norm: false, dropout_p: 0.0 }
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }
}

/// Whether data are pixel intensities in `[0,1]` (Bernoulli likelihood,
/// sigmoid decoder output) or real-valued features (Gaussian likelihood,
/// linear decoder output).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Pixel,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameter groups receive gradients in a [`Session`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    EncoderDecoder,
    Critic,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Decoder,
    Critic,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Critic => "critic",
        }
    }
}

/// Everything needed to construct a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub prior: PriorSpec,
    pub data_mode: DataMode,
    pub input_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub critic: Vec<LayerSpec>,
    /// Feed `y` to the critic as well (adversarial matching of `y`).
    #[serde(default)]
    pub critic_sees_y: bool,
}

/// Hidden-layer widths for the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenLayout {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub critic: Vec<usize>,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
    pub critic_dropout: f64,
    pub batch_norm: bool,
}

impl Default for HiddenLayout {
    fn default() -> Self {
        HiddenLayout {
            encoder: vec![512, 512, 256],
            decoder: vec![256, 512, 512],
            critic: vec![100, 100],
            encoder_activation: Activation::LeakyRelu,
            decoder_activation: Activation::Relu,
            critic_dropout: 0.2,
            batch_norm: true,
        }
    }
}

impl ModelSpec {
    /// Assembles layer lists from hidden widths: batch norm on every
    /// encoder/decoder layer except the last, a linear latent head, a
    /// data-mode dependent decoder output, and a linear one-unit critic.
    pub fn from_layout(
        prior: PriorSpec,
        data_mode: DataMode,
        input_dim: usize,
        layout: &HiddenLayout,
        critic_sees_y: bool,
    ) -> Self {
        let hidden = |widths: &[usize], act: Activation| -> Vec<LayerSpec> {
            widths
                .iter()
                .map(|&w| LayerSpec { width: w, activation: act, batch_norm: layout.batch_norm, dropout_p: 0.0 })
                .collect()
        };
        let mut encoder = hidden(&layout.encoder, layout.encoder_activation);
        encoder.push(LayerSpec::new(prior.latent_dim(), Activation::Linear));
        let mut decoder = hidden(&layout.decoder, layout.decoder_activation);
        let out_act = match data_mode {
            DataMode::Pixel => Activation::Sigmoid,
            DataMode::Feature => Activation::Linear,
        };
        decoder.push(LayerSpec::new(input_dim, out_act));
        let mut critic: Vec<LayerSpec> = layout
            .critic
            .iter()
            .map(|&w| LayerSpec::new(w, Activation::Relu).with_dropout(layout.critic_dropout))
            .collect();
        critic.push(LayerSpec::new(1, Activation::Linear));
        ModelSpec { prior, data_mode, input_dim, encoder, decoder, critic, critic_sees_y }
    }

    pub fn critic_input_dim(&self) -> usize {
        let hz = self.prior.d_h + self.prior.d_z;
        if self.critic_sees_y {
            hz + self.prior.k
        } else {
            hz
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.input_dim == 0 {
            return Err(Error::config("input dimension must be positive"));
        }
        if self.critic_input_dim() == 0 {
            return Err(Error::config("critic has no inputs: d_h + d_z must be positive"));
        }
        let check = |name: &str, layers: &[LayerSpec], out: usize, last_act: &[Activation]| -> Result<()> {
            let last = layers.last().ok_or_else(|| Error::config(format!("{name} has no layers")))?;
            for (i, l) in layers.iter().enumerate() {
                if l.width == 0 {
                    return Err(Error::config(format!("{name} layer {i} has zero width")));
                }
                if !(0.0..1.0).contains(&l.dropout_p) {
                    return Err(Error::config(format!("{name} layer {i} dropout {} outside [0,1)", l.dropout_p)));
                }
            }
            if last.width != out {
                return Err(Error::config(format!(
                    "{name} final width {} does not match required {out}",
                    last.width
                )));
            }
            if last.batch_norm {
                return Err(Error::config(format!("{name} final layer must not use batch norm")));
            }
            if !last_act.contains(&last.activation) {
                return Err(Error::config(format!(
                    "{name} final activation {:?} not allowed here (expected one of {last_act:?})",
                    last.activation
                )));
            }
            Ok(())
        };
        check("encoder", &self.encoder, self.prior.latent_dim(), &[Activation::Linear])?;
        let dec_out = match self.data_mode {
            DataMode::Pixel => Activation::Sigmoid,
            DataMode::Feature => Activation::Linear,
        };
        check("decoder", &self.decoder, self.input_dim, &[dec_out])?;
        check("critic", &self.critic, 1, &[Activation::Linear])?;
        Ok(())
    }
}

/// Parameters and running statistics of the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

fn layer_key(group: Group, layer: usize, what: &str) -> String {
    format!("{}.{layer}.{what}", group.prefix())
}

/// Builds all parameters: weights `~ N(0, init_std²)`, zero biases, unit
/// batch-norm scales, zero shifts. Deterministic given the rng state.
pub fn build_model<R: RngCore + ?Sized>(spec: &ModelSpec, init_std: f64, rng: &mut R) -> Result<ModelState> {
    spec.validate()?;
    if !(init_std.is_finite() && init_std >= 0.0) {
        return Err(Error::config(format!("init_std {init_std} must be finite and nonnegative")));
    }
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let nets = [
        (Group::Encoder, spec.input_dim, &spec.encoder),
        (Group::Decoder, spec.prior.latent_dim(), &spec.decoder),
        (Group::Critic, spec.critic_input_dim(), &spec.critic),
    ];
    for (group, input_dim, layers) in nets {
        let mut fan_in = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            let w = layer.width;
            params.insert(layer_key(group, i, "weight"), Tensor::randn(&[fan_in, w], init_std, rng));
            params.insert(layer_key(group, i, "bias"), Tensor::zeros(&[w]));
            if layer.batch_norm {
                params.insert(layer_key(group, i, "gamma"), Tensor::full(&[w], 1.0));
                params.insert(layer_key(group, i, "beta"), Tensor::zeros(&[w]));
                buffers.insert(layer_key(group, i, "running_mean"), Tensor::zeros(&[w]));
                buffers.insert(layer_key(group, i, "running_var"), Tensor::full(&[w], 1.0));
            }
            fan_in = w;
        }
    }
    Ok(ModelState { spec: spec.clone(), params, buffers })
}

impl ModelState {
    pub fn prior(&self) -> &PriorSpec {
        &self.spec.prior
    }

    pub fn group_of(name: &str) -> Option<Group> {
        [Group::Encoder, Group::Decoder, Group::Critic]
            .into_iter()
            .find(|g| name.strip_prefix(g.prefix()).is_some_and(|rest| rest.starts_with('.')))
    }

    /// Names of every parameter in `groups`.
    pub fn param_names(&self, groups: &[Group]) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| Self::group_of(k).is_some_and(|g| groups.contains(&g)))
            .cloned()
            .collect()
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)]) {
        for (prefix, stats) in updates {
            let blend = |buf: &mut Tensor, batch: &[f64]| {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            };
            if let Some(buf) = self.buffers.get_mut(&format!("{prefix}.running_mean")) {
                blend(buf, &stats.mean);
            }
            if let Some(buf) = self.buffers.get_mut(&format!("{prefix}.running_var")) {
                blend(buf, &stats.var);
            }
        }
    }

    pub fn critic_params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params
            .iter_mut()
            .filter(|(k, _)| Self::group_of(k) == Some(Group::Critic))
            .map(|(_, v)| v)
    }
}

/// Symbolic handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub logits: Var,
    pub y_probs: Var,
    pub h: Option<Var>,
    pub z: Option<Var>,
    pub penultimate: Var,
}

/// A graph with the model's parameters bound as leaves.
pub struct Session<'s> {
    pub graph: Graph,
    state: &'s ModelState,
    vars: BTreeMap<String, Var>,
    batch_stats: Vec<(String, BatchStats)>,
}

impl<'s> Session<'s> {
    pub fn new(state: &'s ModelState, trainable: Trainable) -> Self {
        let mut graph = Graph::new();
        let mut vars = BTreeMap::new();
        for (name, t) in &state.params {
            let group = ModelState::group_of(name);
            let train = match trainable {
                Trainable::Nothing => false,
                Trainable::All => true,
                Trainable::Critic => group == Some(Group::Critic),
                Trainable::EncoderDecoder => matches!(group, Some(Group::Encoder | Group::Decoder)),
            };
            let v = if train { graph.param(t.clone()) } else { graph.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Session { graph, state, vars, batch_stats: Vec::new() }
    }

    pub fn state(&self) -> &ModelState {
        self.state
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Batch statistics recorded by training-mode passes with `record` set.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.batch_stats)
    }

    /// Gradients of every parameter in `groups`, zero-filled where the loss
    /// does not depend on a parameter.
    pub fn param_grads(&self, grads: &Gradients, groups: &[Group]) -> ParamStore {
        self.state
            .param_names(groups)
            .into_iter()
            .map(|name| {
                let g = grads.wrt(&self.graph, self.vars[&name]);
                (name, g)
            })
            .collect()
    }

    fn run(
        &mut self,
        group: Group,
        layers: &[LayerSpec],
        input: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
        record: bool,
    ) -> Result<(Var, Var)> {
        let mut x = input;
        let mut penultimate = input;
        for (i, layer) in layers.iter().enumerate() {
            penultimate = x;
            let w = self.vars[&layer_key(group, i, "weight")];
            let b = self.vars[&layer_key(group, i, "bias")];
            x = self.graph.matmul(x, w)?;
            x = self.graph.add_row(x, b)?;
            if layer.batch_norm {
                let gamma = self.vars[&layer_key(group, i, "gamma")];
                let beta = self.vars[&layer_key(group, i, "beta")];
                let (out, stats) = match mode {
                    Mode::Train => self.graph.batch_norm(x, gamma, beta, NormStats::Batch { eps: BN_EPS })?,
                    Mode::Eval => {
                        let mean = &self.state.buffers[&layer_key(group, i, "running_mean")];
                        let var = &self.state.buffers[&layer_key(group, i, "running_var")];
                        let stats = NormStats::Running { mean: mean.data(), var: var.data(), eps: BN_EPS };
                        self.graph.batch_norm(x, gamma, beta, stats)?
                    }
                };
                if let (Some(stats), true) = (stats, record) {
                    self.batch_stats.push((format!("{}.{i}", group.prefix()), stats));
                }
                x = out;
            }
            x = match layer.activation {
                Activation::LeakyRelu => self.graph.leaky_relu(x, LEAKY_SLOPE)?,
                Activation::Relu => self.graph.relu(x)?,
                Activation::Sigmoid => self.graph.sigmoid(x)?,
                Activation::Linear => x,
            };
            x = self.graph.dropout(x, layer.dropout_p, mode == Mode::Train, rng)?;
        }
        Ok((x, penultimate))
    }

    fn check_width(&self, v: Var, want: usize, what: &str) -> Result<()> {
        let (_, c) = self.graph.value(v).dims2()?;
        if c != want {
            return Err(Error::shape(format!("{what}: expected {want} columns, got {c}")));
        }
        Ok(())
    }

    pub fn encode(&mut self, x: Var, mode: Mode, rng: &mut dyn RngCore, record: bool) -> Result<Encoded> {
        let spec = &self.state.spec;
        self.check_width(x, spec.input_dim, "encoder input")?;
        let (k, d_h, d_z) = (spec.prior.k, spec.prior.d_h, spec.prior.d_z);
        let layers = spec.encoder.clone();
        let (out, penultimate) = self.run(Group::Encoder, &layers, x, mode, rng, record)?;
        let logits = self.graph.slice_cols(out, 0, k)?;
        let y_probs = self.graph.softmax(logits, 1)?;
        let h = if d_h > 0 { Some(self.graph.slice_cols(out, k, k + d_h)?) } else { None };
        let z = if d_z > 0 { Some(self.graph.slice_cols(out, k + d_h, k + d_h + d_z)?) } else { None };
        Ok(Encoded { logits, y_probs, h, z, penultimate })
    }

    pub fn decode(
        &mut self,
        y: Var,
        h: Option<Var>,
        z: Option<Var>,
        mode: Mode,
        rng: &mut dyn RngCore,
        record: bool,
    ) -> Result<Var> {
        let prior = self.state.spec.prior.clone();
        self.check_width(y, prior.k, "decoder y")?;
        if let Some(h) = h {
            self.check_width(h, prior.d_h, "decoder h")?;
        }
        if let Some(z) = z {
            self.check_width(z, prior.d_z, "decoder z")?;
        }
        let parts: Vec<Var> = [Some(y), h, z].into_iter().flatten().collect();
        let code = self.graph.concat(&parts, 1)?;
        let layers = self.state.spec.decoder.clone();
        Ok(self.run(Group::Decoder, &layers, code, mode, rng, record)?.0)
    }

    /// Critic scores, one per row, as an `n×1` tensor.
    pub fn discriminate(&mut self, input: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        self.check_width(input, self.state.spec.critic_input_dim(), "critic input")?;
        let layers = self.state.spec.critic.clone();
        Ok(self.run(Group::Critic, &layers, input, mode, rng, false)?.0)
    }

    /// Concatenates the latent parts the critic looks at.
    pub fn critic_input(&mut self, y: Var, h: Option<Var>, z: Option<Var>) -> Result<Var> {
        let y = self.state.spec.critic_sees_y.then_some(y);
        let parts: Vec<Var> = [y, h, z].into_iter().flatten().collect();
        self.graph.concat(&parts, 1)
    }
}

/// Plain-tensor encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub y_probs: Tensor,
    pub h: Option<Tensor>,
    pub z: Option<Tensor>,
    pub penultimate: Tensor,
}

fn idle_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Encodes a batch. Training mode uses batch statistics but does not
/// update the running averages.
pub fn encode(state: &ModelState, x: &Tensor, mode: Mode) -> Result<EncodedBatch> {
    let mut s = Session::new(state, Trainable::Nothing);
    let xv = s.graph.constant(x.clone());
    let e = s.encode(xv, mode, &mut idle_rng(), false)?;
    let g = &s.graph;
    Ok(EncodedBatch {
        y_probs: g.value(e.y_probs).clone(),
        h: e.h.map(|v| g.value(v).clone()),
        z: e.z.map(|v| g.value(v).clone()),
        penultimate: g.value(e.penultimate).clone(),
    })
}

pub fn decode(state: &ModelState, y: &Tensor, h: Option<&Tensor>, z: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
    let mut s = Session::new(state, Trainable::Nothing);
    let yv = s.graph.constant(y.clone());
    let hv = h.map(|t| s.graph.constant(t.clone()));
    let zv = z.map(|t| s.graph.constant(t.clone()));
    let out = s.decode(yv, hv, zv, mode, &mut idle_rng(), false)?;
    Ok(s.graph.value(out).clone())
}

/// Critic scores for `(h, z)` rows (and `y` when the critic sees it).
pub fn discriminate(state: &ModelState, latent: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let mut s = Session::new(state, Trainable::Nothing);
    let v = s.graph.constant(latent.clone());
    let out = s.discriminate(v, mode, rng)?;
    Ok(s.graph.value(out).data().to_vec())
}

/// Eval-mode encoding of a whole feature matrix, in chunks.
pub fn encode_all(state: &ModelState, features: &Tensor) -> Result<EncodedBatch> {
    let (n, _) = features.dims2()?;
    let mut parts: Vec<EncodedBatch> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        parts.push(encode(state, &features.select_rows(&idx)?, Mode::Eval)?);
        start = end;
    }
    let stack = |get: &dyn Fn(&EncodedBatch) -> Option<&Tensor>| -> Result<Option<Tensor>> {
        let mut data = Vec::new();
        let mut cols = 0;
        for p in &parts {
            match get(p) {
                Some(t) => {
                    cols = t.cols();
                    data.extend_from_slice(t.data());
                }
                None => return Ok(None),
            }
        }
        Tensor::new(vec![n, cols], data).map(Some)
    };
    Ok(EncodedBatch {
        y_probs: stack(&|p| Some(&p.y_probs))?.expect("always present"),
        h: stack(&|p| p.h.as_ref())?,
        z: stack(&|p| p.z.as_ref())?,
        penultimate: stack(&|p| Some(&p.penultimate))?.expect("always present"),
    })
}

fn one_hot_rows(k: usize, hot: &[usize]) -> Result<Tensor> {
    let mut y = Tensor::zeros(&[hot.len(), k]);
    for (i, &c) in hot.iter().enumerate() {
        y.data_mut()[i * k + c] = 1.0;
    }
    Ok(y)
}

/// Decodes `n` prior draws of `(h, z)` with `y` fixed to `cluster`.
pub fn generate_cluster<R: Rng + ?Sized>(state: &ModelState, cluster: usize, n: usize, rng: &mut R) -> Result<Tensor> {
    let prior = state.prior();
    if cluster >= prior.k {
        return Err(Error::Invalid(format!("cluster {cluster} outside [0, {})", prior.k)));
    }
    if n == 0 {
        return Err(Error::Invalid("asked for zero samples".into()));
    }
    let y = one_hot_rows(prior.k, &vec![cluster; n])?;
    let h = (prior.d_h > 0).then(|| Tensor::randn(&[n, prior.d_h], 1.0, rng));
    let z = (prior.d_z > 0).then(|| Tensor::randn(&[n, prior.d_z], 1.0, rng));
    decode(state, &y, h.as_ref(), z.as_ref(), Mode::Eval)
}

/// Decoded grid sweeping one style coordinate, cluster by cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Traversal {
    /// Cluster of each row.
    pub cluster: Vec<usize>,
    /// Style value of each row.
    pub value: Vec<f64>,
    /// `K · steps` decoded samples, cluster-major.
    pub samples: Tensor,
}

/// Sweeps `h[style]` linearly over `[lo, hi]` in `steps` points for every
/// cluster, holding the other style and noise coordinates at 0.
pub fn style_traversal(state: &ModelState, style: usize, lo: f64, hi: f64, steps: usize) -> Result<Traversal> {
    let prior = state.prior();
    if style >= prior.d_h {
        return Err(Error::Invalid(format!("style index {style} outside [0, {})", prior.d_h)));
    }
    if steps == 0 {
        return Err(Error::Invalid("traversal needs at least one step".into()));
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Invalid("traversal range must be finite".into()));
    }
    let values: Vec<f64> = (0..steps)
        .map(|s| if steps == 1 { lo } else { lo + (hi - lo) * s as f64 / (steps - 1) as f64 })
        .collect();
    let n = prior.k * steps;
    let cluster: Vec<usize> = (0..n).map(|i| i / steps).collect();
    let value: Vec<f64> = (0..n).map(|i| values[i % steps]).collect();
    let y = one_hot_rows(prior.k, &cluster)?;
    let mut h = Tensor::zeros(&[n, prior.d_h]);
    for (i, v) in value.iter().enumerate() {
        h.data_mut()[i * prior.d_h + style] = *v;
    }
    let z = (prior.d_z > 0).then(|| Tensor::zeros(&[n, prior.d_z]));
    let samples = decode(state, &y, Some(&h), z.as_ref(), Mode::Eval)?;
    Ok(Traversal { cluster, value, samples })
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn hard_assignments(y_probs: &Tensor) -> Vec<usize> {
    (0..y_probs.rows())
        .map(|r| {
            let row = y_probs.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
