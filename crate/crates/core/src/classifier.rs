//! Attribute classifier heads `f_i(x; θ)` trained on (latent, label) pairs,
//! plus the checkpoint format used to persist them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{
    adam_step, leaky, mlp_init, softmax, AdamState, MlpGrads, MlpParams, MlpTrace, RealArray,
    LEAKY_SLOPE,
};
use crate::par;
use crate::rng::Stream;
use crate::worldgen::{AttrValue, AttributeKind, AttributeSpec, Dataset, Generator};

/// Hidden widths of the reference architecture for 512-dimensional inputs.
pub const REFERENCE_WIDTHS: [usize; 3] = [384, 256, 128];
const REFERENCE_INPUT: usize = 512;

/// Hidden widths for an input of dimension `input_dim`. Inputs narrower than
/// 16 get the reference widths scaled by `input_dim / 512`, floored at 8.
pub fn hidden_widths(input_dim: usize) -> Vec<usize> {
    if input_dim >= 16 {
        return REFERENCE_WIDTHS.to_vec();
    }
    REFERENCE_WIDTHS
        .iter()
        .map(|&w| {
            let scaled = (w as f64 * input_dim as f64 / REFERENCE_INPUT as f64).round() as usize;
            scaled.max(8)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// One MLP per attribute.
    Separate,
    /// Shared trunk with one linear head per attribute.
    SingleTrunk,
}

/// Which representation of a latent the classifier reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpace {
    Latent,
    Intermediate,
    Data,
}

impl FromStr for ClassifierMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(Self::Separate),
            "single_trunk" => Ok(Self::SingleTrunk),
            _ => Err(Error::arg(format!("unknown classifier mode '{s}'"))),
        }
    }
}

impl FromStr for InputSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "intermediate" => Ok(Self::Intermediate),
            "data" => Ok(Self::Data),
            _ => Err(Error::arg(format!("unknown input space '{s}'"))),
        }
    }
}

impl fmt::Display for InputSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputSpace::Latent => "latent",
            InputSpace::Intermediate => "intermediate",
            InputSpace::Data => "data",
        })
    }
}

impl InputSpace {
    pub fn dim(self, g: &Generator) -> Result<usize> {
        match self {
            InputSpace::Latent => Ok(g.latent_dim()),
            InputSpace::Data => Ok(g.data_dim()),
            InputSpace::Intermediate => g.intermediate_dim().ok_or_else(|| {
                Error::Capability("this generator has no intermediate layer".into())
            }),
        }
    }

    /// Classifier input for latent `z`.
    pub fn features(self, g: &Generator, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            InputSpace::Latent => Ok(z.to_vec()),
            InputSpace::Data => Ok(g.apply_one(z)),
            InputSpace::Intermediate => g.intermediate_one(z),
        }
    }

    /// Pulls a cotangent on the classifier input back to `z`.
    pub fn pullback(self, g: &Generator, z: &[f64], cotangent: Vec<f64>) -> Result<Vec<f64>> {
        match self {
            InputSpace::Latent => Ok(cotangent),
            InputSpace::Data => Ok(g.vjp_one(z, &cotangent)),
            InputSpace::Intermediate => g.intermediate_vjp_one(z, &cotangent),
        }
    }

    pub fn batch_features(self, g: &Generator, dataset: &Dataset) -> Result<RealArray> {
        match self {
            InputSpace::Latent => Ok(dataset.latent.clone()),
            InputSpace::Data => Ok(dataset.data.clone()),
            InputSpace::Intermediate => {
                let width = self.dim(g)?;
                let rows = par::try_map_indexed(dataset.len(), |i| {
                    g.intermediate_one(dataset.latent.row(i))
                })?;
                RealArray::new(vec![dataset.len(), width], rows.concat())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Heads {
    Separate(Vec<MlpParams>),
    SingleTrunk {
        trunk: MlpParams,
        heads: Vec<MlpParams>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub spec: AttributeSpec,
    pub input_space: InputSpace,
    pub heads: Heads,
}

/// Forward state for the attributes that were evaluated.
pub struct HeadsTrace {
    trunk: Option<MlpTrace>,
    per_head: Vec<Option<MlpTrace>>,
}

impl HeadsTrace {
    pub fn output(&self, attr: usize) -> Option<&[f64]> {
        self.per_head[attr].as_ref().map(MlpTrace::output)
    }
}

impl ClassifierModel {
    /// Freshly initialised model.
    pub fn init(
        spec: &AttributeSpec,
        mode: ClassifierMode,
        input_space: InputSpace,
        input_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let hidden = hidden_widths(input_dim);
        let heads = match mode {
            ClassifierMode::Separate => Heads::Separate(
                spec.iter()
                    .enumerate()
                    .map(|(i, a)| {
                        let mut dims = vec![input_dim];
                        dims.extend(&hidden);
                        dims.push(a.head_width());
                        mlp_init(&dims, seed.wrapping_add(1000 * i as u64))
                    })
                    .collect::<Result<_>>()?,
            ),
            ClassifierMode::SingleTrunk => {
                let mut dims = vec![input_dim];
                dims.extend(&hidden);
                let trunk = mlp_init(&dims, seed)?;
                let last = *hidden.last().unwrap();
                let heads = spec
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        mlp_init(&[last, a.head_width()], seed.wrapping_add(1000 * (i as u64 + 1)))
                    })
                    .collect::<Result<_>>()?;
                Heads::SingleTrunk { trunk, heads }
            }
        };
        let model = Self {
            spec: spec.clone(),
            input_space,
            heads,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn mode(&self) -> ClassifierMode {
        match self.heads {
            Heads::Separate(_) => ClassifierMode::Separate,
            Heads::SingleTrunk { .. } => ClassifierMode::SingleTrunk,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.heads {
            Heads::Separate(nets) => nets[0].input_dim(),
            Heads::SingleTrunk { trunk, .. } => trunk.input_dim(),
        }
    }

    /// Networks in checkpoint order: per-attribute nets, or trunk then heads.
    pub fn networks(&self) -> Vec<&MlpParams> {
        match &self.heads {
            Heads::Separate(nets) => nets.iter().collect(),
            Heads::SingleTrunk { trunk, heads } => std::iter::once(trunk).chain(heads).collect(),
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut MlpParams> {
        match &mut self.heads {
            Heads::Separate(nets) => nets.iter_mut().collect(),
            Heads::SingleTrunk { trunk, heads } => {
                std::iter::once(trunk).chain(heads.iter_mut()).collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.spec.len();
        match &self.heads {
            Heads::Separate(nets) => {
                if nets.len() != n {
                    return Err(Error::arg("one network per attribute is required"));
                }
                for (i, (net, a)) in nets.iter().zip(self.spec.iter()).enumerate() {
                    net.validate()?;
                    if net.output_dim() != a.head_width() {
                        return Err(Error::arg(format!(
                            "head {i} has width {}, attribute '{}' needs {}",
                            net.output_dim(),
                            a.name,
                            a.head_width()
                        )));
                    }
                    if net.input_dim() != nets[0].input_dim() {
                        return Err(Error::arg("heads disagree on input width"));
                    }
                }
            }
            Heads::SingleTrunk { trunk, heads } => {
                trunk.validate()?;
                if heads.len() != n {
                    return Err(Error::arg("one head per attribute is required"));
                }
                for (i, (h, a)) in heads.iter().zip(self.spec.iter()).enumerate() {
                    h.validate()?;
                    if h.input_dim() != trunk.output_dim() || h.output_dim() != a.head_width() {
                        return Err(Error::arg(format!("head {i} does not fit the trunk/spec")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Raw outputs (logits or scalar predictions) of every head.
    pub fn heads_one(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match &self.heads {
            Heads::Separate(nets) => nets.iter().map(|n| n.forward_one(x)).collect(),
            Heads::SingleTrunk { trunk, heads } => {
                let shared: Vec<f64> = trunk.forward_one(x).into_iter().map(leaky).collect();
                heads.iter().map(|h| h.forward_one(&shared)).collect()
            }
        }
    }

    /// Forward pass of the heads flagged in `needed`, keeping traces.
    pub fn trace(&self, x: &[f64], needed: &[bool]) -> HeadsTrace {
        match &self.heads {
            Heads::Separate(nets) => HeadsTrace {
                trunk: None,
                per_head: nets
                    .iter()
                    .zip(needed)
                    .map(|(n, &want)| want.then(|| n.trace(x)))
                    .collect(),
            },
            Heads::SingleTrunk { trunk, heads } => {
                let t = trunk.trace(x);
                let shared: Vec<f64> = t.output().iter().map(|&v| leaky(v)).collect();
                HeadsTrace {
                    per_head: heads
                        .iter()
                        .zip(needed)
                        .map(|(h, &want)| want.then(|| h.trace(&shared)))
                        .collect(),
                    trunk: Some(t),
                }
            }
        }
    }

    /// Gradient w.r.t. the classifier input of `Σ_i ⟨cot_i, f_i(x)⟩`.
    pub fn input_vjp(&self, trace: &HeadsTrace, cotangents: &[Option<Vec<f64>>]) -> Vec<f64> {
        let dim = self.input_dim();
        match &self.heads {
            Heads::Separate(nets) => {
                let mut grad = vec![0.0; dim];
                for ((net, t), cot) in nets.iter().zip(&trace.per_head).zip(cotangents) {
                    if let (Some(t), Some(c)) = (t, cot) {
                        for (g, v) in grad.iter_mut().zip(net.backward(t, c, None)) {
                            *g += v;
                        }
                    }
                }
                grad
            }
            Heads::SingleTrunk { trunk, heads } => {
                let ttrace = trace.trunk.as_ref().expect("single-trunk trace");
                let mut shared_grad = vec![0.0; trunk.output_dim()];
                let mut any = false;
                for ((h, t), cot) in heads.iter().zip(&trace.per_head).zip(cotangents) {
                    if let (Some(t), Some(c)) = (t, cot) {
                        any = true;
                        for (g, v) in shared_grad.iter_mut().zip(h.backward(t, c, None)) {
                            *g += v;
                        }
                    }
                }
                if !any {
                    return vec![0.0; dim];
                }
                for (g, &p) in shared_grad.iter_mut().zip(ttrace.output()) {
                    if p <= 0.0 {
                        *g *= LEAKY_SLOPE;
                    }
                }
                trunk.backward(ttrace, &shared_grad, None)
            }
        }
    }
}

/// Per-attribute raw outputs for a batch: entry `i` is `[batch, head_width_i]`.
pub fn predict_heads(model: &ClassifierModel, x: &RealArray) -> Result<Vec<RealArray>> {
    x.expect_batch(model.input_dim(), "predict_heads input")?;
    let rows = par::map_indexed(x.rows(), |r| model.heads_one(x.row(r)));
    model
        .spec
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let data = rows.iter().flat_map(|h| h[i].iter().copied()).collect();
            RealArray::new(vec![x.rows(), a.head_width()], data)
        })
        .collect()
}

/// Point prediction from a raw head output: argmax category or the scalar.
pub fn decode_head(kind: &AttributeKind, output: &[f64]) -> AttrValue {
    match kind {
        AttributeKind::Discrete { .. } => AttrValue::Category(argmax(output)),
        AttributeKind::Continuous => AttrValue::Level(output[0]),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-attribute agreement between predictions and labels: exact-match rate
/// for discrete heads, mean `1 - |f - c|` for continuous ones.
pub fn label_accuracy(
    model: &ClassifierModel,
    inputs: &RealArray,
    labels: &[Vec<AttrValue>],
) -> Result<Vec<f64>> {
    let preds = predict_heads(model, inputs)?;
    let n = labels.len() as f64;
    Ok(model
        .spec
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let total: f64 = (0..labels.len())
                .map(|r| match (decode_head(&a.kind, preds[i].row(r)), labels[r][i]) {
                    (AttrValue::Category(p), AttrValue::Category(c)) => f64::from(u8::from(p == c)),
                    (AttrValue::Level(p), AttrValue::Level(c)) => 1.0 - (p - c).abs(),
                    _ => 0.0,
                })
                .sum();
            total / n
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this factor at each milestone epoch.
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
    pub seed: u64,
    pub mode: ClassifierMode,
    pub input_space: InputSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            decay_factor: 0.1,
            milestones: vec![60, 90],
            seed: 0,
            mode: ClassifierMode::Separate,
            input_space: InputSpace::Latent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::arg("learning_rate and decay_factor must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("milestones must be strictly increasing"));
        }
        if self.milestones.iter().any(|&m| m == 0 || m >= self.epochs) {
            return Err(Error::arg("milestones must fall inside (0, epochs)"));
        }
        Ok(())
    }

    /// Staircase schedule.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch (summed over heads).
    pub epoch_losses: Vec<f64>,
    /// Per-attribute accuracy of the final model on the training set.
    pub train_accuracy: Vec<f64>,
}

impl TrainReport {
    pub fn aggregate_accuracy(&self) -> f64 {
        self.train_accuracy.iter().sum::<f64>() / self.train_accuracy.len() as f64
    }
}

fn check_labels(spec: &AttributeSpec, labels: &[Vec<AttrValue>]) -> Result<()> {
    for (r, row) in labels.iter().enumerate() {
        if row.len() != spec.len() {
            return Err(Error::Data(format!("row {r}: wrong number of labels")));
        }
        for (a, &v) in spec.iter().zip(row) {
            let ok = match (&a.kind, v) {
                (AttributeKind::Discrete { categories }, AttrValue::Category(c)) => c < *categories,
                (AttributeKind::Continuous, AttrValue::Level(l)) => (0.0..=1.0).contains(&l),
                _ => false,
            };
            if !ok {
                return Err(Error::Data(format!(
                    "row {r}: label {v} is outside the domain of '{}'",
                    a.name
                )));
            }
        }
    }
    Ok(())
}

/// Loss of one head on one sample and its gradient w.r.t. the head output.
fn head_loss(kind: &AttributeKind, output: &[f64], label: AttrValue) -> (f64, Vec<f64>) {
    match (kind, label) {
        (AttributeKind::Discrete { .. }, AttrValue::Category(c)) => {
            let p = softmax(output);
            let loss = -(p[c].max(f64::MIN_POSITIVE)).ln();
            let mut g = p;
            g[c] -= 1.0;
            (loss, g)
        }
        (AttributeKind::Continuous, AttrValue::Level(c)) => {
            let r = output[0] - c;
            (r * r, vec![2.0 * r])
        }
        _ => unreachable!("labels are validated before training"),
    }
}

/// Trains the classifier on `dataset` with cross-entropy (discrete heads) and
/// squared error (continuous heads), Adam and a staircase learning rate.
pub fn train_classifier(
    dataset: &Dataset,
    g: &Generator,
    spec: &AttributeSpec,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    check_labels(spec, &dataset.labels)?;
    let inputs = cfg.input_space.batch_features(g, dataset)?;
    let mut model = ClassifierModel::init(
        spec,
        cfg.mode,
        cfg.input_space,
        inputs.cols(),
        cfg.seed,
    )?;
    let epoch_losses = match &mut model.heads {
        Heads::Separate(nets) => {
            // Heads share nothing, so each one is an independent problem.
            let trained = par::try_map_indexed(nets.len(), |i| {
                let mut net = nets[i].clone();
                let losses = fit_separate(&mut net, i, spec, &inputs, &dataset.labels, cfg)?;
                Ok::<_, Error>((net, losses))
            })?;
            let mut total = vec![0.0; cfg.epochs];
            for (slot, (net, losses)) in nets.iter_mut().zip(trained) {
                *slot = net;
                for (t, l) in total.iter_mut().zip(losses) {
                    *t += l;
                }
            }
            total
        }
        Heads::SingleTrunk { trunk, heads } => {
            fit_single_trunk(trunk, heads, spec, &inputs, &dataset.labels, cfg)?
        }
    };
    let train_accuracy = label_accuracy(&model, &inputs, &dataset.labels)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}

fn fit_separate(
    net: &mut MlpParams,
    attr: usize,
    spec: &AttributeSpec,
    inputs: &RealArray,
    labels: &[Vec<AttrValue>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let kind = &spec.get(attr).kind;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Stream::new(cfg.seed);
    let mut adam = AdamState::for_mlp(net, cfg.learning_rate);
    let mut grads = MlpGrads::zeros_like(net);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.learning_rate = cfg.learning_rate_at(epoch);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &r in batch {
                let trace = net.trace(inputs.row(r));
                let (loss, mut g) = head_loss(kind, trace.output(), labels[r][attr]);
                epoch_loss += loss;
                g.iter_mut().for_each(|v| *v *= scale);
                net.backward(&trace, &g, Some(&mut grads));
            }
            adam_step(&mut adam, net, &grads)?;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss diverged at epoch {epoch} (attribute {attr})"
            )));
        }
        losses.push(mean);
    }
    Ok(losses)
}

fn fit_single_trunk(
    trunk: &mut MlpParams,
    heads: &mut [MlpParams],
    spec: &AttributeSpec,
    inputs: &RealArray,
    labels: &[Vec<AttrValue>],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Stream::new(cfg.seed);
    let mut trunk_adam = AdamState::for_mlp(trunk, cfg.learning_rate);
    let mut head_adams: Vec<AdamState> = heads
        .iter()
        .map(|h| AdamState::for_mlp(h, cfg.learning_rate))
        .collect();
    let mut trunk_grads = MlpGrads::zeros_like(trunk);
    let mut head_grads: Vec<MlpGrads> = heads.iter().map(MlpGrads::zeros_like).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        trunk_adam.learning_rate = lr;
        head_adams.iter_mut().for_each(|a| a.learning_rate = lr);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            trunk_grads.fill_zero();
            head_grads.iter_mut().for_each(MlpGrads::fill_zero);
            let scale = 1.0 / batch.len() as f64;
            for &r in batch {
                let t = trunk.trace(inputs.row(r));
                let shared: Vec<f64> = t.output().iter().map(|&v| leaky(v)).collect();
                let mut shared_grad = vec![0.0; shared.len()];
                for (i, head) in heads.iter().enumerate() {
                    let ht = head.trace(&shared);
                    let (loss, mut g) = head_loss(&spec.get(i).kind, ht.output(), labels[r][i]);
                    epoch_loss += loss;
                    g.iter_mut().for_each(|v| *v *= scale);
                    let back = head.backward(&ht, &g, Some(&mut head_grads[i]));
                    for (s, b) in shared_grad.iter_mut().zip(back) {
                        *s += b;
                    }
                }
                for (s, &p) in shared_grad.iter_mut().zip(t.output()) {
                    if p <= 0.0 {
                        *s *= LEAKY_SLOPE;
                    }
                }
                trunk.backward(&t, &shared_grad, Some(&mut trunk_grads));
            }
            adam_step(&mut trunk_adam, trunk, &trunk_grads)?;
            for ((h, a), g) in heads.iter_mut().zip(&mut head_adams).zip(&head_grads) {
                adam_step(a, h, g)?;
            }
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        losses.push(mean);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ActivationDoc {
    kind: String,
    negative_slope: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// On-disk layout; field order is the serialisation order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    spec: AttributeSpec,
    mode: ClassifierMode,
    input_space: InputSpace,
    layer_dims: Vec<Vec<usize>>,
    activation: ActivationDoc,
    weights: Vec<Vec<LayerDoc>>,
}

fn net_to_doc(net: &MlpParams) -> Vec<LayerDoc> {
    net.weights
        .iter()
        .zip(&net.biases)
        .map(|(w, b)| LayerDoc {
            weights: w.row_iter().map(<[f64]>::to_vec).collect(),
            bias: b.data().to_vec(),
        })
        .collect()
}

fn net_from_doc(index: usize, dims: &[usize], layers: Vec<LayerDoc>) -> Result<MlpParams> {
    let loc = |s: String| format!("weights[{index}]{s}");
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::format(
            format!("layer_dims[{index}]"),
            format!("dim inconsistency: invalid widths {dims:?}"),
        ));
    }
    if layers.len() != dims.len() - 1 {
        return Err(Error::format(
            loc(String::new()),
            format!(
                "dim inconsistency: {} layers stored, layer_dims[{index}] implies {}",
                layers.len(),
                dims.len() - 1
            ),
        ));
    }
    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for (k, layer) in layers.into_iter().enumerate() {
        let (fan_in, fan_out) = (dims[k], dims[k + 1]);
        if layer.weights.len() != fan_out {
            return Err(Error::format(
                loc(format!("[{k}].weights")),
                format!(
                    "dim inconsistency: {} rows stored, layer_dims[{index}][{}] = {fan_out}",
                    layer.weights.len(),
                    k + 1
                ),
            ));
        }
        if let Some(r) = layer.weights.iter().position(|row| row.len() != fan_in) {
            return Err(Error::format(
                loc(format!("[{k}].weights[{r}]")),
                format!(
                    "dim inconsistency: {} columns stored, layer_dims[{index}][{k}] = {fan_in}",
                    layer.weights[r].len()
                ),
            ));
        }
        if layer.bias.len() != fan_out {
            return Err(Error::format(
                loc(format!("[{k}].bias")),
                format!(
                    "dim inconsistency: {} entries stored, layer_dims[{index}][{}] = {fan_out}",
                    layer.bias.len(),
                    k + 1
                ),
            ));
        }
        weights.push(RealArray::new(vec![fan_out, fan_in], layer.weights.concat())?);
        biases.push(RealArray::vector(layer.bias));
    }
    Ok(MlpParams {
        layer_dims: dims.to_vec(),
        weights,
        biases,
    })
}

/// Serialises a model as a self-describing JSON document.
pub fn checkpoint_to_string(model: &ClassifierModel) -> Result<String> {
    let nets = model.networks();
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        mode: model.mode(),
        input_space: model.input_space,
        layer_dims: nets.iter().map(|n| n.layer_dims.clone()).collect(),
        activation: ActivationDoc {
            kind: "leaky_relu".into(),
            negative_slope: LEAKY_SLOPE,
        },
        weights: nets.iter().map(|n| net_to_doc(n)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Numeric(format!("cannot encode checkpoint: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn checkpoint_from_str(text: &str) -> Result<ClassifierModel> {
    let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| {
        Error::format(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "format_version",
            format!(
                "version mismatch: file has {}, this build reads {CHECKPOINT_VERSION}",
                doc.format_version
            ),
        ));
    }
    if doc.activation.kind != "leaky_relu" || doc.activation.negative_slope != LEAKY_SLOPE {
        return Err(Error::format(
            "activation",
            format!(
                "unsupported activation {} (slope {})",
                doc.activation.kind, doc.activation.negative_slope
            ),
        ));
    }
    if doc.layer_dims.len() != doc.weights.len() {
        return Err(Error::format(
            "layer_dims",
            format!(
                "dim inconsistency: {} networks declared, {} stored",
                doc.layer_dims.len(),
                doc.weights.len()
            ),
        ));
    }
    let nets = doc
        .layer_dims
        .iter()
        .zip(doc.weights)
        .enumerate()
        .map(|(i, (dims, layers))| net_from_doc(i, dims, layers))
        .collect::<Result<Vec<_>>>()?;
    let heads = match doc.mode {
        ClassifierMode::Separate => Heads::Separate(nets),
        ClassifierMode::SingleTrunk => {
            let mut it = nets.into_iter();
            let trunk = it
                .next()
                .ok_or_else(|| Error::format("weights", "single-trunk model without a trunk"))?;
            Heads::SingleTrunk {
                trunk,
                heads: it.collect(),
            }
        }
    };
    let model = ClassifierModel {
        spec: doc.spec,
        input_space: doc.input_space,
        heads,
    };
    model
        .validate()
        .map_err(|e| Error::format("layer_dims", format!("dim inconsistency: {e}")))?;
    Ok(model)
}

pub fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
