//! Synthetic worlds: a fixed differentiable generator `g: z -> x`, analytic
//! attribute rules on `x`, and seeded `(z, x, c)` dataset synthesis.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{condition_number, dot, leaky, mlp_init, MlpParams, RealArray};
use crate::par;
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttributeKind {
    Discrete { categories: usize },
    /// Real value normalised to [0, 1].
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
}

impl Attribute {
    pub fn discrete(name: &str, categories: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Discrete { categories },
        }
    }

    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Continuous,
        }
    }

    /// Output width of a classifier head for this attribute.
    pub fn head_width(&self) -> usize {
        match self.kind {
            AttributeKind::Discrete { categories } => categories,
            AttributeKind::Continuous => 1,
        }
    }

    pub fn check_value(&self, v: AttrValue) -> Result<()> {
        match (&self.kind, v) {
            (AttributeKind::Discrete { categories }, AttrValue::Category(c)) if c < *categories => {
                Ok(())
            }
            (AttributeKind::Continuous, AttrValue::Level(l)) if (0.0..=1.0).contains(&l) => Ok(()),
            _ => Err(Error::arg(format!(
                "value {v} is outside the domain of attribute '{}'",
                self.name
            ))),
        }
    }
}

/// Ordered attribute declarations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSpec {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeSpec {
    type Error = Error;

    fn try_from(attributes: Vec<Attribute>) -> Result<Self> {
        Self::new(attributes)
    }
}

impl From<AttributeSpec> for Vec<Attribute> {
    fn from(spec: AttributeSpec) -> Self {
        spec.attributes
    }
}

impl AttributeSpec {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::arg("an attribute spec needs at least one attribute"));
        }
        for (i, a) in attributes.iter().enumerate() {
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::arg(format!("duplicate attribute name '{}'", a.name)));
            }
            if let AttributeKind::Discrete { categories } = a.kind {
                if categories < 2 {
                    return Err(Error::arg(format!(
                        "attribute '{}' needs at least 2 categories",
                        a.name
                    )));
                }
            }
        }
        Ok(Self { attributes })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn get(&self, i: usize) -> &Attribute {
        &self.attributes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Draws one value uniformly from each attribute's domain.
    pub fn uniform_code(&self, rng: &mut Stream) -> AttributeCode {
        let entries = self
            .attributes
            .iter()
            .map(|a| {
                Some(match a.kind {
                    AttributeKind::Discrete { categories } => {
                        AttrValue::Category(rng.below(categories))
                    }
                    AttributeKind::Continuous => AttrValue::Level(rng.uniform()),
                })
            })
            .collect();
        AttributeCode { entries }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Category(usize),
    Level(f64),
}

impl AttrValue {
    pub fn as_f64(self) -> f64 {
        match self {
            AttrValue::Category(c) => c as f64,
            AttrValue::Level(l) => l,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Category(c) => write!(f, "{c}"),
            AttrValue::Level(l) => write!(f, "{l}"),
        }
    }
}

/// A (possibly partial) assignment of attribute values; absent entries are
/// unconditioned.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCode {
    entries: Vec<Option<AttrValue>>,
}

impl AttributeCode {
    pub fn new(spec: &AttributeSpec, entries: Vec<Option<AttrValue>>) -> Result<Self> {
        if entries.len() != spec.len() {
            return Err(Error::arg(format!(
                "code has {} entries, spec has {} attributes",
                entries.len(),
                spec.len()
            )));
        }
        for (a, e) in spec.iter().zip(&entries) {
            if let Some(v) = e {
                a.check_value(*v)?;
            }
        }
        Ok(Self { entries })
    }

    pub fn empty(len: usize) -> Self {
        Self {
            entries: vec![None; len],
        }
    }

    pub fn from_full(values: &[AttrValue]) -> Self {
        Self {
            entries: values.iter().copied().map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<AttrValue> {
        self.entries[i]
    }

    pub fn set(&mut self, i: usize, v: Option<AttrValue>) {
        self.entries[i] = v;
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, AttrValue)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|v| (i, v)))
    }

    /// True when every present entry equals the corresponding label.
    pub fn matches(&self, labels: &[AttrValue]) -> bool {
        self.present().all(|(i, v)| labels[i] == v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Identity,
    Linear,
    SmallMlp,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            "small_mlp" | "mlp" => Ok(Self::SmallMlp),
            other => Err(Error::arg(format!(
                "unsupported generator kind '{other}' (expected identity, linear or small_mlp)"
            ))),
        }
    }
}

/// Fixed generator `x = g(z)` with a standard-Gaussian prior on `z`.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Identity { dim: usize },
    /// `x = A z + b` with `A` stored `[data_dim, latent_dim]`.
    Linear { matrix: RealArray, offset: Vec<f64> },
    SmallMlp(MlpParams),
}

/// Random `Linear` matrices are resampled until their condition number is
/// below this bound.
pub const MAX_LINEAR_CONDITION: f64 = 10.0;

pub fn make_generator(
    kind: GeneratorKind,
    latent_dim: usize,
    data_dim: usize,
    seed: u64,
) -> Result<Generator> {
    if latent_dim == 0 || data_dim == 0 {
        return Err(Error::arg("generator dimensions must be positive"));
    }
    match kind {
        GeneratorKind::Identity => {
            if latent_dim != data_dim {
                return Err(Error::arg("identity generator needs latent_dim == data_dim"));
            }
            Ok(Generator::Identity { dim: latent_dim })
        }
        GeneratorKind::Linear => {
            if data_dim < latent_dim {
                return Err(Error::arg("linear generator needs data_dim >= latent_dim"));
            }
            let mut rng = Stream::new(seed);
            let scale = 1.0 / (latent_dim as f64).sqrt();
            for _ in 0..100_000 {
                let data = (0..data_dim * latent_dim)
                    .map(|_| scale * rng.normal())
                    .collect();
                let matrix = RealArray::new(vec![data_dim, latent_dim], data)?;
                if condition_number(&matrix)? < MAX_LINEAR_CONDITION {
                    return Generator::linear(matrix, vec![0.0; data_dim]);
                }
            }
            Err(Error::Numeric(
                "could not draw a well-conditioned linear generator".into(),
            ))
        }
        GeneratorKind::SmallMlp => {
            let hidden = (4 * latent_dim.max(data_dim)).max(32);
            Ok(Generator::SmallMlp(mlp_init(
                &[latent_dim, hidden, data_dim],
                seed,
            )?))
        }
    }
}

impl Generator {
    pub fn linear(matrix: RealArray, offset: Vec<f64>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.shape()[0] != offset.len() {
            return Err(Error::arg("linear generator: matrix/offset shapes disagree"));
        }
        Ok(Generator::Linear { matrix, offset })
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Generator::Identity { dim } => *dim,
            Generator::Linear { matrix, .. } => matrix.shape()[1],
            Generator::SmallMlp(p) => p.input_dim(),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Generator::Identity { dim } => *dim,
            Generator::Linear { matrix, .. } => matrix.shape()[0],
            Generator::SmallMlp(p) => p.output_dim(),
        }
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Identity { .. } => GeneratorKind::Identity,
            Generator::Linear { .. } => GeneratorKind::Linear,
            Generator::SmallMlp(_) => GeneratorKind::SmallMlp,
        }
    }

    pub fn apply_one(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Generator::Identity { .. } => z.to_vec(),
            Generator::Linear { matrix, offset } => {
                let k = matrix.shape()[1];
                offset
                    .iter()
                    .enumerate()
                    .map(|(r, b)| b + dot(&matrix.data()[r * k..(r + 1) * k], z))
                    .collect()
            }
            Generator::SmallMlp(p) => p.forward_one(z),
        }
    }

    /// `Jᵀ cotangent` at `z`.
    pub fn vjp_one(&self, z: &[f64], cotangent: &[f64]) -> Vec<f64> {
        match self {
            Generator::Identity { .. } => cotangent.to_vec(),
            Generator::Linear { matrix, .. } => {
                let k = matrix.shape()[1];
                let mut out = vec![0.0; k];
                for (r, &c) in cotangent.iter().enumerate() {
                    for (o, &a) in out.iter_mut().zip(&matrix.data()[r * k..(r + 1) * k]) {
                        *o += a * c;
                    }
                }
                out
            }
            Generator::SmallMlp(p) => p.input_vjp(z, cotangent),
        }
    }

    pub fn apply(&self, z: &RealArray) -> Result<RealArray> {
        z.expect_batch(self.latent_dim(), "generator input")?;
        let data: Vec<f64> = z.row_iter().flat_map(|r| self.apply_one(r)).collect();
        RealArray::new(vec![z.rows(), self.data_dim()], data)
    }

    pub fn vjp(&self, z: &RealArray, cotangent: &RealArray) -> Result<RealArray> {
        z.expect_batch(self.latent_dim(), "generator vjp input")?;
        cotangent.expect_batch(self.data_dim(), "generator vjp cotangent")?;
        if z.rows() != cotangent.rows() {
            return Err(Error::arg("generator vjp: batch sizes differ"));
        }
        let data: Vec<f64> = z
            .row_iter()
            .zip(cotangent.row_iter())
            .flat_map(|(zr, cr)| self.vjp_one(zr, cr))
            .collect();
        RealArray::new(z.shape().to_vec(), data)
    }

    /// Width of the intermediate representation, if the generator has one.
    pub fn intermediate_dim(&self) -> Option<usize> {
        match self {
            Generator::SmallMlp(p) if p.num_layers() >= 2 => Some(p.layer_dims[1]),
            _ => None,
        }
    }

    /// Post-activation output of the first hidden layer.
    pub fn intermediate_one(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Generator::SmallMlp(p) if p.num_layers() >= 2 => {
                let k = p.layer_dims[0];
                Ok(p.biases[0]
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(o, b)| leaky(b + dot(&p.weights[0].data()[o * k..(o + 1) * k], z)))
                    .collect())
            }
            _ => Err(Error::Capability(
                "only small_mlp generators expose an intermediate layer".into(),
            )),
        }
    }

    pub fn intermediate_vjp_one(&self, z: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        match self {
            Generator::SmallMlp(p) if p.num_layers() >= 2 => {
                let k = p.layer_dims[0];
                let w = p.weights[0].data();
                let mut out = vec![0.0; k];
                for (o, (&c, b)) in cotangent.iter().zip(p.biases[0].data()).enumerate() {
                    let row = &w[o * k..(o + 1) * k];
                    let pre = b + dot(row, z);
                    let d = c * if pre > 0.0 { 1.0 } else { crate::ndmath::LEAKY_SLOPE };
                    for (oi, &wi) in out.iter_mut().zip(row) {
                        *oi += d * wi;
                    }
                }
                Ok(out)
            }
            _ => Err(Error::Capability(
                "only small_mlp generators expose an intermediate layer".into(),
            )),
        }
    }
}

/// Standardised linear functional `(w·x - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Functional {
    pub weights: Vec<f64>,
    pub offset: f64,
    pub scale: f64,
}

impl Functional {
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut weights = vec![0.0; dim];
        weights[axis] = 1.0;
        Self {
            weights,
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (dot(&self.weights, x) - self.offset) / self.scale
    }
}

/// Analytic labelling rule for one attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TruthRule {
    /// Category 1 when the functional is positive.
    HalfSpace { functional: Functional },
    /// Category `[u > 0] + 2 [v > 0]`.
    Quadrant { u: Functional, v: Functional },
    /// Level `1 / (1 + exp(-gain * functional))`.
    Squash { functional: Functional, gain: f64 },
}

impl TruthRule {
    fn expected_kind(&self) -> AttributeKind {
        match self {
            TruthRule::HalfSpace { .. } => AttributeKind::Discrete { categories: 2 },
            TruthRule::Quadrant { .. } => AttributeKind::Discrete { categories: 4 },
            TruthRule::Squash { .. } => AttributeKind::Continuous,
        }
    }

    pub fn label(&self, x: &[f64]) -> AttrValue {
        match self {
            TruthRule::HalfSpace { functional } => {
                AttrValue::Category(usize::from(functional.value(x) > 0.0))
            }
            TruthRule::Quadrant { u, v } => AttrValue::Category(
                usize::from(u.value(x) > 0.0) + 2 * usize::from(v.value(x) > 0.0),
            ),
            TruthRule::Squash { functional, gain } => {
                AttrValue::Level(1.0 / (1.0 + (-gain * functional.value(x)).exp()))
            }
        }
    }

    fn functionals_mut(&mut self) -> Vec<&mut Functional> {
        match self {
            TruthRule::HalfSpace { functional } | TruthRule::Squash { functional, .. } => {
                vec![functional]
            }
            TruthRule::Quadrant { u, v } => vec![u, v],
        }
    }
}

/// Ground-truth labeller standing in for an external attribute annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthOracle {
    pub spec: AttributeSpec,
    pub rules: Vec<TruthRule>,
}

impl TruthOracle {
    pub fn new(spec: AttributeSpec, rules: Vec<TruthRule>) -> Result<Self> {
        if spec.len() != rules.len() {
            return Err(Error::arg("one truth rule per attribute is required"));
        }
        for (a, r) in spec.iter().zip(&rules) {
            if a.kind != r.expected_kind() {
                return Err(Error::arg(format!(
                    "rule for '{}' does not produce values of its declared kind",
                    a.name
                )));
            }
        }
        Ok(Self { spec, rules })
    }

    pub fn label(&self, x: &[f64]) -> Vec<AttrValue> {
        self.rules.iter().map(|r| r.label(x)).collect()
    }

    /// Labels of `g(z)` for each latent row.
    pub fn label_latents(&self, g: &Generator, z: &RealArray) -> Vec<Vec<AttrValue>> {
        par::map_indexed(z.rows(), |i| self.label(&g.apply_one(z.row(i))))
    }
}

/// Generator, attribute declarations and truth rules bundled together.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: AttributeSpec,
    pub generator: Generator,
    pub truth: TruthOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub generator: GeneratorKind,
    pub seed: u64,
}

impl WorldConfig {
    pub fn plane() -> Self {
        Self {
            latent_dim: 2,
            data_dim: 2,
            generator: GeneratorKind::Linear,
            seed: 11,
        }
    }

    pub fn bench8() -> Self {
        Self {
            latent_dim: 8,
            data_dim: 8,
            generator: GeneratorKind::Linear,
            seed: 11,
        }
    }
}

/// Gain of the logistic squash used by the continuous benchmark attribute.
pub const SQUASH_GAIN: f64 = 2.0;
const CALIBRATION_DRAWS: usize = 20_000;

impl World {
    /// Three-attribute benchmark world.
    ///
    /// `attr0` is a binary half-space, `attr1` the quadrant of two functionals
    /// and `attr2` a logistic squash of a fourth one. Functional `k` reads data
    /// axis `k mod data_dim`, and each functional is standardised to zero mean
    /// and unit variance under the prior by Monte-Carlo calibration. With
    /// `data_dim < 4` some attributes share an axis and are therefore coupled.
    pub fn benchmark(cfg: &WorldConfig) -> Result<Self> {
        let generator = make_generator(cfg.generator, cfg.latent_dim, cfg.data_dim, cfg.seed)?;
        let spec = AttributeSpec::new(vec![
            Attribute::discrete("attr0", 2),
            Attribute::discrete("attr1", 4),
            Attribute::continuous("attr2"),
        ])?;
        let d = cfg.data_dim;
        let mut rules = vec![
            TruthRule::HalfSpace {
                functional: Functional::axis(d, 0),
            },
            TruthRule::Quadrant {
                u: Functional::axis(d, 1 % d),
                v: Functional::axis(d, 2 % d),
            },
            TruthRule::Squash {
                functional: Functional::axis(d, 3 % d),
                gain: SQUASH_GAIN,
            },
        ];
        calibrate(&generator, &mut rules, cfg.seed ^ 0x5eed_ca1b)?;
        let truth = TruthOracle::new(spec.clone(), rules)?;
        Ok(Self {
            spec,
            generator,
            truth,
        })
    }

    /// Single binary attribute `attr0 = [x_0 > 0]` over an identity generator.
    pub fn half_plane(dim: usize) -> Result<Self> {
        let spec = AttributeSpec::new(vec![Attribute::discrete("attr0", 2)])?;
        let truth = TruthOracle::new(
            spec.clone(),
            vec![TruthRule::HalfSpace {
                functional: Functional::axis(dim, 0),
            }],
        )?;
        Ok(Self {
            spec,
            generator: make_generator(GeneratorKind::Identity, dim, dim, 0)?,
            truth,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.latent_dim()
    }
}

fn calibrate(g: &Generator, rules: &mut [TruthRule], seed: u64) -> Result<()> {
    let mut rng = Stream::new(seed);
    let xs: Vec<Vec<f64>> = (0..CALIBRATION_DRAWS)
        .map(|_| g.apply_one(&rng.normal_vec(g.latent_dim())))
        .collect();
    for rule in rules.iter_mut() {
        for f in rule.functionals_mut() {
            let vals: Vec<f64> = xs.iter().map(|x| dot(&f.weights, x)).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var <= 1e-24 {
                return Err(Error::Numeric(
                    "attribute functional is constant under the prior".into(),
                ));
            }
            f.offset = mean;
            f.scale = var.sqrt();
        }
    }
    Ok(())
}

/// Synthesised `(z, x, c)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub latent: RealArray,
    pub data: RealArray,
    pub labels: Vec<Vec<AttrValue>>,
}

const SYNTH_CHUNK: usize = 1024;

/// Draws `count` latents from N(0, I), maps them through `g` and labels
/// them with `oracle`. Chunk `k` uses stream `seed + k`.
pub fn synthesize_pairs(
    g: &Generator,
    oracle: &TruthOracle,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::arg("synthesize_pairs: count must be positive"));
    }
    let dz = g.latent_dim();
    let chunks = count.div_ceil(SYNTH_CHUNK);
    let parts = par::map_indexed(chunks, |k| {
        let n = SYNTH_CHUNK.min(count - k * SYNTH_CHUNK);
        let mut rng = Stream::for_item(seed, k as u64);
        let mut zs = Vec::with_capacity(n * dz);
        let mut xs = Vec::new();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z = rng.normal_vec(dz);
            let x = g.apply_one(&z);
            labels.push(oracle.label(&x));
            zs.extend_from_slice(&z);
            xs.extend(x);
        }
        (zs, xs, labels)
    });
    let mut zs = Vec::with_capacity(count * dz);
    let mut xs = Vec::with_capacity(count * g.data_dim());
    let mut labels = Vec::with_capacity(count);
    for (z, x, l) in parts {
        zs.extend(z);
        xs.extend(x);
        labels.extend(l);
    }
    Ok(Dataset {
        latent: RealArray::new(vec![count, dz], zs)?,
        data: RealArray::new(vec![count, g.data_dim()], xs)?,
        labels,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Drops every row whose labels match all present entries of `holdout`.
    /// Only discrete entries may be held out.
    pub fn without(&self, spec: &AttributeSpec, holdout: &AttributeCode) -> Result<Dataset> {
        if holdout.len() != spec.len() {
            return Err(Error::arg("holdout code length does not match the attribute spec"));
        }
        if holdout.present().next().is_none() {
            return Err(Error::arg("holdout code is empty"));
        }
        if holdout
            .present()
            .any(|(_, v)| matches!(v, AttrValue::Level(_)))
        {
            return Err(Error::arg("only discrete attributes can be held out"));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !holdout.matches(&self.labels[i]))
            .collect();
        if keep.is_empty() {
            return Err(Error::arg("holdout removes every row"));
        }
        Ok(self.select(&keep))
    }

    /// Replaces each discrete label by a uniformly drawn *different* category
    /// with probability `rate`.
    pub fn with_label_noise(&self, spec: &AttributeSpec, rate: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::arg("label noise rate must lie in [0, 1]"));
        }
        let mut out = self.clone();
        if rate == 0.0 {
            return Ok(out);
        }
        let mut rng = Stream::new(seed);
        for labels in out.labels.iter_mut() {
            for (a, v) in spec.iter().zip(labels.iter_mut()) {
                if let (AttributeKind::Discrete { categories }, AttrValue::Category(c)) =
                    (&a.kind, *v)
                {
                    if rng.uniform() < rate {
                        let shift = 1 + rng.below(categories - 1);
                        *v = AttrValue::Category((c + shift) % categories);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let dz = self.latent.cols();
        let dx = self.data.cols();
        let latent = rows.iter().flat_map(|&i| self.latent.row(i).to_vec()).collect();
        let data = rows.iter().flat_map(|&i| self.data.row(i).to_vec()).collect();
        Dataset {
            latent: RealArray::new(vec![rows.len(), dz], latent).expect("consistent shape"),
            data: RealArray::new(vec![rows.len(), dx], data).expect("consistent shape"),
            labels: rows.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// CSV with columns `z_*, x_*, <attribute names>`.
    pub fn write_csv<W: Write>(&self, spec: &AttributeSpec, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.latent.cols()).map(|i| format!("z_{i}")).collect();
        header.extend((0..self.data.cols()).map(|i| format!("x_{i}")));
        header.extend(spec.iter().map(|a| a.name.clone()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.latent.row(i).iter().map(f64::to_string).collect();
            rec.extend(self.data.row(i).iter().map(f64::to_string));
            rec.extend(self.labels[i].iter().map(AttrValue::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_generator_is_identity() {
        let g = make_generator(GeneratorKind::Identity, 2, 2, 0).unwrap();
        assert_eq!(g.apply_one(&[0.3, -7.0]), vec![0.3, -7.0]);
        assert_eq!(g.vjp_one(&[0.3, -7.0], &[1.5, 2.5]), vec![1.5, 2.5]);
    }

    #[test]
    fn scaled_linear_generator() {
        let a = RealArray::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let g = Generator::linear(a, vec![0.0, 0.0]).unwrap();
        assert_eq!(g.apply_one(&[1.0, -1.0]), vec![2.0, -2.0]);
    }

    #[test]
    fn linear_vjp_is_transpose() {
        let g = make_generator(GeneratorKind::Linear, 3, 5, 2).unwrap();
        let Generator::Linear { matrix, .. } = &g else {
            unreachable!()
        };
        let u = [0.5, -1.0, 2.0, 0.25, 3.0];
        let v = g.vjp_one(&[0.1, 0.2, 0.3], &u);
        for c in 0..3 {
            let expect: f64 = (0..5).map(|r| matrix.data()[r * 3 + c] * u[r]).sum();
            assert_eq!(v[c], expect);
        }
    }

    #[test]
    fn unsupported_kind_rejected() {
        assert!(matches!(
            "stylegan".parse::<GeneratorKind>(),
            Err(Error::Argument(_))
        ));
        assert!(make_generator(GeneratorKind::Identity, 2, 3, 0).is_err());
    }

    #[test]
    fn mlp_generator_vjp_matches_finite_differences() {
        let g = make_generator(GeneratorKind::SmallMlp, 4, 3, 5).unwrap();
        let mut rng = Stream::new(8);
        for _ in 0..20 {
            let z = rng.normal_vec(4);
            let u = rng.normal_vec(3);
            let v = g.vjp_one(&z, &u);
            let h = 1e-5;
            for i in 0..4 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let fd = (dot(&g.apply_one(&zp), &u) - dot(&g.apply_one(&zm), &u)) / (2.0 * h);
                let rel = (fd - v[i]).abs() / fd.abs().max(v[i].abs()).max(1e-6);
                assert!(rel < 1e-6, "rel err {rel}");
            }
        }
    }

    #[test]
    fn intermediate_vjp_matches_finite_differences() {
        let g = make_generator(GeneratorKind::SmallMlp, 3, 3, 1).unwrap();
        let z = [0.4, -0.9, 1.3];
        let width = g.intermediate_dim().unwrap();
        let u: Vec<f64> = (0..width).map(|i| (i as f64 * 0.37).sin()).collect();
        let v = g.intermediate_vjp_one(&z, &u).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (dot(&g.intermediate_one(&zp).unwrap(), &u)
                - dot(&g.intermediate_one(&zm).unwrap(), &u))
                / (2.0 * h);
            assert!((fd - v[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        assert!(make_generator(GeneratorKind::Identity, 2, 2, 0)
            .unwrap()
            .intermediate_one(&[0.0, 0.0])
            .is_err());
    }

    #[test]
    fn synthesis_rejects_zero_and_is_deterministic() {
        let w = World::half_plane(2).unwrap();
        assert!(synthesize_pairs(&w.generator, &w.truth, 0, 1).is_err());
        let a = synthesize_pairs(&w.generator, &w.truth, 3000, 9).unwrap();
        let b = synthesize_pairs(&w.generator, &w.truth, 3000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn half_plane_balance() {
        let w = World::half_plane(2).unwrap();
        let d = synthesize_pairs(&w.generator, &w.truth, 100_000, 3).unwrap();
        let ones = d
            .labels
            .iter()
            .filter(|l| l[0] == AttrValue::Category(1))
            .count();
        let frac = ones as f64 / d.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn truth_labels_are_batch_order_independent() {
        let w = World::benchmark(&WorldConfig::bench8()).unwrap();
        let d = synthesize_pairs(&w.generator, &w.truth, 500, 4).unwrap();
        let mut order: Vec<usize> = (0..d.len()).collect();
        Stream::new(1).shuffle(&mut order);
        let shuffled = d.select(&order);
        let relabeled = w.truth.label_latents(&w.generator, &shuffled.latent);
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(relabeled[k], d.labels[i]);
        }
    }

    #[test]
    fn holdout_removes_combination() {
        let w = World::benchmark(&WorldConfig::bench8()).unwrap();
        let d = synthesize_pairs(&w.generator, &w.truth, 4000, 2).unwrap();
        let hold = AttributeCode::new(
            &w.spec,
            vec![Some(AttrValue::Category(1)), Some(AttrValue::Category(3)), None],
        )
        .unwrap();
        let kept = d.without(&w.spec, &hold).unwrap();
        assert!(kept.len() < d.len());
        assert!(kept.labels.iter().all(|l| !hold.matches(l)));
        let cont = AttributeCode::new(&w.spec, vec![None, None, Some(AttrValue::Level(0.5))])
            .unwrap();
        assert!(d.without(&w.spec, &cont).is_err());
    }

    #[test]
    fn code_validation() {
        let w = World::benchmark(&WorldConfig::plane()).unwrap();
        assert!(AttributeCode::new(&w.spec, vec![Some(AttrValue::Category(2)), None, None]).is_err());
        assert!(AttributeCode::new(&w.spec, vec![None, None, Some(AttrValue::Level(1.5))]).is_err());
        assert!(AttributeCode::new(&w.spec, vec![None, Some(AttrValue::Category(3)), None]).is_ok());
    }

    #[test]
    fn label_noise_flips_roughly_rate() {
        let w = World::half_plane(2).unwrap();
        let d = synthesize_pairs(&w.generator, &w.truth, 20_000, 3).unwrap();
        let noisy = d.with_label_noise(&w.spec, 0.1, 5).unwrap();
        let flipped = d
            .labels
            .iter()
            .zip(&noisy.labels)
            .filter(|(a, b)| a != b)
            .count() as f64
            / d.len() as f64;
        assert!((flipped - 0.1).abs() < 0.01);
    }

    #[test]
    fn dataset_csv_header() {
        let w = World::half_plane(2).unwrap();
        let d = synthesize_pairs(&w.generator, &w.truth, 3, 1).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&w.spec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("z_0,z_1,x_0,x_1,attr0\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
