//! Energy functions over the latent space.
//!
//! Per-attribute conditional energies are built from classifier head outputs:
//! a temperature-scaled negative log-softmax for discrete attributes and a
//! scaled squared residual for continuous ones. [`EnergyExpr`] composes them
//! with AND / OR / NOT, and [`SeqEditEnergy`] adds the proximity terms used
//! for sequential editing. Both expose value and exact gradient w.r.t. `z`
//! through the [`LatentEnergy`] trait consumed by the samplers and oracles.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, HeadsTrace};
use crate::error::{Error, Result};
use crate::ndmath::{logsumexp_unchecked, norm_sq, softmax};
use crate::worldgen::{AttrValue, AttributeCode, AttributeKind, AttributeSpec, Generator};

/// Default regression-head variance.
pub const DEFAULT_SIGMA_SQ: f64 = 0.01;
/// Default OR bias, `ln 20`.
pub const LN_20: f64 = 2.995_732_273_553_991;

/// `-f[c]/T + logsumexp(f/T)`.
pub fn cond_energy_discrete(logits: &[f64], category: usize, temperature: f64) -> Result<f64> {
    if category >= logits.len() {
        return Err(Error::arg(format!(
            "category {category} out of range for {} logits",
            logits.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    Ok(discrete_energy(logits, category, temperature))
}

fn discrete_energy(logits: &[f64], category: usize, temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|f| f / temperature).collect();
    logsumexp_unchecked(&scaled) - scaled[category]
}

/// `(c - f)² / (2σ²)`.
pub fn cond_energy_continuous(prediction: f64, target: f64, sigma_sq: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) {
        return Err(Error::arg("sigma_sq must be positive"));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::arg(format!("continuous target {target} outside [0, 1]")));
    }
    Ok((target - prediction).powi(2) / (2.0 * sigma_sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub attr: usize,
    pub target: AttrValue,
    pub temperature: f64,
    pub weight: f64,
}

impl Leaf {
    pub fn new(attr: usize, target: AttrValue) -> Self {
        Self {
            attr,
            target,
            temperature: 1.0,
            weight: 1.0,
        }
    }

    fn energy(&self, output: &[f64], sigma_sq: f64) -> f64 {
        let e = match self.target {
            AttrValue::Category(c) => discrete_energy(output, c, self.temperature),
            AttrValue::Level(c) => (c - output[0]).powi(2) / (2.0 * sigma_sq),
        };
        self.weight * e
    }

    /// Derivative of `scale * energy` w.r.t. the head output, added to `acc`.
    fn accumulate_grad(&self, output: &[f64], sigma_sq: f64, scale: f64, acc: &mut [f64]) {
        let s = scale * self.weight;
        match self.target {
            AttrValue::Category(c) => {
                let t = self.temperature;
                let scaled: Vec<f64> = output.iter().map(|f| f / t).collect();
                for (k, p) in softmax(&scaled).into_iter().enumerate() {
                    let onehot = if k == c { 1.0 } else { 0.0 };
                    acc[k] += s * (p - onehot) / t;
                }
            }
            AttrValue::Level(c) => acc[0] += s * (output[0] - c) / sigma_sq,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    Fixed(f64),
    /// `α = min(0.1 / |E₂|, 1)`, evaluated at the current point and held
    /// constant for differentiation.
    Adaptive,
}

impl AlphaPolicy {
    pub fn alpha(self, negative_energy: f64) -> f64 {
        match self {
            AlphaPolicy::Fixed(a) => a,
            AlphaPolicy::Adaptive => {
                let m = negative_energy.abs();
                if m < 1e-12 {
                    1.0
                } else {
                    (0.1 / m).min(1.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf(Leaf),
    And(Vec<Node>),
    Or { children: Vec<Node>, beta: f64 },
    Not {
        positive: Box<Node>,
        negative: Box<Node>,
        alpha: AlphaPolicy,
    },
}

impl Node {
    pub fn leaf(attr: usize, target: AttrValue) -> Self {
        Node::Leaf(Leaf::new(attr, target))
    }

    pub fn or(children: Vec<Node>, beta: f64) -> Self {
        Node::Or { children, beta }
    }

    pub fn not(positive: Node, negative: Node, alpha: AlphaPolicy) -> Self {
        Node::Not {
            positive: Box::new(positive),
            negative: Box::new(negative),
            alpha,
        }
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a Leaf)) {
        match self {
            Node::Leaf(l) => f(l),
            Node::And(c) | Node::Or { children: c, .. } => c.iter().for_each(|n| n.visit_leaves(f)),
            Node::Not {
                positive, negative, ..
            } => {
                positive.visit_leaves(f);
                negative.visit_leaves(f);
            }
        }
    }

    fn check_shape(&self) -> Result<()> {
        match self {
            Node::Leaf(l) => {
                if !(l.temperature > 0.0) || !l.temperature.is_finite() {
                    return Err(Error::arg("leaf temperature must be positive and finite"));
                }
                if !l.weight.is_finite() {
                    return Err(Error::arg("leaf weight must be finite"));
                }
                Ok(())
            }
            Node::And(c) => c.iter().try_for_each(Node::check_shape),
            Node::Or { children, beta } => {
                if children.is_empty() {
                    return Err(Error::arg("OR needs at least one child"));
                }
                if !beta.is_finite() {
                    return Err(Error::arg("OR beta must be finite"));
                }
                children.iter().try_for_each(Node::check_shape)
            }
            Node::Not {
                positive,
                negative,
                alpha,
            } => {
                if let AlphaPolicy::Fixed(a) = alpha {
                    if !(*a >= 0.0) || !a.is_finite() {
                        return Err(Error::arg("NOT alpha must be finite and non-negative"));
                    }
                }
                positive.check_shape()?;
                negative.check_shape()
            }
        }
    }

    fn value(&self, heads: &HeadOutputs, sigma_sq: f64) -> f64 {
        match self {
            Node::Leaf(l) => l.energy(heads.get(l.attr), sigma_sq),
            Node::And(c) => c.iter().map(|n| n.value(heads, sigma_sq)).sum(),
            Node::Or { children, beta } => children[1..]
                .iter()
                .fold(children[0].value(heads, sigma_sq), |acc, n| {
                    or2(acc, n.value(heads, sigma_sq), *beta)
                }),
            Node::Not {
                positive,
                negative,
                alpha,
            } => {
                let e2 = negative.value(heads, sigma_sq);
                positive.value(heads, sigma_sq) - alpha.alpha(e2) * e2
            }
        }
    }

    /// Adds `scale * ∂value/∂(head outputs)` into `cots`.
    fn backprop(&self, heads: &HeadOutputs, sigma_sq: f64, scale: f64, cots: &mut [Option<Vec<f64>>]) {
        match self {
            Node::Leaf(l) => {
                let out = heads.get(l.attr);
                let acc = cots[l.attr].get_or_insert_with(|| vec![0.0; out.len()]);
                l.accumulate_grad(out, sigma_sq, scale, acc);
            }
            Node::And(c) => c.iter().for_each(|n| n.backprop(heads, sigma_sq, scale, cots)),
            Node::Or { children, beta } => {
                let values: Vec<f64> = children.iter().map(|n| n.value(heads, sigma_sq)).collect();
                let mut prefix = Vec::with_capacity(values.len());
                prefix.push(values[0]);
                for k in 1..values.len() {
                    prefix.push(or2(prefix[k - 1], values[k], *beta));
                }
                let mut g = scale;
                for k in (1..values.len()).rev() {
                    let w_left = or2_left_weight(prefix[k - 1], values[k], *beta);
                    children[k].backprop(heads, sigma_sq, g * (1.0 - w_left), cots);
                    g *= w_left;
                }
                children[0].backprop(heads, sigma_sq, g, cots);
            }
            Node::Not {
                positive,
                negative,
                alpha,
            } => {
                let a = alpha.alpha(negative.value(heads, sigma_sq));
                positive.backprop(heads, sigma_sq, scale, cots);
                negative.backprop(heads, sigma_sq, -a * scale, cots);
            }
        }
    }

    fn bound(&self) -> Result<f64> {
        match self {
            Node::Leaf(l) => {
                if l.weight < 0.0 {
                    Err(Error::Capability(
                        "a negatively weighted leaf has no finite acceptance bound".into(),
                    ))
                } else {
                    Ok(1.0)
                }
            }
            Node::And(c) => c.iter().try_fold(1.0, |acc, n| Ok(acc * n.bound()?)),
            Node::Or { children, beta } => {
                let first = children[0].bound()?;
                children[1..]
                    .iter()
                    .try_fold(first, |acc, n| Ok(beta.exp() * acc + n.bound()?))
            }
            Node::Not { .. } => Err(Error::Capability(
                "NOT has no finite rejection bound; use the grid oracle instead".into(),
            )),
        }
    }
}

/// `-log(e^{β-a} + e^{-b})`.
fn or2(a: f64, b: f64, beta: f64) -> f64 {
    -logsumexp_unchecked(&[beta - a, -b])
}

/// `∂ or2 / ∂a`; the derivative w.r.t. `b` is one minus this.
fn or2_left_weight(a: f64, b: f64, beta: f64) -> f64 {
    let l = beta - a;
    let r = -b;
    1.0 / (1.0 + (r - l).exp())
}

/// Head outputs for the attributes an expression touches.
struct HeadOutputs<'a> {
    trace: &'a HeadsTrace,
}

impl HeadOutputs<'_> {
    fn get(&self, attr: usize) -> &[f64] {
        self.trace.output(attr).expect("head evaluated for every leaf")
    }
}

/// Composition tree plus global options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyExpr {
    pub root: Node,
    pub include_prior: bool,
    pub sigma_sq: f64,
}

impl EnergyExpr {
    pub fn new(root: Node) -> Self {
        Self {
            root,
            include_prior: true,
            sigma_sq: DEFAULT_SIGMA_SQ,
        }
    }

    /// Prior only.
    pub fn empty() -> Self {
        Self::new(Node::And(Vec::new()))
    }

    /// Conjunction of the present entries of `code`.
    pub fn from_code(code: &AttributeCode) -> Self {
        Self::new(Node::And(
            code.present().map(|(i, v)| Node::leaf(i, v)).collect(),
        ))
    }

    pub fn parse(text: &str, spec: &AttributeSpec) -> Result<Self> {
        let expr = Self::new(parse_node(text, spec)?);
        expr.validate(spec)?;
        Ok(expr)
    }

    pub fn leaves(&self) -> Vec<&Leaf> {
        let mut out = Vec::new();
        self.root.visit_leaves(&mut |l| out.push(l));
        out
    }

    pub fn validate(&self, spec: &AttributeSpec) -> Result<()> {
        if !(self.sigma_sq > 0.0) {
            return Err(Error::arg("sigma_sq must be positive"));
        }
        self.root.check_shape()?;
        for leaf in self.leaves() {
            if leaf.attr >= spec.len() {
                return Err(Error::arg(format!("attribute index {} out of range", leaf.attr)));
            }
            spec.get(leaf.attr).check_value(leaf.target)?;
        }
        Ok(())
    }

    /// Bound `M ≥ e^{-E_cond}` for rejection sampling.
    pub fn acceptance_bound(&self) -> Result<f64> {
        self.root.bound()
    }

    /// Canonical text, parseable by [`EnergyExpr::parse`].
    pub fn display<'a>(&'a self, spec: &'a AttributeSpec) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, spec }
    }
}

pub struct ExprDisplay<'a> {
    expr: &'a EnergyExpr,
    spec: &'a AttributeSpec,
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.expr.root, self.spec)
    }
}

fn write_children(f: &mut fmt::Formatter<'_>, children: &[Node], spec: &AttributeSpec) -> fmt::Result {
    for (i, c) in children.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write_node(f, c, spec)?;
    }
    Ok(())
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, spec: &AttributeSpec) -> fmt::Result {
    match node {
        Node::Leaf(l) => {
            write!(f, "{}={}", spec.get(l.attr).name, l.target)?;
            let mut opts = Vec::new();
            if l.temperature != 1.0 {
                opts.push(format!("T={}", l.temperature));
            }
            if l.weight != 1.0 {
                opts.push(format!("w={}", l.weight));
            }
            if !opts.is_empty() {
                write!(f, "[{}]", opts.join(","))?;
            }
            Ok(())
        }
        Node::And(c) => {
            f.write_str("AND(")?;
            write_children(f, c, spec)?;
            f.write_str(")")
        }
        Node::Or { children, beta } => {
            f.write_str("OR(")?;
            write_children(f, children, spec)?;
            if *beta == LN_20 {
                f.write_str("; beta=ln20)")
            } else {
                write!(f, "; beta={beta})")
            }
        }
        Node::Not {
            positive,
            negative,
            alpha,
        } => {
            f.write_str("NOT(")?;
            write_node(f, positive, spec)?;
            f.write_str(", ")?;
            write_node(f, negative, spec)?;
            match alpha {
                AlphaPolicy::Adaptive => f.write_str("; alpha=adaptive)"),
                AlphaPolicy::Fixed(a) => write!(f, "; alpha={a})"),
            }
        }
    }
}

/// Scalar latent energy with exact gradient. The conditional part excludes
/// the Gaussian prior `½‖z‖²`, which samplers treat separately.
pub trait LatentEnergy: Sync {
    fn latent_dim(&self) -> usize;

    fn cond_value(&self, z: &[f64]) -> Result<f64>;

    fn cond_value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Coefficient of `½‖z‖²` in the full energy.
    fn prior_weight(&self) -> f64 {
        1.0
    }

    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.cond_value(z)? + 0.5 * self.prior_weight() * norm_sq(z))
    }

    fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (e, mut g) = self.cond_value_grad(z)?;
        let w = self.prior_weight();
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi += w * zi;
        }
        Ok((e + 0.5 * w * norm_sq(z), g))
    }
}

/// `scale · ½‖z‖²` as a conditional energy, with no prior. Used for solver
/// validation (`scale = -1` gives the linear test ODE) and as a zero field.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticEnergy {
    pub dim: usize,
    pub scale: f64,
}

impl LatentEnergy for QuadraticEnergy {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn cond_value(&self, z: &[f64]) -> Result<f64> {
        Ok(0.5 * self.scale * norm_sq(z))
    }

    fn cond_value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((
            0.5 * self.scale * norm_sq(z),
            z.iter().map(|v| self.scale * v).collect(),
        ))
    }

    fn prior_weight(&self) -> f64 {
        0.0
    }
}

fn check_model(model: &ClassifierModel, g: &Generator) -> Result<()> {
    let want = model.input_space.dim(g)?;
    if model.input_dim() != want {
        return Err(Error::arg(format!(
            "classifier reads {} inputs but the {} space has {want}",
            model.input_dim(),
            model.input_space
        )));
    }
    Ok(())
}

/// An expression bound to a classifier and generator.
pub struct ExprEnergy<'a> {
    pub expr: &'a EnergyExpr,
    pub model: &'a ClassifierModel,
    pub g: &'a Generator,
    needed: Vec<bool>,
}

impl<'a> ExprEnergy<'a> {
    pub fn new(expr: &'a EnergyExpr, model: &'a ClassifierModel, g: &'a Generator) -> Result<Self> {
        expr.validate(&model.spec)?;
        check_model(model, g)?;
        let mut needed = vec![false; model.spec.len()];
        for leaf in expr.leaves() {
            needed[leaf.attr] = true;
        }
        Ok(Self {
            expr,
            model,
            g,
            needed,
        })
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.g.latent_dim() {
            return Err(Error::arg(format!(
                "latent has {} entries, expected {}",
                z.len(),
                self.g.latent_dim()
            )));
        }
        Ok(())
    }
}

impl LatentEnergy for ExprEnergy<'_> {
    fn latent_dim(&self) -> usize {
        self.g.latent_dim()
    }

    fn cond_value(&self, z: &[f64]) -> Result<f64> {
        self.check_z(z)?;
        if !self.needed.contains(&true) {
            return Ok(0.0);
        }
        let x = self.model.input_space.features(self.g, z)?;
        let trace = self.model.trace(&x, &self.needed);
        Ok(self
            .expr
            .root
            .value(&HeadOutputs { trace: &trace }, self.expr.sigma_sq))
    }

    fn cond_value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_z(z)?;
        if !self.needed.contains(&true) {
            return Ok((0.0, vec![0.0; z.len()]));
        }
        let x = self.model.input_space.features(self.g, z)?;
        let trace = self.model.trace(&x, &self.needed);
        let heads = HeadOutputs { trace: &trace };
        let value = self.expr.root.value(&heads, self.expr.sigma_sq);
        let mut cots = vec![None; self.needed.len()];
        self.expr
            .root
            .backprop(&heads, self.expr.sigma_sq, 1.0, &mut cots);
        let gx = self.model.input_vjp(&trace, &cots);
        let gz = self.model.input_space.pullback(self.g, z, gx)?;
        Ok((value, gz))
    }

    fn prior_weight(&self) -> f64 {
        if self.expr.include_prior {
            1.0
        } else {
            0.0
        }
    }
}

/// `Σ_i E(c_i | g(z)) + ½‖z‖²` over the present entries of `code`.
pub fn joint_energy(
    z: &[f64],
    code: &AttributeCode,
    model: &ClassifierModel,
    g: &Generator,
) -> Result<f64> {
    let expr = EnergyExpr::from_code(code);
    ExprEnergy::new(&expr, model, g)?.value(z)
}

pub fn eval_expr(z: &[f64], expr: &EnergyExpr, model: &ClassifierModel, g: &Generator) -> Result<f64> {
    ExprEnergy::new(expr, model, g)?.value(z)
}

pub fn energy_grad_z(
    z: &[f64],
    expr: &EnergyExpr,
    model: &ClassifierModel,
    g: &Generator,
) -> Result<Vec<f64>> {
    Ok(ExprEnergy::new(expr, model, g)?.value_grad(z)?.1)
}

// ---------------------------------------------------------------------------
// Sequential editing

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditWeights {
    /// Proximity weight on `‖g(z) - g(z_prev)‖² + ‖z - z_prev‖²`.
    pub mu: f64,
    /// Weight on head drift of the attributes not edited so far.
    pub gamma: f64,
    /// Weight on energies of earlier edits.
    pub alpha0: f64,
    /// Weight on the current edit; `None` picks 10 for continuous and 5 for
    /// discrete attributes.
    pub alpha1: Option<f64>,
}

impl Default for EditWeights {
    fn default() -> Self {
        Self {
            mu: 0.04,
            gamma: 0.01,
            alpha0: 0.2,
            alpha1: None,
        }
    }
}

impl EditWeights {
    /// Weights under which the edit energy reduces to the joint energy.
    pub fn plain() -> Self {
        Self {
            mu: 0.0,
            gamma: 0.0,
            alpha0: 1.0,
            alpha1: Some(1.0),
        }
    }

    pub fn alpha1_for(&self, kind: &AttributeKind) -> f64 {
        self.alpha1.unwrap_or(match kind {
            AttributeKind::Continuous => 10.0,
            AttributeKind::Discrete { .. } => 5.0,
        })
    }
}

/// Stage `i` of a sequential edit: `edits[..i]` were applied before, and
/// `edits[i]` is the current one (`i = edits.len() - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct EditState {
    pub z_prev: Vec<f64>,
    pub edits: Vec<(usize, AttrValue)>,
    pub weights: EditWeights,
    pub sigma_sq: f64,
}

pub struct SeqEditEnergy<'a> {
    state: &'a EditState,
    model: &'a ClassifierModel,
    g: &'a Generator,
    x_prev: Vec<f64>,
    heads_prev: Vec<Vec<f64>>,
    needed: Vec<bool>,
    off_target: Vec<bool>,
    alpha1: f64,
}

impl<'a> SeqEditEnergy<'a> {
    pub fn new(state: &'a EditState, model: &'a ClassifierModel, g: &'a Generator) -> Result<Self> {
        check_model(model, g)?;
        let w = &state.weights;
        if !(w.mu >= 0.0 && w.gamma >= 0.0) {
            return Err(Error::arg("mu and gamma must be non-negative"));
        }
        if !(state.sigma_sq > 0.0) {
            return Err(Error::arg("sigma_sq must be positive"));
        }
        if state.z_prev.len() != g.latent_dim() {
            return Err(Error::arg("z_prev has the wrong latent width"));
        }
        let Some(&(current, _)) = state.edits.last() else {
            return Err(Error::arg("an edit stage needs at least one edit"));
        };
        let n = model.spec.len();
        for &(attr, value) in &state.edits {
            if attr >= n {
                return Err(Error::arg(format!(
                    "edit attribute {attr} exceeds the {n} declared attributes"
                )));
            }
            model.spec.get(attr).check_value(value)?;
        }
        let mut off_target = vec![w.gamma > 0.0; n];
        for &(attr, _) in &state.edits {
            off_target[attr] = false;
        }
        let needed: Vec<bool> = (0..n)
            .map(|a| off_target[a] || state.edits.iter().any(|&(e, _)| e == a))
            .collect();
        let features = model.input_space.features(g, &state.z_prev)?;
        Ok(Self {
            state,
            model,
            g,
            x_prev: g.apply_one(&state.z_prev),
            heads_prev: model.heads_one(&features),
            needed,
            off_target,
            alpha1: w.alpha1_for(&model.spec.get(current).kind),
        })
    }

    fn edit_weight(&self, stage: usize) -> f64 {
        if stage + 1 == self.state.edits.len() {
            self.alpha1
        } else {
            self.state.weights.alpha0
        }
    }

    fn eval(&self, z: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.g.latent_dim() {
            return Err(Error::arg("latent has the wrong width"));
        }
        let st = self.state;
        let w = &st.weights;
        let features = self.model.input_space.features(self.g, z)?;
        let trace = self.model.trace(&features, &self.needed);
        let mut value = 0.0;
        let mut cots: Vec<Option<Vec<f64>>> = vec![None; self.needed.len()];
        for (stage, &(attr, target)) in st.edits.iter().enumerate() {
            let leaf = Leaf {
                weight: self.edit_weight(stage),
                ..Leaf::new(attr, target)
            };
            let out = trace.output(attr).expect("edited head traced");
            value += leaf.energy(out, st.sigma_sq);
            if want_grad {
                let acc = cots[attr].get_or_insert_with(|| vec![0.0; out.len()]);
                leaf.accumulate_grad(out, st.sigma_sq, 1.0, acc);
            }
        }
        for (attr, &on) in self.off_target.iter().enumerate() {
            if !on {
                continue;
            }
            let out = trace.output(attr).expect("off-target head traced");
            let diff: Vec<f64> = out
                .iter()
                .zip(&self.heads_prev[attr])
                .map(|(a, b)| a - b)
                .collect();
            value += w.gamma * norm_sq(&diff);
            if want_grad {
                cots[attr] = Some(diff.iter().map(|d| 2.0 * w.gamma * d).collect());
            }
        }
        let x = self.g.apply_one(z);
        let dx: Vec<f64> = x.iter().zip(&self.x_prev).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z.iter().zip(&st.z_prev).map(|(a, b)| a - b).collect();
        value += w.mu * (norm_sq(&dx) + norm_sq(&dz));
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let gx = self.model.input_vjp(&trace, &cots);
        let mut grad = self.model.input_space.pullback(self.g, z, gx)?;
        if w.mu != 0.0 {
            let cot: Vec<f64> = dx.iter().map(|d| 2.0 * w.mu * d).collect();
            for ((gi, pi), di) in grad.iter_mut().zip(self.g.vjp_one(z, &cot)).zip(&dz) {
                *gi += pi + 2.0 * w.mu * di;
            }
        }
        Ok((value, grad))
    }
}

impl LatentEnergy for SeqEditEnergy<'_> {
    fn latent_dim(&self) -> usize {
        self.g.latent_dim()
    }

    fn cond_value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.eval(z, false)?.0)
    }

    fn cond_value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(z, true)
    }
}

pub fn seq_edit_energy(
    z: &[f64],
    state: &EditState,
    model: &ClassifierModel,
    g: &Generator,
) -> Result<f64> {
    SeqEditEnergy::new(state, model, g)?.value(z)
}

// ---------------------------------------------------------------------------
// Text syntax
//
//   expr    := item ("," item)*            top-level list is an implicit AND
//   item    := "AND" "(" [items] ")"
//            | "OR" "(" items [";" opts] ")"
//            | "NOT" "(" item "," item [";" opts] ")"
//            | NAME "=" VALUE ["[" opts "]"]
//   opts    := KEY "=" VALUE ("," KEY "=" VALUE)*
//
// OR takes `beta`, NOT takes `alpha` (a number or `adaptive`), leaves take
// `T` and `w`. Numbers may be written `lnX` for the natural log of X.

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Open,
    Close,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Equals,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, ch)) = chars.peek() {
        let tok = match ch {
            c if c.is_whitespace() => {
                chars.next();
                continue;
            }
            '(' => Tok::Open,
            ')' => Tok::Close,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            ';' => Tok::Semi,
            '=' => Tok::Equals,
            c if c.is_alphanumeric() || "_.+-".contains(c) => {
                let mut word = String::new();
                while let Some(&(_, c)) = chars.peek() {
                    if c.is_alphanumeric() || "_.+-".contains(c) {
                        word.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push((pos, Tok::Word(word)));
                continue;
            }
            other => {
                return Err(Error::Parse {
                    position: pos,
                    message: format!("unexpected character '{other}'"),
                })
            }
        };
        chars.next();
        out.push((pos, tok));
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
    spec: &'a AttributeSpec,
}

fn parse_number(word: &str) -> Option<f64> {
    let v = match word.strip_prefix("ln") {
        Some(rest) => rest.parse::<f64>().ok()?.ln(),
        None => word.parse::<f64>().ok()?,
    };
    v.is_finite().then_some(v)
}

impl Parser<'_> {
    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |t| t.0)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.1)
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.at += 1;
            Ok(())
        } else {
            self.fail(format!("expected {what}"))
        }
    }

    fn word(&mut self, what: &str) -> Result<(usize, String)> {
        match self.toks.get(self.at) {
            Some((p, Tok::Word(w))) => {
                let out = (*p, w.clone());
                self.at += 1;
                Ok(out)
            }
            _ => self.fail(format!("expected {what}")),
        }
    }

    fn items(&mut self) -> Result<Vec<Node>> {
        let mut items = vec![self.item()?];
        while self.peek() == Some(&Tok::Comma) {
            self.at += 1;
            items.push(self.item()?);
        }
        Ok(items)
    }

    fn options(&mut self, close: Tok) -> Result<Vec<(usize, String, String)>> {
        let mut opts = Vec::new();
        loop {
            let (p, key) = self.word("option name")?;
            self.expect(Tok::Equals, "'=' after option name")?;
            let (_, value) = self.word("option value")?;
            opts.push((p, key, value));
            match self.peek() {
                Some(Tok::Comma) => self.at += 1,
                Some(t) if *t == close => return Ok(opts),
                _ => return self.fail("expected ',' or end of options"),
            }
        }
    }

    fn item(&mut self) -> Result<Node> {
        let (start, head) = self.word("an operator or a leaf")?;
        if self.peek() == Some(&Tok::Open) {
            self.at += 1;
            return self.operator(start, &head);
        }
        self.leaf(start, &head)
    }

    fn operator(&mut self, start: usize, head: &str) -> Result<Node> {
        let op = head.to_ascii_uppercase();
        let children = if op == "AND" && self.peek() == Some(&Tok::Close) {
            Vec::new()
        } else {
            self.items()?
        };
        let opts = if self.peek() == Some(&Tok::Semi) {
            self.at += 1;
            self.options(Tok::Close)?
        } else {
            Vec::new()
        };
        self.expect(Tok::Close, "')'")?;
        let bad = |p: usize, m: String| Err(Error::Parse { position: p, message: m });
        match op.as_str() {
            "AND" => match opts.first() {
                Some((p, k, _)) => bad(*p, format!("AND takes no options (got '{k}')")),
                None => Ok(Node::And(children)),
            },
            "OR" => {
                let mut beta = LN_20;
                for (p, k, v) in opts {
                    match (k.as_str(), parse_number(&v)) {
                        ("beta", Some(b)) => beta = b,
                        ("beta", None) => return bad(p, format!("invalid beta '{v}'")),
                        _ => return bad(p, format!("unknown OR option '{k}'")),
                    }
                }
                Ok(Node::or(children, beta))
            }
            "NOT" => {
                if children.len() != 2 {
                    return bad(start, format!("NOT takes 2 operands, got {}", children.len()));
                }
                let mut alpha = AlphaPolicy::Adaptive;
                for (p, k, v) in opts {
                    alpha = match (k.as_str(), v.as_str()) {
                        ("alpha", "adaptive") => AlphaPolicy::Adaptive,
                        ("alpha", num) => match parse_number(num) {
                            Some(a) if a >= 0.0 => AlphaPolicy::Fixed(a),
                            _ => return bad(p, format!("invalid alpha '{v}'")),
                        },
                        _ => return bad(p, format!("unknown NOT option '{k}'")),
                    };
                }
                let mut it = children.into_iter();
                let positive = it.next().unwrap();
                Ok(Node::not(positive, it.next().unwrap(), alpha))
            }
            _ => bad(start, format!("unknown operator '{head}'")),
        }
    }

    fn leaf(&mut self, start: usize, name: &str) -> Result<Node> {
        let Some(attr) = self.spec.index_of(name) else {
            return Err(Error::Parse {
                position: start,
                message: format!("unknown attribute '{name}'"),
            });
        };
        self.expect(Tok::Equals, "'=' after attribute name")?;
        let (vpos, raw) = self.word("attribute value")?;
        let target = match self.spec.get(attr).kind {
            AttributeKind::Discrete { categories } => match raw.parse::<usize>() {
                Ok(c) if c < categories => AttrValue::Category(c),
                _ => {
                    return Err(Error::Parse {
                        position: vpos,
                        message: format!("'{name}' needs a category in 0..{categories}, got '{raw}'"),
                    })
                }
            },
            AttributeKind::Continuous => match parse_number(&raw) {
                Some(v) if (0.0..=1.0).contains(&v) => AttrValue::Level(v),
                _ => {
                    return Err(Error::Parse {
                        position: vpos,
                        message: format!("'{name}' needs a level in [0, 1], got '{raw}'"),
                    })
                }
            },
        };
        let mut leaf = Leaf::new(attr, target);
        if self.peek() == Some(&Tok::LBracket) {
            self.at += 1;
            for (p, k, v) in self.options(Tok::RBracket)? {
                let num = parse_number(&v).ok_or(Error::Parse {
                    position: p,
                    message: format!("invalid number '{v}'"),
                })?;
                match k.as_str() {
                    "T" if num > 0.0 => leaf.temperature = num,
                    "w" => leaf.weight = num,
                    "T" => {
                        return Err(Error::Parse {
                            position: p,
                            message: "temperature must be positive".into(),
                        })
                    }
                    _ => {
                        return Err(Error::Parse {
                            position: p,
                            message: format!("unknown leaf option '{k}'"),
                        })
                    }
                }
            }
            self.expect(Tok::RBracket, "']'")?;
        }
        Ok(Node::Leaf(leaf))
    }
}

fn parse_node(text: &str, spec: &AttributeSpec) -> Result<Node> {
    let mut p = Parser {
        toks: lex(text)?,
        at: 0,
        end: text.len(),
        spec,
    };
    if p.toks.is_empty() {
        return Ok(Node::And(Vec::new()));
    }
    let mut items = p.items()?;
    if p.at != p.toks.len() {
        return p.fail("unexpected trailing input");
    }
    Ok(if items.len() == 1 {
        items.pop().unwrap()
    } else {
        Node::And(items)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierMode, Heads, InputSpace};
    use crate::ndmath::{MlpParams, RealArray};
    use crate::worldgen::{make_generator, Attribute, GeneratorKind, World, WorldConfig};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn discrete_examples() {
        assert!(close(cond_energy_discrete(&[0.0, 0.0], 0, 1.0).unwrap(), 2f64.ln(), 1e-15));
        let e = cond_energy_discrete(&[1.0, 0.0], 0, 1.0).unwrap();
        assert!(close(e, -1.0 + (1f64.exp() + 1.0).ln(), 1e-15));
        assert!(close(e, 0.313_261_687_518_222_8, 1e-12));
        let e2 = cond_energy_discrete(&[1.0, 0.0], 0, 2.0).unwrap();
        assert!(close(e2, 0.474_076_984_180_468_5, 1e-12));
        assert!(cond_energy_discrete(&[1.0, 0.0], 2, 1.0).is_err());
    }

    #[test]
    fn continuous_examples() {
        assert_eq!(cond_energy_continuous(0.4, 0.4, 0.01).unwrap(), 0.0);
        assert!(close(cond_energy_continuous(0.4, 0.5, 0.01).unwrap(), 0.5, 1e-12));
        assert!(close(cond_energy_continuous(0.3, 0.8, 0.01).unwrap(), 12.5, 1e-12));
        assert!(cond_energy_continuous(0.3, 0.8, 0.0).is_err());
    }

    fn uniform_world() -> (World, ClassifierModel) {
        let w = World::benchmark(&WorldConfig::plane()).unwrap();
        let mut m = ClassifierModel::init(&w.spec, ClassifierMode::Separate, InputSpace::Latent, 2, 0)
            .unwrap();
        for net in m.networks_mut() {
            *net = MlpParams::zeros(&net.layer_dims).unwrap();
        }
        (w, m)
    }

    #[test]
    fn joint_energy_examples() {
        let (w, m) = uniform_world();
        let g = &w.generator;
        let empty = AttributeCode::empty(3);
        assert_eq!(joint_energy(&[0.0, 0.0], &empty, &m, g).unwrap(), 0.0);
        assert_eq!(joint_energy(&[3.0, 4.0], &empty, &m, g).unwrap(), 12.5);
        let mut code = AttributeCode::empty(3);
        code.set(0, Some(AttrValue::Category(1)));
        assert!(close(joint_energy(&[0.0, 0.0], &code, &m, g).unwrap(), 2f64.ln(), 1e-15));
        let grad = energy_grad_z(&[0.7, -0.2], &EnergyExpr::empty(), &m, g).unwrap();
        assert_eq!(grad, vec![0.7, -0.2]);
    }

    #[test]
    fn or_and_not_examples() {
        let (w, m) = uniform_world();
        let g = &w.generator;
        let l = |c| Node::leaf(0, AttrValue::Category(c));
        // Uniform logits give E₁ = E₂ = ln 2 for each leaf, so use weight 0 for E = 0.
        let zero_leaf = Node::Leaf(Leaf {
            weight: 0.0,
            ..Leaf::new(0, AttrValue::Category(0))
        });
        let z = [0.3, -0.4];
        let prior = 0.5 * norm_sq(&z);
        let or = EnergyExpr::new(Node::or(vec![zero_leaf.clone(), zero_leaf.clone()], 0.0));
        assert!(close(eval_expr(&z, &or, &m, g).unwrap(), -(2f64.ln()) + prior, 1e-14));
        let fifty = Node::Leaf(Leaf {
            weight: 50.0 / 2f64.ln(),
            ..Leaf::new(0, AttrValue::Category(1))
        });
        let or = EnergyExpr::new(Node::or(vec![zero_leaf.clone(), fifty], LN_20));
        let e = eval_expr(&z, &or, &m, g).unwrap() - prior;
        assert!(close(e, -(20f64 + (-50f64).exp()).ln(), 1e-14));
        assert!(close(e, -(20f64.ln()), 1e-12));
        // Adaptive alpha clamps to 1 when |E₂| < 0.1.
        assert_eq!(AlphaPolicy::Adaptive.alpha(0.05), 1.0);
        assert_eq!(AlphaPolicy::Adaptive.alpha(0.0), 1.0);
        assert!(close(AlphaPolicy::Adaptive.alpha(-4.0), 0.025, 1e-15));
        let not = EnergyExpr::new(Node::not(l(0), l(1), AlphaPolicy::Fixed(0.5)));
        assert!(close(eval_expr(&z, &not, &m, g).unwrap() - prior, 0.5 * 2f64.ln(), 1e-14));
    }

    #[test]
    fn linear_head_gradient_is_analytic() {
        let spec = AttributeSpec::new(vec![Attribute::continuous("level")]).unwrap();
        let g = make_generator(GeneratorKind::Identity, 2, 2, 0).unwrap();
        let w = [0.3, -0.8];
        let head = MlpParams {
            layer_dims: vec![2, 1],
            weights: vec![RealArray::new(vec![1, 2], w.to_vec()).unwrap()],
            biases: vec![RealArray::vector(vec![0.0])],
        };
        let model = ClassifierModel {
            spec: spec.clone(),
            input_space: InputSpace::Latent,
            heads: Heads::Separate(vec![head]),
        };
        let expr = EnergyExpr::parse("level=0.6", &spec).unwrap();
        let z = [1.5, 0.25];
        let f = 0.3 * 1.5 - 0.8 * 0.25;
        let grad = energy_grad_z(&z, &expr, &model, &g).unwrap();
        for k in 0..2 {
            assert!(close(grad[k], z[k] + (f - 0.6) / 0.01 * w[k], 1e-12));
        }
    }

    #[test]
    fn or_dominance_limit() {
        let (w, m) = uniform_world();
        let g = &w.generator;
        let big = Node::Leaf(Leaf {
            weight: 100.0,
            ..Leaf::new(0, AttrValue::Category(1))
        });
        let expr = EnergyExpr {
            include_prior: false,
            ..EnergyExpr::new(Node::or(vec![Node::leaf(1, AttrValue::Category(2)), big], 50.0))
        };
        let e1 = 4f64.ln();
        let e = eval_expr(&[0.1, 0.2], &expr, &m, g).unwrap();
        assert!(close(e, e1 - 50.0, 1e-12), "{e}");
    }

    #[test]
    fn bound_structure() {
        let spec = World::benchmark(&WorldConfig::plane()).unwrap().spec;
        let b = |t: &str| EnergyExpr::parse(t, &spec).unwrap().acceptance_bound();
        assert_eq!(b("attr0=1").unwrap(), 1.0);
        assert_eq!(b("attr0=1, attr1=2").unwrap(), 1.0);
        assert!(close(b("OR(attr0=1, attr1=2)").unwrap(), 21.0, 1e-12));
        assert!(matches!(b("NOT(attr0=1, attr1=2)"), Err(Error::Capability(_))));
    }

    #[test]
    fn parser_round_trip_and_errors() {
        let spec = World::benchmark(&WorldConfig::plane()).unwrap().spec;
        let text = "AND(attr0=1, OR(attr1=2, attr2=0.7; beta=ln20), NOT(attr0=1, attr1=0; alpha=adaptive))";
        let e = EnergyExpr::parse(text, &spec).unwrap();
        assert_eq!(e.display(&spec).to_string(), text);
        let implicit = EnergyExpr::parse("attr0=1, attr1=3[T=2,w=5]", &spec).unwrap();
        assert_eq!(
            implicit.display(&spec).to_string(),
            "AND(attr0=1, attr1=3[T=2,w=5])"
        );
        let fixed = EnergyExpr::parse("not(attr0=1, attr1=0; alpha=0.25)", &spec).unwrap();
        assert_eq!(
            EnergyExpr::parse(&fixed.display(&spec).to_string(), &spec).unwrap(),
            fixed
        );
        assert_eq!(EnergyExpr::parse("  ", &spec).unwrap(), EnergyExpr::empty());
        let pos = |t: &str| match EnergyExpr::parse(t, &spec) {
            Err(Error::Parse { position, .. }) => position,
            other => panic!("{t}: {other:?}"),
        };
        assert_eq!(pos("attr0=2"), 6);
        assert_eq!(pos("AND(attr0=1, foo=1)"), 13);
        assert_eq!(pos("OR(attr0=1; gamma=3)"), 12);
        assert_eq!(pos("attr2=1.5"), 6);
        assert_eq!(pos("NOT(attr0=1)"), 0);
        assert_eq!(pos("attr0=1)"), 7);
        assert_eq!(pos("AND(attr0=1"), 11);
    }

    #[test]
    fn edit_reduces_to_joint_energy() {
        let w = World::benchmark(&WorldConfig::plane()).unwrap();
        let m = ClassifierModel::init(&w.spec, ClassifierMode::Separate, InputSpace::Latent, 2, 3)
            .unwrap();
        let state = EditState {
            z_prev: vec![0.4, -1.0],
            edits: vec![(0, AttrValue::Category(1)), (2, AttrValue::Level(0.2))],
            weights: EditWeights::plain(),
            sigma_sq: DEFAULT_SIGMA_SQ,
        };
        let code = AttributeCode::new(
            &w.spec,
            vec![Some(AttrValue::Category(1)), None, Some(AttrValue::Level(0.2))],
        )
        .unwrap();
        let z = [0.1, 0.9];
        let a = seq_edit_energy(&z, &state, &m, &w.generator).unwrap();
        let b = joint_energy(&z, &code, &m, &w.generator).unwrap();
        assert!(close(a, b, 1e-12));
        let bad = EditState {
            edits: vec![(3, AttrValue::Category(0))],
            ..state
        };
        assert!(seq_edit_energy(&z, &bad, &m, &w.generator).is_err());
    }

    #[test]
    fn edit_proximity_terms() {
        let w = World::half_plane(2).unwrap();
        let mut m = ClassifierModel::init(&w.spec, ClassifierMode::Separate, InputSpace::Latent, 2, 3)
            .unwrap();
        for net in m.networks_mut() {
            *net = MlpParams::zeros(&net.layer_dims).unwrap();
        }
        let state = EditState {
            z_prev: vec![0.5, 0.5],
            edits: vec![(0, AttrValue::Category(1))],
            weights: EditWeights {
                alpha1: Some(0.0),
                ..EditWeights::default()
            },
            sigma_sq: DEFAULT_SIGMA_SQ,
        };
        let e = SeqEditEnergy::new(&state, &m, &w.generator).unwrap();
        assert_eq!(e.cond_value(&[0.5, 0.5]).unwrap(), 0.0);
        assert!(close(e.cond_value(&[1.5, 0.5]).unwrap(), 0.08, 1e-15));
    }
}
