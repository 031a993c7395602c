//! Controllability and editing metrics: conditional accuracy (ACC), the
//! disentangled edit strength (DES) and a data-space drift measure.

use serde::Serialize;

use crate::energy::{EnergyExpr, Node};
use crate::error::{Error, Result};
use crate::ndmath::{norm_sq, RealArray};
use crate::par;
use crate::worldgen::{AttrValue, AttributeCode, AttributeSpec, Generator, TruthOracle};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccReport {
    /// `None` for attributes no target conditions on.
    pub per_attribute: Vec<Option<f64>>,
    pub aggregate: f64,
    pub samples: usize,
}

/// Agreement of one truth label with one target: 1/0 for categories,
/// `1 - |a - b|` for levels.
pub fn agreement(label: AttrValue, target: AttrValue) -> f64 {
    match (label, target) {
        (AttrValue::Category(a), AttrValue::Category(b)) => f64::from(u8::from(a == b)),
        (AttrValue::Level(a), AttrValue::Level(b)) => 1.0 - (a - b).abs(),
        _ => 0.0,
    }
}

/// ACC of already-labelled samples. `targets` holds one code for all
/// samples or one per sample.
pub fn acc_from_labels(labels: &[Vec<AttrValue>], targets: &[AttributeCode]) -> Result<AccReport> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::arg("ACC of an empty batch"));
    }
    if targets.len() != 1 && targets.len() != n {
        return Err(Error::arg("targets must hold one code or one per sample"));
    }
    let width = labels[0].len();
    let mut sums = vec![0.0; width];
    let mut counts = vec![0usize; width];
    for (r, row) in labels.iter().enumerate() {
        let code = &targets[if targets.len() == 1 { 0 } else { r }];
        for (a, target) in code.present() {
            if a >= width {
                return Err(Error::arg(format!("target attribute {a} out of range")));
            }
            sums[a] += agreement(row[a], target);
            counts[a] += 1;
        }
    }
    let per_attribute: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per_attribute.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::arg("no attribute has a target"));
    }
    Ok(AccReport {
        aggregate: present.iter().sum::<f64>() / present.len() as f64,
        per_attribute,
        samples: n,
    })
}

/// Labels `samples` with the truth oracle and scores them against `targets`.
pub fn acc_score(
    samples: &RealArray,
    targets: &[AttributeCode],
    truth: &TruthOracle,
    g: &Generator,
) -> Result<AccReport> {
    samples.expect_batch(g.latent_dim(), "ACC samples")?;
    acc_from_labels(&truth.label_latents(g, samples), targets)
}

/// Degree to which `labels` satisfy `node`: leaves score by [`agreement`],
/// AND takes the minimum, OR the maximum and `NOT(a, b)` is
/// `min(a, 1 - b)`. On discrete leaves this is plain Boolean truth.
pub fn truth_degree(node: &Node, labels: &[AttrValue]) -> f64 {
    match node {
        Node::Leaf(l) => agreement(labels[l.attr], l.target),
        Node::And(c) => c.iter().map(|n| truth_degree(n, labels)).fold(1.0, f64::min),
        Node::Or { children, .. } => children
            .iter()
            .map(|n| truth_degree(n, labels))
            .fold(0.0, f64::max),
        Node::Not {
            positive, negative, ..
        } => truth_degree(positive, labels).min(1.0 - truth_degree(negative, labels)),
    }
}

/// Mean [`truth_degree`] of the truth labels of `samples`.
pub fn satisfaction(
    samples: &RealArray,
    expr: &EnergyExpr,
    truth: &TruthOracle,
    g: &Generator,
) -> Result<f64> {
    samples.expect_batch(g.latent_dim(), "satisfaction samples")?;
    if samples.rows() == 0 {
        return Err(Error::arg("satisfaction of an empty batch"));
    }
    let labels = truth.label_latents(g, samples);
    if let Some(l) = expr.leaves().iter().find(|l| l.attr >= truth.spec.len()) {
        return Err(Error::arg(format!("expression refers to attribute {}", l.attr)));
    }
    Ok(labels.iter().map(|row| truth_degree(&expr.root, row)).sum::<f64>() / labels.len() as f64)
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|a| (0.0..=1.0).contains(a)) {
        Ok(())
    } else {
        Err(Error::arg(format!("{what} must lie in [0, 1]")))
    }
}

/// Normalised improvement `(after - before) / (1 - before)`, or the raw
/// difference when `before = 1`.
pub fn normalized_change(before: f64, after: f64) -> f64 {
    if before >= 1.0 {
        after - before
    } else {
        (after - before) / (1.0 - before)
    }
}

/// `DES_i = Δ_i - max_{j≠i} |Δ_j|`.
pub fn des_score(acc_before: &[f64], acc_after: &[f64], edit: usize) -> Result<f64> {
    if acc_before.len() != acc_after.len() || edit >= acc_before.len() {
        return Err(Error::arg("des_score needs matching ACC vectors and a valid index"));
    }
    check_unit(acc_before, "ACC before the edit")?;
    check_unit(acc_after, "ACC after the edit")?;
    let delta: Vec<f64> = acc_before
        .iter()
        .zip(acc_after)
        .map(|(&b, &a)| normalized_change(b, a))
        .collect();
    let off = delta
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != edit)
        .map(|(_, d)| d.abs())
        .fold(0.0, f64::max);
    Ok(delta[edit] - off)
}

/// Mean data-space displacement divided by the mean pairwise distance
/// within the `before` batch.
pub fn id_drift(before: &RealArray, after: &RealArray, g: &Generator) -> Result<f64> {
    before.expect_batch(g.latent_dim(), "id_drift before")?;
    after.expect_batch(g.latent_dim(), "id_drift after")?;
    let n = before.rows();
    if n < 2 || after.rows() != n {
        return Err(Error::arg("id_drift needs two batches of equal size >= 2"));
    }
    let xb = g.apply(before)?;
    let xa = g.apply(after)?;
    let dist = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm_sq(&d).sqrt()
    };
    let moved = (0..n).map(|i| dist(xa.row(i), xb.row(i))).sum::<f64>() / n as f64;
    let row_sums = par::map_indexed(n, |i| {
        ((i + 1)..n).map(|j| dist(xb.row(i), xb.row(j))).sum::<f64>()
    });
    let pairs = (n * (n - 1) / 2) as f64;
    let spread = row_sums.iter().sum::<f64>() / pairs;
    if spread == 0.0 {
        return Err(Error::Numeric("all samples coincide; drift is undefined".into()));
    }
    Ok(moved / spread)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub attributes: Vec<String>,
    pub per_attribute_acc: Vec<Option<f64>>,
    pub aggregate_acc: f64,
    /// `DES_i` for each edit stage; empty outside editing runs.
    pub des_per_edit: Vec<f64>,
    pub des: Option<f64>,
    /// Drift of each edit stage relative to the previous one.
    pub id_drift: Vec<f64>,
    pub samples: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_acc(spec: &AttributeSpec, acc: &AccReport, config: serde_json::Value) -> Self {
        Self {
            attributes: spec.iter().map(|a| a.name.clone()).collect(),
            per_attribute_acc: acc.per_attribute.clone(),
            aggregate_acc: acc.aggregate,
            des_per_edit: Vec::new(),
            des: None,
            id_drift: Vec::new(),
            samples: acc.samples,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Numeric(format!("cannot encode report: {e}")))
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["aggregate_acc".to_string()];
        h.extend(self.attributes.iter().map(|a| format!("acc_{a}")));
        h.extend(["des", "id_drift_mean", "samples"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut r = vec![self.aggregate_acc.to_string()];
        r.extend(self.per_attribute_acc.iter().map(|&v| opt(v)));
        r.push(opt(self.des));
        let drift = (!self.id_drift.is_empty())
            .then(|| self.id_drift.iter().sum::<f64>() / self.id_drift.len() as f64);
        r.push(opt(drift));
        r.push(self.samples.to_string());
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::worldgen::{make_generator, GeneratorKind, World};

    fn code(entries: Vec<Option<AttrValue>>) -> AttributeCode {
        let mut c = AttributeCode::empty(entries.len());
        for (i, v) in entries.into_iter().enumerate() {
            c.set(i, v);
        }
        c
    }

    #[test]
    fn acc_examples() {
        let labels = vec![vec![AttrValue::Category(1), AttrValue::Level(0.5)]; 10];
        let t = code(vec![Some(AttrValue::Category(1)), Some(AttrValue::Level(0.5))]);
        let r = acc_from_labels(&labels, &[t]).unwrap();
        assert_eq!(r.aggregate, 1.0);
        assert_eq!(r.per_attribute, vec![Some(1.0), Some(1.0)]);

        let mut rng = Stream::new(4);
        let random: Vec<Vec<AttrValue>> =
            (0..10_000).map(|_| vec![AttrValue::Category(rng.below(2))]).collect();
        let r = acc_from_labels(&random, &[code(vec![Some(AttrValue::Category(0))])]).unwrap();
        assert!((r.aggregate - 0.5).abs() < 0.02);
        assert!(acc_from_labels(&random, &[code(vec![None])]).is_err());
    }

    #[test]
    fn acc_is_permutation_invariant() {
        let w = World::half_plane(2).unwrap();
        let z = RealArray::new(vec![50, 2], Stream::new(2).normal_vec(100)).unwrap();
        let mut rows: Vec<Vec<f64>> = z.row_iter().map(<[f64]>::to_vec).collect();
        rows.reverse();
        let zr = RealArray::from_rows(&rows).unwrap();
        let t = [code(vec![Some(AttrValue::Category(1))])];
        let a = acc_score(&z, &t, &w.truth, &w.generator).unwrap();
        let b = acc_score(&zr, &t, &w.truth, &w.generator).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn truth_degree_is_boolean_on_categories() {
        let spec = AttributeSpec::new(vec![
            crate::worldgen::Attribute::discrete("a", 2),
            crate::worldgen::Attribute::discrete("b", 4),
            crate::worldgen::Attribute::continuous("c"),
        ])
        .unwrap();
        let labels = [AttrValue::Category(1), AttrValue::Category(2), AttrValue::Level(0.6)];
        let d = |t: &str| truth_degree(&EnergyExpr::parse(t, &spec).unwrap().root, &labels);
        assert_eq!(d("a=1"), 1.0);
        assert_eq!(d("a=1, b=3"), 0.0);
        assert_eq!(d("OR(a=0, b=2)"), 1.0);
        assert_eq!(d("NOT(a=1, b=2)"), 0.0);
        assert_eq!(d("NOT(a=1, b=0)"), 1.0);
        assert!((d("c=0.5") - 0.9).abs() < 1e-12);
    }

    #[test]
    fn des_examples() {
        assert_eq!(des_score(&[0.5, 0.8], &[1.0, 0.8], 0).unwrap(), 1.0);
        assert_eq!(des_score(&[0.5, 0.8], &[0.5, 0.8], 0).unwrap(), 0.0);
        let d = des_score(&[0.6, 0.8], &[0.9, 0.7], 0).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
        assert_eq!(des_score(&[1.0, 0.5], &[1.0, 0.5], 0).unwrap(), 0.0);
        let worse = des_score(&[0.6, 0.8], &[0.9, 0.6], 0).unwrap();
        assert!(worse < d);
        assert!(des_score(&[1.2], &[0.5], 0).is_err());
    }

    #[test]
    fn drift_examples() {
        let g = make_generator(GeneratorKind::Linear, 2, 2, 11).unwrap();
        let mut rng = Stream::new(8);
        let a = RealArray::new(vec![1000, 2], rng.normal_vec(2000)).unwrap();
        let b = RealArray::new(vec![1000, 2], rng.normal_vec(2000)).unwrap();
        assert_eq!(id_drift(&a, &a, &g).unwrap(), 0.0);
        let fresh = id_drift(&a, &b, &g).unwrap();
        assert!((fresh - 1.0).abs() < 0.1, "{fresh}");
        let Generator::Linear { matrix, offset } = &g else {
            unreachable!()
        };
        let scaled = Generator::linear(
            RealArray::new(vec![2, 2], matrix.data().iter().map(|v| 3.0 * v).collect()).unwrap(),
            offset.clone(),
        )
        .unwrap();
        let again = id_drift(&a, &b, &scaled).unwrap();
        assert!((again - fresh).abs() < 1e-12);
        let one = RealArray::zeros(vec![1, 2]);
        assert!(id_drift(&one, &one, &g).is_err());
    }
}
