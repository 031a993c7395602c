//! Brute-force references used to check the samplers: finite-difference
//! gradients, grid quadrature of `e^{-E}` in two dimensions, histogram
//! binning, total-variation distance and exact rejection sampling.

use std::path::Path;

use crate::energy::{EnergyExpr, LatentEnergy};
use crate::error::{Error, Result};
use crate::ndmath::{norm_sq, RealArray};
use crate::par;
use crate::rng::Stream;

/// `|a - b| / max(|a|, |b|, 1e-3)`: relative error with an absolute floor so
/// entries near zero are judged on their absolute error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `f` at `z` with step `h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    let mut probe = z.to_vec();
    (0..z.len())
        .map(|k| {
            probe[k] = z[k] + h;
            let up = f(&probe);
            probe[k] = z[k] - h;
            let down = f(&probe);
            probe[k] = z[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            resolution: 128,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.cell_width()
    }

    /// Row-major cell index of a point (first coordinate selects the row),
    /// or `None` outside the box.
    pub fn cell_of(&self, z: &[f64]) -> Option<usize> {
        let bin = |v: f64| {
            if !(v >= self.lo && v < self.hi) {
                return None;
            }
            let i = ((v - self.lo) / self.cell_width()) as usize;
            Some(i.min(self.resolution - 1))
        };
        Some(bin(z[0])? * self.resolution + bin(z[1])?)
    }

    fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !(self.hi > self.lo) {
            return Err(Error::arg("grid needs positive resolution and lo < hi"));
        }
        Ok(())
    }
}

/// Probability mass per grid cell plus the mass that fell outside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: GridSpec,
    pub cells: Vec<f64>,
    pub outside: f64,
}

impl GridDensity {
    pub fn cell(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.grid.resolution + j]
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum::<f64>() + self.outside
    }

    /// Mass of the cells whose centres satisfy `pred`.
    pub fn mass_where(&self, pred: impl Fn(f64, f64) -> bool) -> f64 {
        let r = self.grid.resolution;
        (0..r * r)
            .filter(|k| pred(self.grid.center(k / r), self.grid.center(k % r)))
            .map(|k| self.cells[k])
            .sum()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let r = self.grid.resolution;
        let k = (0..self.cells.len())
            .fold(0, |best, k| if self.cells[k] > self.cells[best] { k } else { best });
        (k / r, k % r)
    }

    /// `(z1, z2, prob)` rows at cell centres.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["z1", "z2", "prob"])?;
        let r = self.grid.resolution;
        for k in 0..r * r {
            w.write_record([
                self.grid.center(k / r).to_string(),
                self.grid.center(k % r).to_string(),
                self.cells[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Normalised `e^{-E_cond(z) - ½‖z‖²}` at the cell centres of a 2-D grid.
pub fn grid_conditional_density(energy: &dyn LatentEnergy, grid: GridSpec) -> Result<GridDensity> {
    if energy.latent_dim() != 2 {
        return Err(Error::Capability(format!(
            "grid quadrature needs a 2-D latent space, this one has {} dimensions",
            energy.latent_dim()
        )));
    }
    grid.validate()?;
    let r = grid.resolution;
    let log_w = par::try_map_indexed(r * r, |k| {
        let z = [grid.center(k / r), grid.center(k % r)];
        Ok::<_, Error>(-energy.cond_value(&z)? - 0.5 * norm_sq(&z))
    })?;
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numeric("energy is not finite on the grid".into()));
    }
    let mut cells: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let sum: f64 = cells.iter().sum();
    cells.iter_mut().for_each(|c| *c /= sum);
    Ok(GridDensity {
        grid,
        cells,
        outside: 0.0,
    })
}

/// Empirical distribution of 2-D samples over the grid.
pub fn histogram(samples: &RealArray, grid: GridSpec) -> Result<GridDensity> {
    samples.expect_batch(2, "histogram samples")?;
    grid.validate()?;
    if samples.rows() == 0 {
        return Err(Error::arg("histogram of an empty batch"));
    }
    let r = grid.resolution;
    let mut counts = vec![0u64; r * r];
    let mut outside = 0u64;
    for z in samples.row_iter() {
        match grid.cell_of(z) {
            Some(k) => counts[k] += 1,
            None => outside += 1,
        }
    }
    let n = samples.rows() as f64;
    Ok(GridDensity {
        grid,
        cells: counts.into_iter().map(|c| c as f64 / n).collect(),
        outside: outside as f64 / n,
    })
}

/// `½ Σ |p - q|`, counting the outside mass as one extra cell.
pub fn tv_distance(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    if p.grid != q.grid || p.cells.len() != q.cells.len() {
        return Err(Error::arg("tv_distance needs densities on the same grid"));
    }
    let cells: f64 = p.cells.iter().zip(&q.cells).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * (cells + (p.outside - q.outside).abs()))
}

const PROPOSAL_CHUNK: usize = 4096;
const CHUNKS_PER_WAVE: usize = 64;
/// Proposals after which a very low acceptance rate is declared infeasible.
pub const INFEASIBLE_AFTER: u64 = 100_000_000;
pub const INFEASIBLE_RATE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RejectionOutcome {
    pub samples: RealArray,
    pub proposals: u64,
    pub acceptance_rate: f64,
}

/// Accepted draws of one proposal chunk (stream `seed + chunk`).
fn run_chunk(
    energy: &dyn LatentEnergy,
    bound: f64,
    seed: u64,
    chunk: u64,
    size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = Stream::for_item(seed, chunk);
    let d = energy.latent_dim();
    let mut kept = Vec::new();
    for _ in 0..size {
        let z = rng.normal_vec(d);
        let u = rng.uniform();
        let p = (-energy.cond_value(&z)?).exp() / bound;
        if p > 1.0 + 1e-12 {
            return Err(Error::Numeric(format!(
                "acceptance probability {p} exceeds 1; the bound is not valid"
            )));
        }
        if u < p {
            kept.push(z);
        }
    }
    Ok(kept)
}

/// Exact draws from `p(z) e^{-E_cond(z)}` by rejection from the prior with
/// the structural bound of `expr`.
pub fn rejection_sample(
    expr: &EnergyExpr,
    energy: &dyn LatentEnergy,
    count: usize,
    seed: u64,
) -> Result<RejectionOutcome> {
    if count == 0 {
        return Err(Error::arg("rejection_sample needs count > 0"));
    }
    let bound = expr.acceptance_bound()?;
    let d = energy.latent_dim();
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut proposals = 0u64;
    let mut next_chunk = 0u64;
    while accepted.len() < count {
        let base = next_chunk;
        let waves = par::try_map_indexed(CHUNKS_PER_WAVE, |k| {
            run_chunk(energy, bound, seed, base + k as u64, PROPOSAL_CHUNK)
        })?;
        next_chunk += CHUNKS_PER_WAVE as u64;
        for chunk in waves {
            proposals += PROPOSAL_CHUNK as u64;
            accepted.extend(chunk);
            if accepted.len() >= count {
                break;
            }
        }
        let rate = accepted.len() as f64 / proposals as f64;
        if accepted.len() < count && proposals >= INFEASIBLE_AFTER && rate < INFEASIBLE_RATE {
            return Err(Error::Infeasible { rate, proposals });
        }
    }
    let acceptance_rate = accepted.len() as f64 / proposals as f64;
    accepted.truncate(count);
    Ok(RejectionOutcome {
        samples: RealArray::new(vec![count, d], accepted.concat())?,
        proposals,
        acceptance_rate,
    })
}

/// Acceptance rate of the rejection sampler over a fixed proposal budget.
pub fn acceptance_rate(
    expr: &EnergyExpr,
    energy: &dyn LatentEnergy,
    proposals: usize,
    seed: u64,
) -> Result<f64> {
    let bound = expr.acceptance_bound()?;
    let chunks = proposals.div_ceil(PROPOSAL_CHUNK);
    let kept = par::try_map_indexed(chunks, |k| {
        let size = PROPOSAL_CHUNK.min(proposals - k * PROPOSAL_CHUNK);
        Ok::<_, Error>(run_chunk(energy, bound, seed, k as u64, size)?.len())
    })?;
    Ok(kept.iter().sum::<usize>() as f64 / proposals as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::QuadraticEnergy;

    #[test]
    fn finite_differences_of_simple_fields() {
        let z = [0.3, -1.2, 2.5];
        let g = finite_diff_grad(|v| 0.5 * norm_sq(v), &z, 1e-4);
        for (a, b) in g.iter().zip(&z) {
            assert!((a - b).abs() < 1e-8);
        }
        let w = [1.5, -0.25, 3.0];
        let g = finite_diff_grad(|v| v.iter().zip(&w).map(|(a, b)| a * b).sum(), &z, 1e-5);
        for (a, b) in g.iter().zip(&w) {
            assert!(relative_error(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn tv_extremes() {
        let grid = GridSpec::with_resolution(4);
        let mut a = GridDensity {
            grid,
            cells: vec![0.0; 16],
            outside: 0.0,
        };
        let mut b = a.clone();
        a.cells[0] = 1.0;
        b.cells[5] = 1.0;
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
        let other = GridDensity {
            grid: GridSpec::with_resolution(8),
            cells: vec![0.0; 64],
            outside: 1.0,
        };
        assert!(tv_distance(&a, &other).is_err());
    }

    #[test]
    fn prior_grid_is_normalised_and_peaked() {
        let zero = QuadraticEnergy { dim: 2, scale: 0.0 };
        let d = grid_conditional_density(&zero, GridSpec::default()).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-9);
        let (i, j) = d.argmax();
        assert!([63, 64].contains(&i) && [63, 64].contains(&j));
        for k in 0..128 {
            assert!((d.cell(k, 5) - d.cell(127 - k, 122)).abs() < 1e-15);
        }
        let three = QuadraticEnergy { dim: 3, scale: 0.0 };
        assert!(matches!(
            grid_conditional_density(&three, GridSpec::default()),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn histogram_counts_outside_mass() {
        let s = RealArray::new(vec![3, 2], vec![0.0, 0.0, 5.0, 0.0, -0.01, 3.99]).unwrap();
        let h = histogram(&s, GridSpec::default()).unwrap();
        assert!((h.outside - 1.0 / 3.0).abs() < 1e-15);
        assert!((h.total() - 1.0).abs() < 1e-15);
        assert_eq!(h.cell(64, 64), 1.0 / 3.0);
        assert_eq!(h.cell(63, 127), 1.0 / 3.0);
    }
}
