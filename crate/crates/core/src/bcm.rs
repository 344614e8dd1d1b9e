//! Bayesian committee machine over per-participant posteriors, plus the
//! grid searches that pick best/mid/worst renderings and export slices.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bo::{SearchSpace, DIMS};
use crate::error::{Error, Result};
use crate::fom::ModelParams;
use crate::gp::{GpConfig, GpPosterior};
use crate::store::write_atomic;
use crate::sysid::{lerp, unlerp};

/// Default nodes per dimension of the optima grid.
pub const DEFAULT_GRID_DENSITY: usize = 64;

/// Combined prediction of independently trained members.
#[derive(Debug)]
pub struct AggregateModel {
    members: Vec<GpPosterior>,
    space: SearchSpace,
    clamps: AtomicUsize,
}

impl Clone for AggregateModel {
    fn clone(&self) -> Self {
        AggregateModel {
            members: self.members.clone(),
            space: self.space,
            clamps: AtomicUsize::new(self.clamp_count()),
        }
    }
}

/// BCM combination of `(mean, variance)` member predictions against a prior
/// variance `k**`. Returns the clamped flag when the aggregate precision is
/// not positive; the variance is then `k**` and the mean precision-weighted.
pub fn bcm_combine(preds: &[(f64, f64)], prior_variance: f64) -> (f64, f64, bool) {
    let m = preds.len() as f64;
    let mut precision = -(m - 1.0) / prior_variance;
    let mut weight_sum = 0.0;
    let mut weighted_mean = 0.0;
    for &(mu, var) in preds {
        let p = 1.0 / var.max(1e-300);
        precision += p;
        weight_sum += p;
        weighted_mean += p * mu;
    }
    if precision > 0.0 {
        (weighted_mean / precision, 1.0 / precision, false)
    } else {
        (weighted_mean / weight_sum, prior_variance, true)
    }
}

impl AggregateModel {
    pub fn new(members: Vec<GpPosterior>, space: SearchSpace) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::invalid("aggregate needs at least one member"))?;
        let gp = *first.config();
        if members.iter().any(|m| *m.config() != gp) {
            return Err(Error::invalid("members must share one GP configuration"));
        }
        space.validate()?;
        Ok(AggregateModel {
            members,
            space,
            clamps: AtomicUsize::new(0),
        })
    }

    pub fn members(&self) -> &[GpPosterior] {
        &self.members
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn gp_config(&self) -> &GpConfig {
        self.members[0].config()
    }

    /// Number of predictions where the precision guard fired.
    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    pub fn predict(&self, query: &[f64]) -> (f64, f64) {
        if self.members.len() == 1 {
            return self.members[0].predict(query);
        }
        let preds: Vec<(f64, f64)> = self.members.iter().map(|m| m.predict(query)).collect();
        let (mean, var, clamped) = bcm_combine(&preds, self.members[0].prior_variance());
        if clamped {
            self.clamps.fetch_add(1, Ordering::Relaxed);
        }
        (mean, var)
    }
}

/// Aggregate `(mean, variance)` at a normalized query.
pub fn bcm_predict(model: &AggregateModel, query: &[f64]) -> (f64, f64) {
    model.predict(query)
}

/// Grid nodes `i / (n - 1)` along one axis.
pub fn axis(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Passivity mask over the regular `n^3` grid, flattened in
/// `(k1, b1, alpha)` lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityGrid {
    space: SearchSpace,
    n: usize,
    mask: Vec<bool>,
}

impl FeasibilityGrid {
    pub fn build(space: &SearchSpace, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("grid density must be at least 2"));
        }
        let feas = space.checker()?;
        let ax = axis(n);
        // one GL frequency response per alpha level
        let by_alpha: Vec<Vec<bool>> = ax
            .par_iter()
            .map(|&ua| {
                let alpha = lerp(space.bounds.alpha, ua);
                let gl = feas.passivity().gl_response(alpha)?;
                let mut col = Vec::with_capacity(n * n);
                for &uk in &ax {
                    for &ub in &ax {
                        let p = space.to_params(&[uk, ub, ua]);
                        col.push(feas.cheap_ok(&p) && feas.passivity().margin_with(&p, &gl) >= 0.0);
                    }
                }
                Ok(col)
            })
            .collect::<Result<_>>()?;
        let mut mask = vec![false; n * n * n];
        for (ia, col) in by_alpha.iter().enumerate() {
            for (j, &ok) in col.iter().enumerate() {
                mask[j * n + ia] = ok;
            }
        }
        Ok(FeasibilityGrid { space: *space, n, mask })
    }

    pub fn density(&self) -> usize {
        self.n
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn point(&self, index: usize) -> [f64; DIMS] {
        let n = self.n;
        let node = |i: usize| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        [node(index / (n * n)), node((index / n) % n), node(index % n)]
    }

    pub fn feasible_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub params_physical: ModelParams,
    pub x_norm: Vec<f64>,
    /// Aggregate posterior mean.
    pub score: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimaTriple {
    pub best: Optimum,
    pub mid: Optimum,
    pub worst: Optimum,
    /// `|score(mid) - (score(best) + score(worst)) / 2|`.
    pub mid_gap: f64,
}

impl OptimaTriple {
    /// Sets in `[best, mid, worst]` order.
    pub fn sets(&self) -> [&Optimum; 3] {
        [&self.best, &self.mid, &self.worst]
    }
}

/// Best, worst and midpoint renderings over the feasible grid.
pub fn select_optima(model: &AggregateModel, grid_density: usize) -> Result<OptimaTriple> {
    let grid = FeasibilityGrid::build(model.space(), grid_density)?;
    select_optima_on(model, &grid)
}

/// [`select_optima`] with a precomputed mask.
pub fn select_optima_on(model: &AggregateModel, grid: &FeasibilityGrid) -> Result<OptimaTriple> {
    if grid.space != *model.space() {
        return Err(Error::invalid("feasibility grid was built for another search space"));
    }
    let evals: Vec<(usize, f64, f64)> = grid
        .mask
        .par_iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(i, _)| {
            let (m, v) = model.predict(&grid.point(i));
            (i, m, v)
        })
        .collect();
    if evals.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    // evals is in index order, so strict comparisons keep the
    // lexicographically smallest node on ties
    let mut best = evals[0];
    let mut worst = evals[0];
    for &e in &evals[1..] {
        if e.1 > best.1 {
            best = e;
        }
        if e.1 < worst.1 {
            worst = e;
        }
    }
    let range = best.1 - worst.1;
    if range < 1e-6 {
        return Err(Error::FlatPosterior { range });
    }
    let target = 0.5 * (best.1 + worst.1);
    let mut mid = evals[0];
    for &e in &evals[1..] {
        let (de, dm) = ((e.1 - target).abs(), (mid.1 - target).abs());
        if de < dm || (de == dm && e.2 > mid.2) {
            mid = e;
        }
    }
    let optimum = |(i, score, variance): (usize, f64, f64)| {
        let x = grid.point(i);
        Optimum {
            params_physical: model.space().to_params(&x),
            x_norm: x.to_vec(),
            score,
            variance,
        }
    };
    Ok(OptimaTriple {
        best: optimum(best),
        mid: optimum(mid),
        worst: optimum(worst),
        mid_gap: (mid.1 - target).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceCell {
    pub k1_norm: f64,
    pub b1_norm: f64,
    pub mean: f64,
    pub variance: f64,
    pub feasible: bool,
}

/// Posterior over the `(k1, b1)` plane at a fixed `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub alpha: f64,
    pub alpha_norm: f64,
    pub resolution: usize,
    /// Row-major with `k1` varying slowest.
    pub cells: Vec<SliceCell>,
}

impl Slice {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k1_norm", "b1_norm", "mean", "variance", "feasible"])
            .map_err(|e| Error::Parse(e.to_string()))?;
        for c in &self.cells {
            w.write_record([
                c.k1_norm.to_string(),
                c.b1_norm.to_string(),
                c.mean.to_string(),
                c.variance.to_string(),
                c.feasible.to_string(),
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(path.as_ref(), &buf)
    }
}

/// One slice per physical `alpha` level.
pub fn export_slices(model: &AggregateModel, alpha_levels: &[f64], resolution: usize) -> Result<Vec<Slice>> {
    if resolution < 2 {
        return Err(Error::invalid("slice resolution must be at least 2"));
    }
    let space = *model.space();
    let feas = space.checker()?;
    let (lo, hi) = space.bounds.alpha;
    let ax = axis(resolution);
    alpha_levels
        .iter()
        .map(|&alpha| {
            if !(alpha >= lo && alpha <= hi) {
                return Err(Error::invalid(format!("alpha level {alpha} outside [{lo}, {hi}]")));
            }
            let ua = unlerp(space.bounds.alpha, alpha);
            let gl = feas.passivity().gl_response(alpha)?;
            let cells = ax
                .par_iter()
                .flat_map_iter(|&uk| ax.iter().map(move |&ub| (uk, ub)))
                .map(|(uk, ub)| {
                    let q = [uk, ub, ua];
                    let (mean, variance) = model.predict(&q);
                    let p = space.to_params(&q);
                    SliceCell {
                        k1_norm: uk,
                        b1_norm: ub,
                        mean,
                        variance,
                        feasible: feas.cheap_ok(&p) && feas.passivity().margin_with(&p, &gl) >= 0.0,
                    }
                })
                .collect();
            Ok(Slice { alpha, alpha_norm: ua, resolution, cells })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{laplace_fit, Label, OrdinalDataset};

    fn member(points: Vec<Vec<f64>>, labels: Vec<Label>) -> GpPosterior {
        laplace_fit(&OrdinalDataset::new(points, labels).unwrap(), &GpConfig::default()).unwrap()
    }

    #[test]
    fn hand_computed_pair() {
        let (m, v, c) = bcm_combine(&[(0.6, 0.5), (0.0, 0.5)], 1.0);
        assert!(!c);
        assert!((m - 0.4).abs() < 1e-15 && (v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uninformed_committee_is_prior() {
        let (m, v, _) = bcm_combine(&[(0.0, 1.0), (0.0, 1.0)], 1.0);
        assert_eq!((m, v), (0.0, 1.0));
        let prior = GpPosterior::prior(&GpConfig::default()).unwrap();
        let agg = AggregateModel::new(vec![prior.clone(), prior], SearchSpace::default()).unwrap();
        assert_eq!(agg.predict(&[0.2, 0.3, 0.4]), (0.0, 1.0));
    }

    #[test]
    fn precision_guard_clamps() {
        let (m, v, c) = bcm_combine(&[(0.5, 1.5), (0.1, 1.5), (0.3, 1.5)], 1.0);
        assert!(c);
        assert_eq!(v, 1.0);
        assert!((m - 0.3).abs() < 1e-15);
    }

    #[test]
    fn single_member_identity() {
        let p = member(vec![vec![0.3, 0.3, 0.3], vec![0.7, 0.6, 0.2]], vec![Label::Close, Label::Different]);
        let agg = AggregateModel::new(vec![p.clone()], SearchSpace::default()).unwrap();
        for q in [[0.3, 0.3, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.0]] {
            assert_eq!(agg.predict(&q), p.predict(&q));
        }
    }

    #[test]
    fn rejects_mixed_configs() {
        let a = GpPosterior::prior(&GpConfig::default()).unwrap();
        let b = GpPosterior::prior(&GpConfig { kernel_theta: 10.0, ..Default::default() }).unwrap();
        assert!(AggregateModel::new(vec![a, b], SearchSpace::default()).is_err());
        assert!(AggregateModel::new(vec![], SearchSpace::default()).is_err());
    }

    #[test]
    fn prior_model_is_flat() {
        let prior = GpPosterior::prior(&GpConfig::default()).unwrap();
        let agg = AggregateModel::new(vec![prior], SearchSpace::default()).unwrap();
        assert!(matches!(select_optima(&agg, 8), Err(Error::FlatPosterior { .. })));
    }

    #[test]
    fn grid_layout_is_lexicographic() {
        let g = FeasibilityGrid::build(&SearchSpace::default(), 4).unwrap();
        assert_eq!(g.point(0), [0.0, 0.0, 0.0]);
        assert_eq!(g.point(1), [0.0, 0.0, 1.0 / 3.0]);
        assert_eq!(g.point(4), [0.0, 1.0 / 3.0, 0.0]);
        assert_eq!(g.point(63), [1.0, 1.0, 1.0]);
        let feas = SearchSpace::default().checker().unwrap();
        for i in 0..64 {
            assert_eq!(g.mask()[i], feas.is_feasible(&g.point(i)), "node {i}");
        }
    }

    #[test]
    fn slices_match_pointwise_prediction() {
        let p = member(vec![vec![0.2, 0.4, 0.5]], vec![Label::Close]);
        let agg = AggregateModel::new(vec![p.clone(), p], SearchSpace::default()).unwrap();
        let slices = export_slices(&agg, &[0.01, 0.5], 5).unwrap();
        assert_eq!(slices.len(), 2);
        let feas = SearchSpace::default().checker().unwrap();
        for s in &slices {
            assert_eq!(s.cells.len(), 25);
            for c in &s.cells {
                let q = [c.k1_norm, c.b1_norm, s.alpha_norm];
                assert_eq!((c.mean, c.variance), agg.predict(&q));
                assert_eq!(c.feasible, feas.is_feasible(&q));
            }
        }
        let mut buf = Vec::new();
        slices[0].write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k1_norm,b1_norm,mean,variance,feasible\n"));
        assert_eq!(text.lines().count(), 26);
        assert!(export_slices(&agg, &[1.5], 5).is_err());
    }
}
