//! Integer-relation regularity scoring.
//!
//! A set of coordinates is "regular" when a small integer combination of
//! them vanishes (up to a tolerance) and keeps vanishing when every value is
//! shifted by the same random offset. Relations are found with PSLQ.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{dist, Scene};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PslqOptions {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Only accept relations with every `|aᵢ| < max_coeff`; also stops the
    /// search once no relation that small can remain.
    pub max_coeff: Option<i64>,
    /// Skip relations with a zero coefficient.
    pub require_full_support: bool,
}

impl Default for PslqOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iterations: 200,
            max_coeff: None,
            require_full_support: false,
        }
    }
}

fn nint(x: f64) -> f64 {
    (x + 0.5).floor()
}

fn residual(values: &[f64], a: &[i64]) -> f64 {
    values.iter().zip(a).map(|(v, &c)| v * c as f64).sum::<f64>().abs()
}

/// Integer vector `a`, not all zero, with `|Σ aᵢvᵢ| < epsilon`, or `None`
/// when the iteration budget runs out or no admissible relation can remain.
pub fn pslq(values: &[f64], options: &PslqOptions) -> Result<Option<Vec<i64>>> {
    let n = values.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("PSLQ needs at least 2 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value".into()));
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateInput("all values are zero".into()));
    }
    let admissible = |a: &[i64]| {
        a.iter().any(|&c| c != 0)
            && (!options.require_full_support || a.iter().all(|&c| c != 0))
            && options.max_coeff.is_none_or(|m| a.iter().all(|c| c.abs() < m))
            && residual(values, a) < options.epsilon
    };
    if !options.require_full_support {
        if let Some(k) = values.iter().position(|v| v.abs() < options.epsilon) {
            let mut a = vec![0; n];
            a[k] = 1;
            if admissible(&a) {
                return Ok(Some(a));
            }
        }
    }

    let x: Vec<f64> = values.iter().map(|v| v / scale).collect();
    let gamma = (4.0f64 / 3.0).sqrt();
    let mut a_mat = vec![vec![0.0; n]; n];
    let mut b_mat = vec![vec![0.0; n]; n];
    for i in 0..n {
        a_mat[i][i] = 1.0;
        b_mat[i][i] = 1.0;
    }
    let mut s = vec![0.0; n];
    for k in 0..n {
        s[k] = x[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let t = s[0];
    let mut y: Vec<f64> = x.iter().map(|v| v / t).collect();
    for v in &mut s {
        *v /= t;
    }
    // H is n×(n−1), lower trapezoidal.
    let mut h = vec![vec![0.0; n - 1]; n];
    for i in 0..n {
        if i < n - 1 && s[i] != 0.0 {
            h[i][i] = s[i + 1] / s[i];
        }
        for j in 0..i.min(n - 1) {
            let sjj = s[j] * s[j + 1];
            if sjj != 0.0 {
                h[i][j] = -y[i] * y[j] / sjj;
            }
        }
    }

    let reduce = |i: usize, j: usize, y: &mut [f64], h: &mut [Vec<f64>], a: &mut [Vec<f64>], b: &mut [Vec<f64>]| -> bool {
        if h[j][j] == 0.0 {
            return false;
        }
        let t = nint(h[i][j] / h[j][j]);
        if t == 0.0 {
            return true;
        }
        y[j] += t * y[i];
        for k in 0..=j {
            h[i][k] -= t * h[j][k];
        }
        for k in 0..n {
            a[i][k] -= t * a[j][k];
            b[k][j] += t * b[k][i];
        }
        true
    };

    for i in 1..n {
        for j in (0..i.min(n - 1)).rev() {
            reduce(i, j, &mut y, &mut h, &mut a_mat, &mut b_mat);
        }
    }

    // The admissible column with the smallest residual.
    let candidate = |b: &[Vec<f64>]| -> Option<Vec<i64>> {
        (0..n)
            .map(|col| (0..n).map(|row| b[row][col] as i64).collect::<Vec<_>>())
            .filter(|a| admissible(a))
            .min_by(|a, c| residual(values, a).total_cmp(&residual(values, c)))
    };
    if let Some(a) = candidate(&b_mat) {
        return Ok(Some(a));
    }

    for _ in 0..options.max_iterations {
        // Exchange the rows that maximize γ^j |H_jj|.
        let mut m = 0;
        let mut best = -1.0;
        for i in 0..n - 1 {
            let sz = gamma.powi(i as i32 + 1) * h[i][i].abs();
            if sz > best {
                best = sz;
                m = i;
            }
        }
        y.swap(m, m + 1);
        h.swap(m, m + 1);
        a_mat.swap(m, m + 1);
        for row in b_mat.iter_mut() {
            row.swap(m, m + 1);
        }
        // Restore the trapezoidal shape with a Givens rotation.
        if m + 2 < n {
            let t0 = h[m][m].hypot(h[m][m + 1]);
            if t0 == 0.0 {
                break;
            }
            let (t1, t2) = (h[m][m] / t0, h[m][m + 1] / t0);
            for row in h.iter_mut().skip(m) {
                let (t3, t4) = (row[m], row[m + 1]);
                row[m] = t1 * t3 + t2 * t4;
                row[m + 1] = -t2 * t3 + t1 * t4;
            }
        }
        for i in m + 1..n {
            for j in (0..(i - 1).min(m + 1) + 1).rev() {
                if j >= n - 1 {
                    continue;
                }
                if !reduce(i, j, &mut y, &mut h, &mut a_mat, &mut b_mat) {
                    break;
                }
            }
        }
        if b_mat.iter().flatten().any(|v| !v.is_finite() || v.abs() > 1e15) {
            break;
        }
        if let Some(a) = candidate(&b_mat) {
            return Ok(Some(a));
        }
        if let Some(max) = options.max_coeff {
            // Every exact relation has norm at least 1 / max |H_jj|.
            let hmax = (0..n - 1).map(|j| h[j][j].abs()).fold(0.0, f64::max);
            if hmax == 0.0 || 1.0 / hmax > max as f64 * (n as f64).sqrt() {
                break;
            }
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerRelation {
    pub coefficients: Vec<i64>,
    pub residual: f64,
    pub subset: Vec<usize>,
    pub axis: Axis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationQuery {
    pub n: usize,
    pub eta: i64,
    pub epsilon: f64,
    pub samples_per_scene: usize,
    pub invariance_trials: usize,
    pub seed: u64,
}

impl Default for RelationQuery {
    fn default() -> Self {
        Self {
            n: 2,
            eta: 3,
            epsilon: 0.01,
            samples_per_scene: 100,
            invariance_trials: 10,
            seed: 0,
        }
    }
}

impl RelationQuery {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n) {
            return Err(Error::Config(format!("subset size {} must be 2 or 3", self.n)));
        }
        if self.eta < 2 {
            return Err(Error::Config(format!("eta {} must be at least 2", self.eta)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.invariance_trials == 0 {
            return Err(Error::Config("invariance_trials must be positive".into()));
        }
        Ok(())
    }

    fn pslq_options(&self) -> PslqOptions {
        PslqOptions {
            epsilon: self.epsilon,
            max_iterations: 200,
            max_coeff: Some(self.eta),
            require_full_support: true,
        }
    }
}

/// A relation with `0 < |aᵢ| < η` for every shifted copy of `values`, or
/// `None` if some copy has none. Of the relations found, the one with the
/// smallest worst-case residual over all copies is returned.
pub fn invariant_relation(values: &[f64], query: &RelationQuery, seed: u64) -> Result<Option<Vec<i64>>> {
    if values.len() != query.n {
        return Err(Error::shape(
            "relation_exists",
            format!("{} values for subsets of size {}", values.len(), query.n),
        ));
    }
    let options = query.pslq_options();
    let mut r = rng::seeded(seed);
    let mut copies = Vec::with_capacity(query.invariance_trials);
    let mut found = Vec::with_capacity(query.invariance_trials);
    for _ in 0..query.invariance_trials {
        let mu: f64 = r.random_range(-1.0..1.0);
        let shifted: Vec<f64> = values.iter().map(|v| v + mu).collect();
        match pslq(&shifted, &options) {
            Ok(Some(a)) => found.push(a),
            Ok(None) | Err(Error::DegenerateInput(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
        copies.push(shifted);
    }
    let worst = |a: &Vec<i64>| copies.iter().map(|c| residual(c, a)).fold(0.0, f64::max);
    Ok(found.into_iter().min_by(|a, b| worst(a).total_cmp(&worst(b))))
}

/// Whether `values` admit a bounded integer relation that survives
/// `invariance_trials` random common shifts.
pub fn relation_exists(values: &[f64], query: &RelationQuery) -> Result<bool> {
    Ok(invariant_relation(values, query, query.seed)?.is_some())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RelationRates {
    pub x: f64,
    pub y: f64,
    /// Fraction over all (subset, axis) tests.
    pub overall: f64,
}

/// Index subsets drawn for a scene: random pairs, or for triples each
/// object in turn with 2 of its 4 nearest neighbours.
fn sample_subsets(scene: &Scene, query: &RelationQuery) -> Result<Vec<Vec<usize>>> {
    let len = scene.len();
    if len < query.n {
        return Err(Error::TooFewObjects {
            have: len,
            need: query.n,
        });
    }
    let mut r = rng::seeded(rng::derive(query.seed, 0));
    let mut subsets = Vec::with_capacity(query.samples_per_scene);
    for s in 0..query.samples_per_scene {
        if query.n == 2 {
            let pick = index::sample(&mut r, len, 2);
            subsets.push(vec![pick.index(0), pick.index(1)]);
        } else {
            let anchor = s % len;
            let p = scene.objects[anchor].translation;
            let mut others: Vec<usize> = (0..len).filter(|&j| j != anchor).collect();
            others.sort_by(|&a, &b| {
                dist(p, scene.objects[a].translation)
                    .total_cmp(&dist(p, scene.objects[b].translation))
                    .then(a.cmp(&b))
            });
            others.truncate(4);
            let pick = index::sample(&mut r, others.len(), 2);
            subsets.push(vec![anchor, others[pick.index(0)], others[pick.index(1)]]);
        }
    }
    Ok(subsets)
}

/// Fractions of sampled object subsets whose coordinates, per axis, admit a
/// translation-invariant relation.
pub fn scene_relation_rates(scene: &Scene, query: &RelationQuery) -> Result<RelationRates> {
    query.validate()?;
    let subsets = sample_subsets(scene, query)?;
    if subsets.is_empty() {
        return Ok(RelationRates {
            x: 0.0,
            y: 0.0,
            overall: 0.0,
        });
    }
    let mut hits = [0usize; 2];
    for (s, subset) in subsets.iter().enumerate() {
        for axis in 0..2 {
            let values: Vec<f64> = subset.iter().map(|&i| scene.objects[i].translation[axis]).collect();
            let seed = rng::derive(query.seed, 1 + 2 * s as u64 + axis as u64);
            if invariant_relation(&values, query, seed)?.is_some() {
                hits[axis] += 1;
            }
        }
    }
    let count = subsets.len() as f64;
    Ok(RelationRates {
        x: hits[0] as f64 / count,
        y: hits[1] as f64 / count,
        overall: (hits[0] + hits[1]) as f64 / (2.0 * count),
    })
}

pub fn scene_relation_rate(scene: &Scene, query: &RelationQuery) -> Result<f64> {
    Ok(scene_relation_rates(scene, query)?.overall)
}

/// Relations found in a scene's sampled subsets, for inspection.
pub fn scene_relations(scene: &Scene, query: &RelationQuery) -> Result<Vec<IntegerRelation>> {
    query.validate()?;
    let subsets = sample_subsets(scene, query)?;
    let mut out = Vec::new();
    for (s, subset) in subsets.iter().enumerate() {
        for (axis_index, axis) in [Axis::X, Axis::Y].into_iter().enumerate() {
            let values: Vec<f64> = subset.iter().map(|&i| scene.objects[i].translation[axis_index]).collect();
            let seed = rng::derive(query.seed, 1 + 2 * s as u64 + axis_index as u64);
            if let Some(coefficients) = invariant_relation(&values, query, seed)? {
                out.push(IntegerRelation {
                    residual: residual(&values, &coefficients),
                    coefficients,
                    subset: subset.clone(),
                    axis,
                });
            }
        }
    }
    Ok(out)
}
