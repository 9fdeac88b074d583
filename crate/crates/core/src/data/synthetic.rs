//! Coupled low-rank domains with a known cross-domain map.
//!
//! Shared-entity latents `S` (entries in `[0.05, 1]`) are mapped to the target
//! domain by `g`; every other-axis entity draws a weight vector on the simplex,
//! so each noiseless rating is a convex combination of latent entries and lies
//! in `[0.05, 1]` without any clamping. Observations are Bernoulli-sampled per
//! cell.

use ndarray::{Array2, Axis as NdAxis};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use super::matrix::{Axis, Rating, RatingMatrix};
use super::DomainPair;
use crate::error::{Error, Result};
use crate::seed::{rng_for, streams};

/// Lower bound of the latent entries.
pub const LATENT_FLOOR: f64 = 0.05;
/// Noisy ratings are clamped to `[RATING_FLOOR, 1]` so that 0 stays reserved.
pub const RATING_FLOOR: f64 = 0.01;
const MAX_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossDomainMap {
    /// Target latents equal the source latents.
    Identity,
    /// Random convex mixing of the latent coordinates.
    Linear,
    /// Random monotone two-layer ReLU network, rescaled per coordinate.
    Mlp,
}

impl std::str::FromStr for CrossDomainMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!(
                "unknown cross-domain map `{other}` (identity, linear, mlp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub rank: usize,
    pub noise: f64,
    pub source_sparsity: f64,
    pub target_sparsity: f64,
    pub map: CrossDomainMap,
    pub shared_axis: Axis,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_users: 300,
            rank: 8,
            noise: 0.02,
            source_sparsity: 0.90,
            target_sparsity: 0.95,
            map: CrossDomainMap::Mlp,
            shared_axis: Axis::Items,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_users == 0 {
            return Err(Error::Config("synthetic dimensions must be >= 1".into()));
        }
        if self.rank == 0 || self.rank > self.n_items.min(self.n_users) {
            return Err(Error::Config(format!(
                "rank must be in 1..={}, got {}",
                self.n_items.min(self.n_users),
                self.rank
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        for (name, s) in [
            ("source", self.source_sparsity),
            ("target", self.target_sparsity),
        ] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!(
                    "{name} sparsity must be in [0, 1), got {s}"
                )));
            }
        }
        Ok(())
    }

    fn shared_count(&self) -> usize {
        match self.shared_axis {
            Axis::Items => self.n_items,
            Axis::Users => self.n_users,
        }
    }

    fn other_count(&self) -> usize {
        match self.shared_axis {
            Axis::Items => self.n_users,
            Axis::Users => self.n_items,
        }
    }
}

/// Ground truth behind a synthetic pair. Rows of the `shared_*` matrices follow
/// the shared axis; rows of the `*_other` matrices follow the opposite axis.
/// In item-shared mode these are the item latents `A`, `A_t = g(A)` and the
/// user latents `B_s`, `B_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub shared_latents: Vec<Vec<f64>>,
    pub target_shared_latents: Vec<Vec<f64>>,
    pub source_other: Vec<Vec<f64>>,
    pub target_other: Vec<Vec<f64>>,
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| Error::Data(format!("ragged latent rows: {e}")))
}

fn simplex_rows<R: Rng>(rows: usize, k: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::from_shape_simple_fn((rows, k), || Exp1.sample(rng));
    for mut row in out.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    out
}

fn apply_map<R: Rng>(map: CrossDomainMap, shared: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    let k = shared.ncols();
    match map {
        CrossDomainMap::Identity => shared.clone(),
        CrossDomainMap::Linear => {
            // columns of the mixing matrix lie on the simplex
            let mixing = simplex_rows(k, k, rng).reversed_axes();
            shared.dot(&mixing)
        }
        CrossDomainMap::Mlp => {
            // Non-negative weights keep the map monotone in every coordinate;
            // each hidden unit's threshold sits at a random point of the
            // latent cube, so its kink falls inside the data.
            let hidden = 2 * k;
            let w1 = Array2::from_shape_simple_fn((k, hidden), || Exp1.sample(rng));
            let w2 = Array2::from_shape_simple_fn((hidden, k), || Exp1.sample(rng));
            let anchors = Array2::from_shape_simple_fn((hidden, k), || {
                rng.random_range(LATENT_FLOOR..=1.0)
            });
            let bias = (&anchors * &w1.t()).sum_axis(NdAxis(1));
            let h = (shared.dot(&w1) - &bias).mapv(|v| v.max(0.0));
            let mut out = h.dot(&w2);
            for mut col in out.axis_iter_mut(NdAxis(1)) {
                let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let span = hi - lo;
                col.mapv_inplace(|v| {
                    let unit = if span > 0.0 { (v - lo) / span } else { 0.5 };
                    LATENT_FLOOR + (1.0 - LATENT_FLOOR) * unit
                });
            }
            out
        }
    }
}

/// Samples which cells are observed; every shared-axis row keeps at least one.
fn sample_mask<R: Rng>(rows: usize, cols: usize, sparsity: f64, rng: &mut R) -> Result<Array2<bool>> {
    let keep = 1.0 - sparsity;
    let mut mask = Array2::from_elem((rows, cols), false);
    for (r, mut row) in mask.outer_iter_mut().enumerate() {
        let mut attempt = 0;
        loop {
            row.mapv_inplace(|_| rng.random::<f64>() < keep);
            if row.iter().any(|&m| m) {
                break;
            }
            attempt += 1;
            if attempt >= MAX_REDRAWS {
                return Err(Error::Data(format!(
                    "entity {r} has no observation after {MAX_REDRAWS} draws at sparsity {sparsity}"
                )));
            }
        }
    }
    Ok(mask)
}

fn build_matrix(
    scores: &Array2<f64>,
    mask: &Array2<bool>,
    noise: &Array2<f64>,
    shared_axis: Axis,
) -> Result<RatingMatrix> {
    let (shared, other) = scores.dim();
    let mut entries = Vec::new();
    for s in 0..shared {
        for o in 0..other {
            if mask[[s, o]] {
                let value = (scores[[s, o]] + noise[[s, o]]).clamp(RATING_FLOOR, 1.0);
                let (item, user) = match shared_axis {
                    Axis::Items => (s, o),
                    Axis::Users => (o, s),
                };
                entries.push(Rating { item, user, value });
            }
        }
    }
    let (n_items, n_users) = match shared_axis {
        Axis::Items => (shared, other),
        Axis::Users => (other, shared),
    };
    RatingMatrix::new(n_items, n_users, entries)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DomainPair, SyntheticTruth)> {
    spec.validate()?;
    let k = spec.rank;
    let shared_n = spec.shared_count();
    let other_n = spec.other_count();

    let mut rng = rng_for(spec.seed, streams::SYNTH_LATENTS);
    let shared = Array2::from_shape_simple_fn((shared_n, k), || {
        rng.random_range(LATENT_FLOOR..=1.0)
    });
    let source_other = simplex_rows(other_n, k, &mut rng);
    let target_other = simplex_rows(other_n, k, &mut rng);
    let target_shared = apply_map(spec.map, &shared, &mut rng_for(spec.seed, streams::SYNTH_MAP));

    let source_scores = shared.dot(&source_other.t());
    let target_scores = target_shared.dot(&target_other.t());

    let mut noise_rng = rng_for(spec.seed, streams::SYNTH_NOISE);
    let mut draw_noise = |rows: usize, cols: usize| -> Array2<f64> {
        if spec.noise == 0.0 {
            return Array2::zeros((rows, cols));
        }
        let normal = Normal::new(0.0, spec.noise).expect("valid sigma");
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut noise_rng))
    };
    let source_noise = draw_noise(shared_n, other_n);
    let target_noise = draw_noise(shared_n, other_n);

    let source_mask = sample_mask(
        shared_n,
        other_n,
        spec.source_sparsity,
        &mut rng_for(spec.seed, streams::SYNTH_SOURCE_MASK),
    )?;
    let target_mask = sample_mask(
        shared_n,
        other_n,
        spec.target_sparsity,
        &mut rng_for(spec.seed, streams::SYNTH_TARGET_MASK),
    )?;

    let source = build_matrix(&source_scores, &source_mask, &source_noise, spec.shared_axis)?;
    let target = build_matrix(&target_scores, &target_mask, &target_noise, spec.shared_axis)?;
    let pair = DomainPair::new(source, target, spec.shared_axis)?;
    let truth = SyntheticTruth {
        spec: spec.clone(),
        shared_latents: to_rows(&shared),
        target_shared_latents: to_rows(&target_shared),
        source_other: to_rows(&source_other),
        target_other: to_rows(&target_other),
    };
    Ok((pair, truth))
}

/// Noiseless shared-axis-oriented score matrix `S_t · B_tᵀ` of the target domain.
pub fn target_scores(truth: &SyntheticTruth) -> Result<Array2<f64>> {
    let s = rows_to_array(&truth.target_shared_latents)?;
    let b = rows_to_array(&truth.target_other)?;
    Ok(s.dot(&b.t()))
}

/// Noiseless shared-axis-oriented score matrix of the source domain.
pub fn source_scores(truth: &SyntheticTruth) -> Result<Array2<f64>> {
    let s = rows_to_array(&truth.shared_latents)?;
    let b = rows_to_array(&truth.source_other)?;
    Ok(s.dot(&b.t()))
}
