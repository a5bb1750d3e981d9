//! Population oracles and seeded synthetic data generators.

pub mod discrete;
pub mod first_stage;
pub mod linear;

pub use discrete::{
    completeness_rank, random_population, sample_discrete, true_j, DiscreteDims, DiscretePopulation, LabeledMatrix, Var,
};
pub use first_stage::{sample_monotone, FirstStageOptions, FirstStagePopulation, FsAtom};
pub use linear::{sample_linear, LinVar, LinearDGPSpec, LinearMoments, LinearSample};

use rand::Rng;
use rand_distr::Exp1;

/// Draw from a symmetric Dirichlet(1) of length `k`, then floor each entry at
/// `floor` and renormalize.
pub(crate) fn dirichlet_floored<R: Rng>(rng: &mut R, k: usize, floor: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    normalize(&mut v);
    if floor > 0.0 {
        for x in &mut v {
            *x = x.max(floor);
        }
        normalize(&mut v);
    }
    v
}

pub(crate) fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    }
}

/// Inverse-CDF draw of an index from probabilities given as a cumulative table.
pub(crate) fn draw_index<R: Rng>(rng: &mut R, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("non-empty table");
    let x = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

pub(crate) fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}
