//! Sampling baselines: path-integral weighted averaging and iterated elite
//! resampling, both metered by the same trajectory-evaluation budget as the
//! gradient planner.
//!
//! Determinism: perturbations are drawn sequentially from one seeded
//! generator *before* any evaluation, candidates are evaluated concurrently
//! (see [`crate::par`]), and every reduction (best pick, weighted average,
//! elite selection) runs in draw order with index tie-breaks — so a run is
//! reproducible bit-for-bit at any thread count.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::wrap_angle;
use crate::par;

use super::pipeline::{apply_constraints, evaluate_trajectory};
use super::{
    DecisionVariables, EvalBudget, LossBreakdown, LossWeights, OptimizeResult, OptimizerConfig,
    SkillSpec, TrajoptError,
};

/// Flattens the decision variables: `[x_ee,0 .. x_ee,K−1, x_go,0 .. x_go,K−1]`,
/// three components each.
fn flatten(vars: &DecisionVariables) -> DVector<f64> {
    let k = vars.horizon();
    let mut v = DVector::zeros(6 * k);
    for (i, p) in vars.x_ee.iter().chain(vars.x_go.iter()).enumerate() {
        v[3 * i] = p.x;
        v[3 * i + 1] = p.y;
        v[3 * i + 2] = p.theta;
    }
    v
}

fn unflatten(flat: &DVector<f64>, k: usize) -> DecisionVariables {
    let pose = |i: usize| {
        crate::geometry::Pose2::new(flat[3 * i], flat[3 * i + 1], wrap_angle(flat[3 * i + 2]))
    };
    DecisionVariables {
        x_ee: (0..k).map(pose).collect(),
        x_go: (k..2 * k).map(pose).collect(),
    }
}

/// Per-coordinate noise scale: σ_translation for x/y, σ_rotation for θ.
fn sigma_vector(k: usize, sigma: (f64, f64)) -> DVector<f64> {
    let mut s = DVector::zeros(6 * k);
    for i in 0..2 * k {
        s[3 * i] = sigma.0;
        s[3 * i + 1] = sigma.0;
        s[3 * i + 2] = sigma.1;
    }
    s
}

/// Standard-normal draws, one vector per sample, sequential by design.
fn draw_batch(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| DVector::from_fn(dim, |_, _| standard_normal(rng)))
        .collect()
}

/// Box–Muller standard normal from two uniform draws; keeps the stream
/// layout independent of any distribution-crate internals.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Evaluates a batch of candidates concurrently; failures score +∞ (they
/// are simply never selected). Returns `(total, breakdown)` per candidate
/// in draw order.
fn evaluate_batch(
    spec: &SkillSpec,
    cands: &[DecisionVariables],
    weights: &LossWeights,
) -> Vec<(f64, Option<LossBreakdown>)> {
    par::map_collect(cands, |c| match evaluate_trajectory(spec, c, weights) {
        Ok(e) => (e.loss.total, Some(e.loss)),
        Err(_) => (f64::INFINITY, None),
    })
}

/// Path-integral sampler: perturbs the nominal trajectory with gaussian
/// noise, softmax-weights the perturbations by loss, and shifts the nominal
/// by the weighted average.
///
/// Consumes `samples` budget units per iteration (every drawn candidate,
/// evaluable or not). The nominal itself is never evaluated, so the result
/// carries no loss; the history records the best sampled total so far. The
/// softmax temperature defaults to 0.1× the best total of the first batch.
///
/// # Errors
/// Validation errors only; sampling failures are absorbed as +∞ losses.
pub fn optimize_mppi(
    spec: &SkillSpec,
    init: &DecisionVariables,
    weights: &LossWeights,
    config: &OptimizerConfig,
) -> Result<OptimizeResult, TrajoptError> {
    spec.validate()?;
    weights.validate()?;
    let k = spec.horizon();
    let mut nominal = init.clone();
    apply_constraints(spec, &mut nominal);
    let mut flat = flatten(&nominal);
    let sigma = sigma_vector(k, config.sigma);

    let mut rng = seeded(config.seed);
    let mut budget = EvalBudget::new(config.budget);
    let mut temperature = config.mppi_temperature;
    let mut best = f64::INFINITY;
    let mut history = Vec::with_capacity(config.iterations);

    for _ in 0..config.iterations {
        let n = config.samples.min(budget.remaining());
        if n == 0 {
            break;
        }
        let deltas: Vec<DVector<f64>> = draw_batch(&mut rng, n, 6 * k)
            .into_iter()
            .map(|xi| xi.component_mul(&sigma))
            .collect();
        let cands: Vec<DecisionVariables> = deltas
            .iter()
            .map(|d| {
                let mut c = unflatten(&(&flat + d), k);
                apply_constraints(spec, &mut c);
                c
            })
            .collect();
        budget.consume_batch(n);
        let losses = evaluate_batch(spec, &cands, weights);

        let batch_best = losses
            .iter()
            .map(|(t, _)| *t)
            .fold(f64::INFINITY, f64::min);
        if batch_best < best {
            best = batch_best;
        }
        history.push(best);
        if !batch_best.is_finite() {
            continue; // nothing usable this round
        }
        let temp = *temperature.get_or_insert_with(|| {
            let t = 0.1 * batch_best.abs();
            if t > 0.0 {
                t
            } else {
                1.0
            }
        });

        let mut wsum = 0.0;
        let mut shift = DVector::zeros(6 * k);
        for (d, (total, _)) in deltas.iter().zip(&losses) {
            if !total.is_finite() {
                continue;
            }
            let w = (-(total - batch_best) / temp).exp();
            wsum += w;
            shift += d * w;
        }
        if wsum > 0.0 {
            flat += shift / wsum;
        }
    }

    let mut vars = unflatten(&flat, k);
    apply_constraints(spec, &mut vars);
    Ok(OptimizeResult {
        vars,
        loss: None,
        history,
        evaluations: budget.used(),
    })
}

/// Iterated elite resampler: draws around a running mean, keeps the top
/// `icem_elite_frac` of each batch, recenters on the elite mean, and decays
/// the noise — the scale update `σ ← decay·min(elite std, σ)` never grows,
/// so the sampling variance is non-increasing whenever `decay ≤ 1`.
///
/// Consumes `samples` budget units per iteration. Returns the best
/// evaluated sample and its loss; the history records the best total so
/// far per iteration.
///
/// # Errors
/// Validation errors, or [`TrajoptError::InfeasibleInit`]-like failure if
/// no sample ever evaluates (reported as [`TrajoptError::InvalidSkill`]
/// with context).
pub fn optimize_icem(
    spec: &SkillSpec,
    init: &DecisionVariables,
    weights: &LossWeights,
    config: &OptimizerConfig,
) -> Result<OptimizeResult, TrajoptError> {
    spec.validate()?;
    weights.validate()?;
    let k = spec.horizon();
    let mut constrained_init = init.clone();
    apply_constraints(spec, &mut constrained_init);
    let mut mean = flatten(&constrained_init);
    let mut sigma = sigma_vector(k, config.sigma);

    let mut rng = seeded(config.seed);
    let mut budget = EvalBudget::new(config.budget);
    let mut best: Option<(f64, LossBreakdown, DecisionVariables)> = None;
    let mut history = Vec::with_capacity(config.iterations);

    for _ in 0..config.iterations {
        let n = config.samples.min(budget.remaining());
        if n == 0 {
            break;
        }
        let draws: Vec<DVector<f64>> = draw_batch(&mut rng, n, 6 * k)
            .into_iter()
            .map(|xi| &mean + xi.component_mul(&sigma))
            .collect();
        let cands: Vec<DecisionVariables> = draws
            .iter()
            .map(|d| {
                let mut c = unflatten(d, k);
                apply_constraints(spec, &mut c);
                c
            })
            .collect();
        budget.consume_batch(n);
        let losses = evaluate_batch(spec, &cands, weights);

        // Rank by (loss, draw index): deterministic under ties.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            losses[a]
                .0
                .partial_cmp(&losses[b].0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        if let Some(&lead) = order.first() {
            let (total, breakdown) = &losses[lead];
            if total.is_finite() && best.as_ref().is_none_or(|(b, _, _)| total < b) {
                let bd = breakdown.expect("finite total implies a breakdown");
                best = Some((*total, bd, cands[lead].clone()));
            }
        }
        history.push(best.as_ref().map_or(f64::INFINITY, |(b, _, _)| *b));

        let n_elite = ((config.icem_elite_frac * n as f64).ceil() as usize).clamp(1, n);
        let elites: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| losses[i].0.is_finite())
            .take(n_elite)
            .collect();
        if elites.is_empty() {
            sigma *= config.icem_decay;
            continue;
        }
        let elite_flats: Vec<DVector<f64>> =
            elites.iter().map(|&i| flatten(&cands[i])).collect();
        (mean, sigma) = icem_refit(&elite_flats, &sigma, config.icem_decay);
    }

    let Some((_, breakdown, vars)) = best else {
        return Err(TrajoptError::InvalidSkill(
            "no sample produced an evaluable trajectory".into(),
        ));
    };
    Ok(OptimizeResult {
        vars,
        loss: Some(breakdown),
        history,
        evaluations: budget.used(),
    })
}

/// Elite refit: recenters on the elite mean and shrinks the per-coordinate
/// scale, `σ ← decay·min(elite std, σ)`. With every sample elite the new
/// mean is the plain batch average; the scale never grows for decay ≤ 1.
fn icem_refit(
    elites: &[DVector<f64>],
    sigma: &DVector<f64>,
    decay: f64,
) -> (DVector<f64>, DVector<f64>) {
    let dim = sigma.len();
    let count = elites.len() as f64;
    let mut mean = DVector::zeros(dim);
    for e in elites {
        mean += e;
    }
    mean /= count;
    let mut var = DVector::zeros(dim);
    for e in elites {
        let d = e - &mean;
        var += d.component_mul(&d);
    }
    var /= count;
    let mut next = DVector::zeros(dim);
    for j in 0..dim {
        next[j] = decay * var[j].sqrt().min(sigma[j]);
    }
    (mean, next)
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
