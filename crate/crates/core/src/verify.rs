//! Self-checks runnable outside the test harness: the whitened truncation
//! loss identity and its optimality, exactness of the FFN split at full rank,
//! and the greedy allocator against exhaustive search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::allocator::{exhaustive_allocate, greedy_allocate, uniform_allocate, AllocOptions, ComponentSpectrum};
use crate::calibration::EnergyProfile;
use crate::calibration::LayerStats;
use crate::decomposer::{
    data_weighted_loss_sq, partition_neurons, split_ffn, truncate, whiten_and_decompose, BlockId, DecomposeOptions,
    FfnRanks, SelectionRule,
};
use crate::error::Result;
use crate::linalg::{svd, DampingPolicy, Matrix};
use crate::model::forward::gated;
use crate::model::{ComponentKind, LayerWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A random weight and correlated activations with at least `2·d_in` rows.
pub struct Instance {
    pub w: Matrix,
    pub x: Matrix,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d_in = rng.gen_range(2..=64);
    let d_out = rng.gen_range(2..=64);
    let tokens = 2 * d_in + rng.gen_range(0..=64);
    let mix = gaussian(rng, d_in, d_in);
    let x = gaussian(rng, tokens, d_in).matmul(&mix).expect("conforming");
    Instance {
        w: gaussian(rng, d_in, d_out),
        x,
    }
}

/// Relative error with a floor of `1e-9` of the total energy, so ranks
/// whose loss is numerically zero are compared absolutely.
fn relative(found: f64, expected: f64, total: f64) -> f64 {
    (found - expected).abs() / expected.max(1e-9 * total).max(f64::MIN_POSITIVE)
}

/// `‖X(W − W′_k)‖² = Σ_{i≥k} σᵢ²` for every rank of `trials` instances.
pub fn truncation_identity(trials: usize, seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let inst = random_instance(&mut rng);
        let ws = whiten_and_decompose(&inst.w, &inst.x.tr_matmul(&inst.x)?, &DampingPolicy::none())?;
        let total = ws.truncation_loss_sq(0);
        for k in 1..=ws.full_rank {
            let approx = truncate(&ws, k)?.to_dense();
            let loss = data_weighted_loss_sq(&inst.x, &inst.w, &approx)?;
            worst = worst.max(relative(loss, ws.truncation_loss_sq(k), total));
        }
    }
    Ok(CheckResult {
        name: "truncation-identity",
        passed: worst <= tol,
        detail: format!("{trials} instances, worst relative error {worst:.3e} (tolerance {tol:.0e})"),
    })
}

/// Rank-`k` competitors: unweighted truncation, perturbed optimal factors,
/// random subsets of whitened triplets, projections onto random subspaces.
fn alternatives(rng: &mut ChaCha8Rng, inst: &Instance, k: usize, count: usize) -> Result<Vec<Matrix>> {
    let ws = whiten_and_decompose(&inst.w, &inst.x.tr_matmul(&inst.x)?, &DampingPolicy::none())?;
    let best = truncate(&ws, k)?;
    let plain = svd(&inst.w)?;
    let mut out = vec![plain.reconstruct_rank(k).expect("k within rank")];
    while out.len() < count {
        match out.len() % 3 {
            0 => {
                let scale = 10f64.powf(rng.gen_range(-4.0..0.0));
                let a = best.a.add(
                    &gaussian(rng, best.a.rows(), k)
                        .scale(scale * best.a.frobenius_norm() / (best.a.data().len() as f64).sqrt()),
                )?;
                let b = best.b.add(
                    &gaussian(rng, k, best.b.cols())
                        .scale(scale * best.b.frobenius_norm() / (best.b.data().len() as f64).sqrt()),
                )?;
                out.push(a.matmul(&b)?);
            }
            1 => {
                let r = ws.full_rank;
                let mut idx: Vec<usize> = (0..r).collect();
                for i in 0..k {
                    let j = rng.gen_range(i..r);
                    idx.swap(i, j);
                }
                idx.truncate(k);
                idx.sort_unstable();
                let u = ws.svd.u.select_columns(&idx).expect("nonempty");
                let vt = ws.svd.vt.select_rows(&idx).expect("nonempty");
                let s: Vec<f64> = idx.iter().map(|&i| ws.svd.sigma[i]).collect();
                let whitened = u.matmul(&Matrix::diag(&s))?.matmul(&vt)?;
                out.push(crate::linalg::solve_lower_transposed(&ws.chol, &whitened)?);
            }
            _ => {
                let q = gaussian(rng, inst.w.cols(), k);
                let basis = svd(&q)?.u.first_columns(k).expect("k columns");
                let p = basis.matmul_tr(&basis)?;
                out.push(inst.w.matmul(&p)?);
            }
        }
    }
    Ok(out)
}

/// The whitened truncation never loses to `alternatives` rank-k matrices.
pub fn truncation_optimality(trials: usize, alternatives_per_trial: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut closest = f64::INFINITY;
    for _ in 0..trials {
        let inst = random_instance(&mut rng);
        let ws = whiten_and_decompose(&inst.w, &inst.x.tr_matmul(&inst.x)?, &DampingPolicy::none())?;
        let k = rng.gen_range(1..=ws.full_rank);
        let best = data_weighted_loss_sq(&inst.x, &inst.w, &truncate(&ws, k)?.to_dense())?;
        let scale = ws.truncation_loss_sq(0);
        for alt in alternatives(&mut rng, &inst, k, alternatives_per_trial)? {
            let loss = data_weighted_loss_sq(&inst.x, &inst.w, &alt)?;
            if loss < best - 1e-9 * scale {
                violations += 1;
            }
            closest = closest.min((loss - best) / scale.max(f64::MIN_POSITIVE));
        }
    }
    Ok(CheckResult {
        name: "truncation-optimality",
        passed: violations == 0,
        detail: format!(
            "{trials} instances x {alternatives_per_trial} alternatives, {violations} beat the truncation, smallest margin {closest:.3e}"
        ),
    })
}

/// A random FFN layer with calibration inputs and its statistics.
pub fn random_ffn(
    rng: &mut ChaCha8Rng,
    d_model: usize,
    d_ff: usize,
    tokens: usize,
) -> (LayerWeights, Matrix, LayerStats) {
    let s = 1.0 / (d_model as f64).sqrt();
    let layer = LayerWeights {
        attn_norm: vec![1.0; d_model],
        ffn_norm: vec![1.0; d_model],
        q: Matrix::identity(d_model),
        k: Matrix::identity(d_model),
        v: Matrix::identity(d_model),
        o: Matrix::identity(d_model),
        gate: gaussian(rng, d_model, d_ff).scale(s),
        up: gaussian(rng, d_model, d_ff).scale(s),
        down: gaussian(rng, d_ff, d_model).scale(1.0 / (d_ff as f64).sqrt()),
    };
    let x = gaussian(rng, tokens, d_model);
    let h = gated(
        &x.matmul(&layer.gate).expect("conforming"),
        &x.matmul(&layer.up).expect("conforming"),
    );
    let neuron_sq_norm = (0..d_ff)
        .map(|j| (0..tokens).map(|t| h[(t, j)] * h[(t, j)]).sum())
        .collect();
    let stats = LayerStats {
        attn_gram: x.tr_matmul(&x).expect("conforming"),
        o_gram: x.tr_matmul(&x).expect("conforming"),
        ffn_gram: x.tr_matmul(&x).expect("conforming"),
        h_gram: h.tr_matmul(&h).expect("conforming"),
        neuron_sq_norm,
    };
    (layer, x, stats)
}

/// Split FFNs at full marginal rank reproduce the dense FFN.
pub fn split_exactness(layers: usize, seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for l in 0..layers {
        let d_model = rng.gen_range(4..=24);
        let d_ff = rng.gen_range(d_model..=4 * d_model);
        let (layer, x, stats) = random_ffn(&mut rng, d_model, d_ff, 3 * d_ff);
        let gamma = rng.gen_range(0.0..=1.0);
        let profile = EnergyProfile::from_norms(&stats.neuron_sq_norm)?;
        let part = partition_neurons(l, &profile, gamma, SelectionRule::FixedFraction)?;
        let n_mn = part.marginal.len();
        let ranks = FfnRanks::shared_input(d_model.min(n_mn).max(1), n_mn.min(d_model).max(1));
        let opts = DecomposeOptions {
            damping: DampingPolicy::default(),
            dense_fallback: false,
        };
        let split = split_ffn(&layer, &stats, &part, ranks, &opts)?;
        let dense = gated(&x.matmul(&layer.gate)?, &x.matmul(&layer.up)?).matmul(&layer.down)?;
        let (out, _) = split.forward(&x, false)?;
        worst = worst.max(out.max_abs_diff(&dense));
    }
    Ok(CheckResult {
        name: "split-exactness",
        passed: worst <= tol,
        detail: format!("{layers} layers, worst max-abs difference {worst:.3e} (tolerance {tol:.0e})"),
    })
}

/// Random allocator instance: up to four blocks, full rank at most 16.
pub fn random_spectra(rng: &mut ChaCha8Rng) -> Vec<ComponentSpectrum> {
    let n = rng.gen_range(1..=4);
    (0..n)
        .map(|i| {
            let d_in = rng.gen_range(4..=16);
            let d_out = rng.gen_range(4..=24);
            let r = d_in.min(d_out);
            let decay = rng.gen_range(0.05..1.5);
            let mut s: Vec<f64> = (0..r)
                .map(|j| rng.gen_range(0.5..1.5) * (-decay * j as f64).exp())
                .collect();
            s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            ComponentSpectrum::new(BlockId::whole(i, ComponentKind::Q), s, d_in, d_out).expect("valid spectrum")
        })
        .collect()
}

/// A budget between the cheapest and the fully dense allocation.
pub fn random_budget(rng: &mut ChaCha8Rng, spectra: &[ComponentSpectrum], step: usize) -> u64 {
    let min: u64 = spectra
        .iter()
        .map(|s| ((s.d_in + s.d_out) * step).min(s.d_in * s.d_out) as u64)
        .sum();
    let max: u64 = spectra.iter().map(|s| s.dense_params()).sum();
    rng.gen_range(min..=max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub instances: usize,
    pub uniform_wins: usize,
    pub mean_gap: f64,
    pub max_gap: f64,
    pub negative_gaps: usize,
}

/// Greedy against uniform and exhaustive allocations, gaps relative to the
/// exhaustive objective.
pub fn allocator_oracle(instances: usize, step: usize, seed: u64) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = AllocOptions::with_step(step);
    let mut s = OracleSummary {
        instances,
        uniform_wins: 0,
        mean_gap: 0.0,
        max_gap: 0.0,
        negative_gaps: 0,
    };
    for _ in 0..instances {
        let spectra = random_spectra(&mut rng);
        let budget = random_budget(&mut rng, &spectra, step);
        let g = greedy_allocate(&spectra, budget, &opts)?;
        let u = uniform_allocate(&spectra, budget, &opts)?;
        let e = exhaustive_allocate(&spectra, budget, &opts)?;
        if g.objective < u.objective - 1e-12 {
            s.uniform_wins += 1;
        }
        let gap = (e.objective - g.objective) / e.objective;
        if gap < -1e-12 {
            s.negative_gaps += 1;
        }
        s.mean_gap += gap / instances as f64;
        s.max_gap = s.max_gap.max(gap);
    }
    Ok(s)
}

pub fn allocator_check(instances: usize, seed: u64) -> Result<CheckResult> {
    let s = allocator_oracle(instances, 2, seed)?;
    Ok(CheckResult {
        name: "allocator-oracle",
        passed: s.uniform_wins == 0 && s.negative_gaps == 0 && s.mean_gap <= 0.05 && s.max_gap <= 0.15,
        detail: format!(
            "{} instances, uniform better {} times, mean gap {:.3}%, max gap {:.3}%",
            s.instances,
            s.uniform_wins,
            100.0 * s.mean_gap,
            100.0 * s.max_gap
        ),
    })
}

/// Every check at its default size.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        truncation_identity(20, seed, 1e-7)?,
        truncation_optimality(20, 100, seed)?,
        split_exactness(10, seed, 1e-6)?,
        allocator_check(50, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        assert!(truncation_identity(3, 1, 1e-7).unwrap().passed);
        assert!(truncation_optimality(2, 12, 1).unwrap().passed);
        assert!(split_exactness(3, 1, 1e-6).unwrap().passed);
        assert!(allocator_check(5, 1).unwrap().passed);
    }
}
