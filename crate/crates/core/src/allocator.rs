//! Budget-constrained choice of truncation ranks.
//!
//! Every decomposable block offers a ladder of levels: rank `step·j` for
//! each `j` whose factors are smaller than the dense block, topped by the
//! dense block itself. An allocation picks one level per block so that the
//! summed parameter cost fits the budget while the summed retained-energy
//! score is as large as possible.

use std::fmt;

use crate::decomposer::BlockId;
use crate::error::{Result, SlimError};

/// Squared whitened singular values of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpectrum {
    pub block: BlockId,
    /// Descending and nonnegative; at most `min(d_in, d_out)` entries.
    pub sigma_sq: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl ComponentSpectrum {
    pub fn new(block: BlockId, sigma_sq: Vec<f64>, d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(SlimError::input(format!("{block}: empty shape")));
        }
        if sigma_sq.len() > d_in.min(d_out) {
            return Err(SlimError::input(format!(
                "{block}: {} singular values for a {d_in}x{d_out} block",
                sigma_sq.len()
            )));
        }
        if sigma_sq.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SlimError::input(format!(
                "{block}: spectrum must be finite and nonnegative"
            )));
        }
        if sigma_sq.windows(2).any(|w| w[0] < w[1]) {
            return Err(SlimError::input(format!("{block}: spectrum not descending")));
        }
        Ok(ComponentSpectrum {
            block,
            sigma_sq,
            d_in,
            d_out,
        })
    }

    pub fn full_rank(&self) -> usize {
        self.d_in.min(self.d_out)
    }

    pub fn dense_params(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }

    pub fn total_energy(&self) -> f64 {
        self.sigma_sq.iter().sum()
    }

    /// True when the spectrum carries no energy, so every rank scores one.
    pub fn is_zero(&self) -> bool {
        self.total_energy() == 0.0
    }
}

/// Retained-energy fraction `Σ_{i<r} σᵢ² / Σ σᵢ²`; one for an all-zero
/// spectrum.
pub fn perf_score(spec: &ComponentSpectrum, r: usize) -> f64 {
    let total = spec.total_energy();
    if total == 0.0 {
        return 1.0;
    }
    if r >= spec.sigma_sq.len() {
        return 1.0;
    }
    let kept: f64 = spec.sigma_sq[..r].iter().sum();
    (kept / total).min(1.0)
}

/// `(d_in + d_out)·r`, capped at the dense size.
pub fn param_cost(spec: &ComponentSpectrum, r: usize) -> u64 {
    (((spec.d_in + spec.d_out) * r) as u64).min(spec.dense_params())
}

/// The level chosen for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RankLevel {
    Factored(usize),
    Dense,
}

impl RankLevel {
    /// The rank to truncate at; the dense level maps to full rank.
    pub fn rank(self, spec: &ComponentSpectrum) -> usize {
        match self {
            RankLevel::Factored(k) => k,
            RankLevel::Dense => spec.full_rank(),
        }
    }

    pub fn cost(self, spec: &ComponentSpectrum) -> u64 {
        match self {
            RankLevel::Factored(k) => ((spec.d_in + spec.d_out) * k) as u64,
            RankLevel::Dense => spec.dense_params(),
        }
    }

    pub fn score(self, spec: &ComponentSpectrum) -> f64 {
        match self {
            RankLevel::Factored(k) => perf_score(spec, k),
            RankLevel::Dense => 1.0,
        }
    }
}

impl fmt::Display for RankLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankLevel::Factored(k) => write!(f, "{k}"),
            RankLevel::Dense => f.write_str("dense"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocOptions {
    /// Ranks are multiples of this.
    pub step: usize,
    /// Admit rank zero, which drops a block entirely.
    pub allow_zero_rank: bool,
    /// Optional per-block multipliers on the score; `None` sums plain scores.
    pub weights: Option<Vec<f64>>,
}

impl Default for AllocOptions {
    fn default() -> Self {
        AllocOptions {
            step: 16,
            allow_zero_rank: false,
            weights: None,
        }
    }
}

impl AllocOptions {
    pub fn with_step(step: usize) -> Self {
        AllocOptions {
            step,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankAllocation {
    /// One level per spectrum, in input order.
    pub levels: Vec<RankLevel>,
    pub total_params: u64,
    pub objective: f64,
}

/// Admissible levels of one block in increasing cost order.
pub fn levels(spec: &ComponentSpectrum, options: &AllocOptions) -> Vec<RankLevel> {
    let step = options.step;
    let first = if options.allow_zero_rank { 0 } else { 1 };
    let mut out: Vec<RankLevel> = (first..)
        .map(|j| j * step)
        .take_while(|&k| k <= spec.full_rank() && ((spec.d_in + spec.d_out) * k) < (spec.d_in * spec.d_out))
        .map(RankLevel::Factored)
        .collect();
    out.push(RankLevel::Dense);
    out
}

fn validate(spectra: &[ComponentSpectrum], options: &AllocOptions) -> Result<()> {
    if options.step == 0 {
        return Err(SlimError::config("rank step must be positive"));
    }
    if let Some(w) = &options.weights {
        if w.len() != spectra.len() || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SlimError::config(
                "score weights must be one nonnegative number per block",
            ));
        }
    }
    Ok(())
}

struct Ladder<'a> {
    spectra: &'a [ComponentSpectrum],
    levels: Vec<Vec<RankLevel>>,
    costs: Vec<Vec<u64>>,
    scores: Vec<Vec<f64>>,
}

impl<'a> Ladder<'a> {
    fn new(spectra: &'a [ComponentSpectrum], options: &AllocOptions) -> Result<Self> {
        validate(spectra, options)?;
        let levels: Vec<Vec<RankLevel>> = spectra.iter().map(|s| levels(s, options)).collect();
        let costs = levels
            .iter()
            .zip(spectra)
            .map(|(ls, s)| ls.iter().map(|l| l.cost(s)).collect())
            .collect();
        let scores = levels
            .iter()
            .zip(spectra)
            .enumerate()
            .map(|(i, (ls, s))| {
                let w = options.weights.as_ref().map_or(1.0, |w| w[i]);
                ls.iter().map(|l| w * l.score(s)).collect()
            })
            .collect();
        Ok(Ladder {
            spectra,
            levels,
            costs,
            scores,
        })
    }

    fn min_cost(&self) -> u64 {
        self.costs.iter().map(|c| c[0]).sum()
    }

    fn check_budget(&self, budget: u64) -> Result<()> {
        let required = self.min_cost();
        if required > budget {
            return Err(SlimError::Budget {
                budget,
                required,
                shortfall: required - budget,
            });
        }
        Ok(())
    }

    fn cost(&self, idx: &[usize]) -> u64 {
        idx.iter().enumerate().map(|(c, &i)| self.costs[c][i]).sum()
    }

    fn objective(&self, idx: &[usize]) -> f64 {
        idx.iter().enumerate().map(|(c, &i)| self.scores[c][i]).sum()
    }

    fn finish(&self, idx: &[usize]) -> RankAllocation {
        let levels: Vec<RankLevel> = idx.iter().enumerate().map(|(c, &i)| self.levels[c][i]).collect();
        let total_params = idx.iter().enumerate().map(|(c, &i)| self.costs[c][i]).sum();
        let objective = idx.iter().enumerate().map(|(c, &i)| self.scores[c][i]).sum();
        debug_assert_eq!(levels.len(), self.spectra.len());
        RankAllocation {
            levels,
            total_params,
            objective,
        }
    }
}

/// Grants the affordable one-level increment with the best score gain per
/// parameter until none fits. Ties go to the larger gain, then the lower
/// index. Blocks in `frozen` are never raised.
fn fill(ladder: &Ladder, idx: &mut [usize], budget: u64, frozen: &[usize]) {
    let mut used = ladder.cost(idx);
    loop {
        let mut best: Option<(usize, f64, f64, u64)> = None;
        for (c, &i) in idx.iter().enumerate() {
            if frozen.contains(&c) || i + 1 >= ladder.levels[c].len() {
                continue;
            }
            let dcost = ladder.costs[c][i + 1] - ladder.costs[c][i];
            if used + dcost > budget {
                continue;
            }
            let df = ladder.scores[c][i + 1] - ladder.scores[c][i];
            let gain = if dcost == 0 { f64::INFINITY } else { df / dcost as f64 };
            let better = match best {
                None => true,
                Some((_, bg, bdf, _)) => gain > bg || (gain == bg && df > bdf),
            };
            if better {
                best = Some((c, gain, df, dcost));
            }
        }
        let Some((c, _, _, dcost)) = best else { return };
        idx[c] += 1;
        used += dcost;
    }
}

/// Bottom-up greedy: every block starts at its cheapest level and
/// increments are granted by [`fill`]. An exchange pass then lowers one
/// block to any cheaper level, or two blocks by one level each, refills the
/// rest and keeps the first move that raises the objective, until no move
/// does.
pub fn greedy_allocate(spectra: &[ComponentSpectrum], budget: u64, options: &AllocOptions) -> Result<RankAllocation> {
    let ladder = Ladder::new(spectra, options)?;
    ladder.check_budget(budget)?;
    let mut idx = vec![0usize; spectra.len()];
    fill(&ladder, &mut idx, budget, &[]);
    let mut current = ladder.objective(&idx);
    while let Some((trial, value)) = exchange(&ladder, &idx, budget, current) {
        idx = trial;
        current = value;
    }
    Ok(ladder.finish(&idx))
}

/// First exchange move from `idx` that beats `current`.
fn exchange(ladder: &Ladder, idx: &[usize], budget: u64, current: f64) -> Option<(Vec<usize>, f64)> {
    let try_move = |lowered: &[(usize, usize)]| {
        let mut trial = idx.to_vec();
        for &(c, level) in lowered {
            trial[c] = level;
        }
        let frozen: Vec<usize> = lowered.iter().map(|p| p.0).collect();
        fill(ladder, &mut trial, budget, &frozen);
        let value = ladder.objective(&trial);
        (value > current + 1e-12).then_some((trial, value))
    };
    for c in 0..idx.len() {
        for lower in 0..idx[c] {
            if let Some(hit) = try_move(&[(c, lower)]) {
                return Some(hit);
            }
        }
    }
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            if idx[a] > 0 && idx[b] > 0 {
                if let Some(hit) = try_move(&[(a, idx[a] - 1), (b, idx[b] - 1)]) {
                    return Some(hit);
                }
            }
        }
    }
    None
}

/// The same rank for every block: the largest multiple of the step whose
/// total cost fits. A block whose rank would not shrink it is dense.
pub fn uniform_allocate(spectra: &[ComponentSpectrum], budget: u64, options: &AllocOptions) -> Result<RankAllocation> {
    let ladder = Ladder::new(spectra, options)?;
    ladder.check_budget(budget)?;
    let at_rank = |r: usize| -> Vec<usize> {
        ladder
            .levels
            .iter()
            .map(|ls| {
                ls.iter()
                    .position(|l| matches!(l, RankLevel::Factored(k) if *k >= r))
                    .unwrap_or(ls.len() - 1)
            })
            .collect()
    };
    let cost = |idx: &[usize]| -> u64 { idx.iter().enumerate().map(|(c, &i)| ladder.costs[c][i]).sum() };
    let max_rank = spectra.iter().map(|s| s.full_rank()).max().unwrap_or(0);
    let mut best = vec![0usize; spectra.len()];
    let mut r = if options.allow_zero_rank { 0 } else { options.step };
    while r <= max_rank + options.step {
        let idx = at_rank(r);
        if cost(&idx) > budget {
            break;
        }
        best = idx;
        r += options.step;
    }
    Ok(ladder.finish(&best))
}

pub const EXHAUSTIVE_LIMIT: u128 = 10_000_000;

/// Global optimum by enumeration. Among equal objectives the
/// lexicographically smallest rank tuple wins.
pub fn exhaustive_allocate(
    spectra: &[ComponentSpectrum],
    budget: u64,
    options: &AllocOptions,
) -> Result<RankAllocation> {
    let ladder = Ladder::new(spectra, options)?;
    let candidates: u128 = ladder.levels.iter().map(|l| l.len() as u128).product();
    if candidates > EXHAUSTIVE_LIMIT {
        return Err(SlimError::TooLarge {
            candidates,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    ladder.check_budget(budget)?;
    // suffix minimum costs prune branches that cannot fit
    let n = spectra.len();
    let mut suffix_min = vec![0u64; n + 1];
    for c in (0..n).rev() {
        suffix_min[c] = suffix_min[c + 1] + ladder.costs[c][0];
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut idx = vec![0usize; n];
    search(&ladder, budget, &suffix_min, 0, 0, 0.0, &mut idx, &mut best);
    let (_, idx) = best.expect("minimum allocation is feasible");
    Ok(ladder.finish(&idx))
}

#[allow(clippy::too_many_arguments)]
fn search(
    ladder: &Ladder<'_>,
    budget: u64,
    suffix_min: &[u64],
    c: usize,
    used: u64,
    score: f64,
    idx: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if c == idx.len() {
        // enumeration is lexicographic, so only a strictly better score
        // may replace the incumbent
        if best.as_ref().is_none_or(|(b, _)| score > *b + 1e-12) {
            *best = Some((score, idx.clone()));
        }
        return;
    }
    for i in 0..ladder.levels[c].len() {
        let cost = used + ladder.costs[c][i];
        if cost + suffix_min[c + 1] > budget {
            break;
        }
        idx[c] = i;
        search(
            ladder,
            budget,
            suffix_min,
            c + 1,
            cost,
            score + ladder.scores[c][i],
            idx,
            best,
        );
    }
}

/// Parameter bookkeeping of a model about to be compressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAccounting {
    /// Every parameter of the dense model.
    pub total: u64,
    /// Parameters that stay dense no matter what: embedding, norms, head,
    /// excluded components and prime-neuron blocks.
    pub retained: u64,
    /// Cheapest admissible cost of the decomposable blocks.
    pub min_cost: u64,
}

impl ParamAccounting {
    pub fn decomposable(&self) -> u64 {
        self.total - self.retained
    }

    /// Largest fraction of the model that can be removed.
    pub fn max_ratio(&self) -> f64 {
        1.0 - (self.retained + self.min_cost) as f64 / self.total as f64
    }
}

/// Parameter budget left for the decomposable blocks when a fraction
/// `target_ratio` of the whole model is to be removed.
pub fn budget_from_ratio(acc: &ParamAccounting, target_ratio: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(SlimError::config(format!("target ratio {target_ratio} outside [0, 1)")));
    }
    let keep = ((1.0 - target_ratio) * acc.total as f64).floor() as u64;
    if keep < acc.retained + acc.min_cost || (target_ratio > 0.0 && acc.decomposable() == 0) {
        return Err(SlimError::config(format!(
            "target ratio {target_ratio} unreachable; at most {:.4} of the model can be removed",
            acc.max_ratio().max(0.0)
        )));
    }
    Ok(keep - acc.retained)
}
