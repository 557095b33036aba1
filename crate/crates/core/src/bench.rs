//! Experiment harness on the toy model: neuron ablation, ratio and γ
//! sweeps, uniform versus adaptive allocation, calibration robustness,
//! energy profiles, FLOP accounting and matmul timing.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::{neuron_energy_profile, CalibStats};
use crate::error::{Result, SlimError};
use crate::io::PipelineConfig;
use crate::linalg::Matrix;
use crate::model::{ModelWeights, Token};
use crate::pipeline::{allocate, assemble, calibrate, compress, evaluate, prepare, Prepared};

/// Which end of each layer's energy ranking to remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblationMode {
    /// The most energetic fraction of neurons.
    RemoveTopPN(f64),
    /// The least energetic fraction of neurons.
    RemoveBottomMN(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub mode: AblationMode,
    pub layers: Vec<usize>,
}

impl AblationSpec {
    /// Every layer the exclusions of `cfg` leave compressible.
    pub fn non_excluded(mode: AblationMode, cfg: &PipelineConfig, n_layers: usize) -> Self {
        AblationSpec {
            mode,
            layers: (0..n_layers)
                .filter(|&l| !cfg.exclusions.layer_excluded(l, n_layers))
                .collect(),
        }
    }
}

/// Neurons of `layer` selected by `mode`, ascending.
pub fn ablation_targets(stats: &CalibStats, layer: usize, mode: AblationMode) -> Result<Vec<usize>> {
    let profile = neuron_energy_profile(stats, layer)?;
    let (fraction, top) = match mode {
        AblationMode::RemoveTopPN(f) => (f, true),
        AblationMode::RemoveBottomMN(f) => (f, false),
    };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SlimError::input(format!("ablation fraction {fraction} outside (0, 1)")));
    }
    let n = (fraction * profile.len() as f64).round() as usize;
    if n == 0 {
        return Err(SlimError::input(format!(
            "fraction {fraction} of {} neurons selects none",
            profile.len()
        )));
    }
    let chosen = if top {
        &profile.sorted[..n]
    } else {
        &profile.sorted[profile.len() - n..]
    };
    let mut idx: Vec<usize> = chosen.iter().map(|p| p.0).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Zeroes the gate and up columns and the down rows of `neurons`.
pub fn zero_neurons(weights: &mut ModelWeights, layer: usize, neurons: &[usize]) -> Result<()> {
    let d_ff = weights.config.d_ff;
    let l = weights
        .layers
        .get_mut(layer)
        .ok_or_else(|| SlimError::input(format!("layer {layer} outside the model")))?;
    for &i in neurons {
        if i >= d_ff {
            return Err(SlimError::input(format!("neuron {i} outside 0..{d_ff}")));
        }
        for r in 0..l.gate.rows() {
            l.gate[(r, i)] = 0.0;
            l.up[(r, i)] = 0.0;
        }
        l.down.row_mut(i).fill(0.0);
    }
    Ok(())
}

/// A copy of `weights` with the neurons chosen by `spec` zeroed.
pub fn ablate_neurons(weights: &ModelWeights, stats: &CalibStats, spec: &AblationSpec) -> Result<ModelWeights> {
    let mut out = weights.clone();
    for &l in &spec.layers {
        let idx = ablation_targets(stats, l, spec.mode)?;
        zero_neurons(&mut out, l, &idx)?;
    }
    Ok(out)
}

/// Per-layer fraction of neurons needed to reach each energy threshold.
pub fn energy_fractions(stats: &CalibStats, thresholds: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..stats.layers.len())
        .map(|l| {
            let p = neuron_energy_profile(stats, l)?;
            Ok(thresholds
                .iter()
                .map(|&t| p.prefix_for_energy(t) as f64 / p.len() as f64)
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub perplexity: f64,
    pub achieved_ratio: f64,
    pub objective: f64,
}

/// One row per ratio; infeasible ratios keep their error.
pub fn ratio_sweep(
    weights: &ModelWeights,
    stats: &CalibStats,
    cfg: &PipelineConfig,
    ratios: &[f64],
    eval: &[Token],
) -> Result<Vec<(f64, Result<SweepPoint>)>> {
    let prepared = prepare(weights, stats, cfg)?;
    let rows = parallel_map(ratios, |&r| {
        (r, sweep_point(weights, &prepared, cfg, &cfg.allocation, r, eval))
    });
    Ok(rows)
}

fn sweep_point(
    weights: &ModelWeights,
    prepared: &Prepared,
    cfg: &PipelineConfig,
    allocation: &str,
    ratio: f64,
    eval: &[Token],
) -> Result<SweepPoint> {
    let (budget, alloc) = allocate(prepared, allocation, ratio)?;
    let out = assemble(weights, prepared, &alloc, budget, cfg, ratio)?;
    Ok(SweepPoint {
        perplexity: evaluate(&out.model, eval, cfg)?,
        achieved_ratio: out.manifest.achieved_ratio,
        objective: alloc.objective,
    })
}

/// Perplexity at a fixed ratio for each γ (or energy threshold).
pub fn gamma_sweep(
    weights: &ModelWeights,
    stats: &CalibStats,
    cfg: &PipelineConfig,
    gammas: &[f64],
    eval: &[Token],
) -> Vec<(f64, Result<SweepPoint>)> {
    parallel_map(gammas, |&g| {
        let mut c = cfg.clone();
        c.gamma = g;
        let point =
            prepare(weights, stats, &c).and_then(|p| sweep_point(weights, &p, &c, &c.allocation, c.target_ratio, eval));
        (g, point)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub objective_uniform: f64,
    pub objective_adaptive: f64,
    pub ppl_uniform: f64,
    pub ppl_adaptive: f64,
    pub ratio_uniform: f64,
    pub ratio_adaptive: f64,
}

pub fn compare_uniform_adaptive(
    weights: &ModelWeights,
    stats: &CalibStats,
    cfg: &PipelineConfig,
    ratio: f64,
    eval: &[Token],
) -> Result<Comparison> {
    let prepared = prepare(weights, stats, cfg)?;
    let u = sweep_point(weights, &prepared, cfg, "uniform", ratio, eval)?;
    let a = sweep_point(weights, &prepared, cfg, "greedy", ratio, eval)?;
    Ok(Comparison {
        objective_uniform: u.objective,
        objective_adaptive: a.objective,
        ppl_uniform: u.perplexity,
        ppl_adaptive: a.perplexity,
        ratio_uniform: u.achieved_ratio,
        ratio_adaptive: a.achieved_ratio,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCell {
    pub count: usize,
    pub split: String,
    pub perplexity: f64,
}

/// Calibrates, compresses and evaluates once per (count, split) pair.
pub fn calib_robustness(
    weights: &ModelWeights,
    cfg: &PipelineConfig,
    counts: &[usize],
    splits: &[&str],
    eval: &[Token],
) -> Result<Vec<RobustnessCell>> {
    if counts.contains(&0) {
        return Err(SlimError::config("calibration counts must be positive"));
    }
    let cells: Vec<(usize, &str)> = counts
        .iter()
        .flat_map(|&n| splits.iter().map(move |&s| (n, s)))
        .collect();
    parallel_map(&cells, |&(n, split)| {
        let mut c = cfg.clone();
        c.calibration.n_sequences = n;
        c.calibration.split = split.to_string();
        let stats = calibrate(weights, &c)?;
        let out = compress(weights, &stats, &c)?;
        Ok(RobustnessCell {
            count: n,
            split: split.to_string(),
            perplexity: evaluate(&out.model, eval, &c)?,
        })
    })
    .into_iter()
    .collect()
}

/// `(max − min) / min` of the perplexities.
pub fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    (max - min) / min
}

/// A matmul `x·W` with `x: seq × m`, `W: m × n`, optionally factored at
/// rank `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchShape {
    pub label: String,
    pub m: usize,
    pub n: usize,
    pub k: Option<usize>,
    pub repeats: usize,
    pub seq_len: usize,
}

impl BenchShape {
    /// Factoring only saves work when `k < m·n / (m + n)`.
    pub fn factored_saves(&self) -> bool {
        self.k.is_some_and(|k| (self.m + self.n) * k < self.m * self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub dense: u64,
    /// Equal to `dense` when the shape has no rank.
    pub factored: u64,
}

impl FlopCount {
    pub fn ratio(&self) -> f64 {
        self.factored as f64 / self.dense as f64
    }
}

/// Multiply-adds counted as two flops: `2·seq·m·n` dense and
/// `2·seq·(m+n)·k` factored.
pub fn flop_count(shape: &BenchShape) -> FlopCount {
    let (s, m, n) = (shape.seq_len as u64, shape.m as u64, shape.n as u64);
    let dense = 2 * s * m * n;
    let factored = shape.k.map_or(dense, |k| 2 * s * (m + n) * k as u64);
    FlopCount { dense, factored }
}

/// Largest multiple of `step` whose factors hold at most `1 − ratio` of
/// the dense parameters.
pub fn rank_for_ratio(m: usize, n: usize, ratio: f64, step: usize) -> usize {
    let k = ((1.0 - ratio) * (m * n) as f64 / (m + n) as f64).floor() as usize;
    k / step * step
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub label: String,
    pub dense_median: f64,
    pub factored_median: Option<f64>,
    pub flops: FlopCount,
}

impl Timing {
    pub fn speedup(&self) -> Option<f64> {
        self.factored_median.map(|f| self.dense_median / f)
    }
}

pub const WARMUP_RUNS: usize = 3;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Matrix) -> f64 {
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(f());
    }
    let times = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(times)
}

/// Median seconds of dense and factored products, one shape at a time on
/// the calling thread.
pub fn time_bench(shapes: &[BenchShape], seed: u64) -> Result<Vec<Timing>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        if s.repeats < 3 {
            return Err(SlimError::input(format!("{}: at least 3 repeats are needed", s.label)));
        }
        if s.m == 0 || s.n == 0 || s.seq_len == 0 || s.k == Some(0) {
            return Err(SlimError::input(format!("{}: dimensions must be positive", s.label)));
        }
        let x = random(s.seq_len, s.m);
        let w = random(s.m, s.n);
        let dense_median = time_median(s.repeats, || x.matmul(&w).expect("conforming"));
        let factored_median = s.k.map(|k| {
            let a = random(s.m, k);
            let b = random(k, s.n);
            time_median(s.repeats, || {
                x.matmul(&a).and_then(|h| h.matmul(&b)).expect("conforming")
            })
        });
        out.push(Timing {
            label: s.label.clone(),
            dense_median,
            factored_median,
            flops: flop_count(s),
        });
    }
    Ok(out)
}

/// Tab-separated report with a `#` header naming the config hash and the
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub config_hash: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(name: &str, config_hash: u64, columns: &[&str]) -> Self {
        Report {
            name: name.to_string(),
            config_hash,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# {} config={:016x}\n# {}\n",
            self.name,
            self.config_hash,
            self.columns.join("\t")
        );
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }

    /// Horizontal bars of one numeric column, labelled by the first column.
    pub fn bars(&self, column: &str, width: usize) -> String {
        let Some(c) = self.columns.iter().position(|x| x == column) else {
            return String::new();
        };
        let vals: Vec<Option<f64>> = self.rows.iter().map(|r| r[c].parse().ok()).collect();
        let max = vals.iter().flatten().cloned().fold(0.0, f64::max);
        let mut s = String::new();
        for (r, v) in self.rows.iter().zip(vals) {
            let n = match v {
                Some(v) if max > 0.0 => ((v / max) * width as f64).round() as usize,
                _ => 0,
            };
            let _ = writeln!(s, "{:>12} {}", r[0], "#".repeat(n));
        }
        s
    }
}

/// Maps `f` over `items` on scoped threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("every item mapped")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(m: usize, n: usize, k: Option<usize>, seq: usize) -> BenchShape {
        BenchShape {
            label: "t".into(),
            m,
            n,
            k,
            repeats: 3,
            seq_len: seq,
        }
    }

    #[test]
    fn flop_formulas() {
        let f = flop_count(&shape(4, 4, Some(4), 1));
        assert_eq!(f.factored, 2 * f.dense);
        let f = flop_count(&shape(4096, 11008, Some(1024), 2048));
        assert!((f.ratio() - 0.343).abs() < 1e-3);
        assert_eq!(flop_count(&shape(5, 7, None, 3)).factored, 210);
    }

    #[test]
    fn rank_for_ratio_stays_under() {
        let k = rank_for_ratio(13824, 5120, 0.3, 16);
        assert_eq!(k % 16, 0);
        assert!((13824 + 5120) * k <= 7 * 13824 * 5120 / 10);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn too_few_repeats() {
        let mut s = shape(4, 4, None, 2);
        s.repeats = 2;
        assert!(time_bench(&[s], 0).is_err());
        assert_eq!(time_bench(&[shape(4, 4, Some(1), 2)], 0).unwrap().len(), 1);
    }

    #[test]
    fn report_layout() {
        let mut r = Report::new("sweep", 0xab, &["ratio", "ppl"]);
        r.push(vec!["0.2".into(), "3.5".into()]);
        let t = r.to_tsv();
        assert!(t.starts_with("# sweep config=00000000000000ab\n# ratio\tppl\n0.2\t3.5\n"));
        assert!(r.bars("ppl", 10).contains("##########"));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(parallel_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn spread() {
        assert!((relative_spread(&[2.0, 2.2, 2.1]) - 0.1).abs() < 1e-12);
    }
}
