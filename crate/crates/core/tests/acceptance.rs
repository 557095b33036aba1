//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero when any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slimrank_core::allocator::{greedy_allocate, uniform_allocate, AllocOptions, ComponentSpectrum};
use slimrank_core::bench::{
    ablate_neurons, calib_robustness, flop_count, rank_for_ratio, relative_spread, time_bench, AblationMode,
    AblationSpec, BenchShape,
};
use slimrank_core::calibration::{EnergyProfile, LayerStats};
use slimrank_core::decomposer::{
    partition_neurons, split_ffn, truncate, whiten_and_decompose, BlockId, DecomposeOptions, FfnRanks, SelectionRule,
};
use slimrank_core::io::{load_model, save_compressed, PipelineConfig, TensorFile};
use slimrank_core::linalg::{svd, DampingPolicy};
use slimrank_core::model::{ComponentKind, LayerWeights, ModelWeights};
use slimrank_core::pipeline::{allocate, assemble, calibrate, compress, eval_tokens, evaluate, prepare};
use slimrank_core::Matrix;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fixture() -> Result<(ModelWeights, PipelineConfig), String> {
    let cfg = PipelineConfig::load(&fixture_dir().join("toy.cfg")).map_err(|e| e.to_string())?;
    let w = load_model(&fixture_dir().join("toy_trained.bin")).map_err(|e| e.to_string())?;
    Ok((w, cfg))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Instance {
    w: Matrix,
    x: Matrix,
}

/// Twenty weight/activation pairs with `d ≤ 64` and `2·d_in` to `3·d_in`
/// tokens whose columns are correlated.
fn instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    (0..20)
        .map(|_| {
            let d_in = rng.gen_range(2..=64);
            let d_out = rng.gen_range(2..=64);
            let tokens = rng.gen_range(2 * d_in..=3 * d_in);
            let mix = gaussian(&mut rng, d_in, d_in);
            let x = gaussian(&mut rng, tokens, d_in).matmul(&mix).unwrap();
            Instance {
                w: gaussian(&mut rng, d_in, d_out),
                x,
            }
        })
        .collect()
}

/// `‖X(W − W′)‖_F²` by explicit loops over tokens and outputs.
fn loss_by_loops(x: &Matrix, w: &Matrix, w2: &Matrix) -> f64 {
    let mut total = 0.0;
    for t in 0..x.rows() {
        for j in 0..w.cols() {
            let mut acc = 0.0;
            for i in 0..w.rows() {
                acc += x[(t, i)] * (w[(i, j)] - w2[(i, j)]);
            }
            total += acc * acc;
        }
    }
    total
}

/// `Σ_j dⱼᵀ G dⱼ` with `D = W − W′` and a loop-built Gram `G = XᵀX`.
struct GramLoss {
    g: Vec<Vec<f64>>,
}

impl GramLoss {
    fn new(x: &Matrix) -> Self {
        let n = x.cols();
        let mut g = vec![vec![0.0; n]; n];
        for t in 0..x.rows() {
            for a in 0..n {
                for b in 0..n {
                    g[a][b] += x[(t, a)] * x[(t, b)];
                }
            }
        }
        GramLoss { g }
    }

    fn loss(&self, w: &Matrix, w2: &Matrix) -> f64 {
        let n = w.rows();
        let mut total = 0.0;
        for j in 0..w.cols() {
            let d: Vec<f64> = (0..n).map(|i| w[(i, j)] - w2[(i, j)]).collect();
            for a in 0..n {
                let row: f64 = (0..n).map(|b| self.g[a][b] * d[b]).sum();
                total += d[a] * row;
            }
        }
        total
    }
}

fn criterion_identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for inst in instances() {
        let ws = whiten_and_decompose(
            &inst.w,
            &inst.x.tr_matmul(&inst.x).map_err(err)?,
            &DampingPolicy::none(),
        )
        .map_err(err)?;
        let total = loss_by_loops(&inst.x, &inst.w, &Matrix::zeros(inst.w.rows(), inst.w.cols()));
        for k in 0..=ws.full_rank {
            let approx = if k == 0 {
                Matrix::zeros(inst.w.rows(), inst.w.cols())
            } else {
                truncate(&ws, k).map_err(err)?.to_dense()
            };
            let loss = loss_by_loops(&inst.x, &inst.w, &approx);
            let tail: f64 = ws.svd.sigma[k..].iter().map(|s| s * s).sum();
            let rel = (loss - tail).abs() / tail.max(1e-9 * total);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok((
        worst <= 1e-7,
        format!("20 instances, {checked} truncations, worst relative error {worst:.2e}"),
    ))
}

fn rms(m: &Matrix) -> f64 {
    m.frobenius_norm() / ((m.rows() * m.cols()) as f64).sqrt()
}

fn criterion_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut violations = 0;
    let mut margin = f64::INFINITY;
    for inst in instances() {
        let oracle = GramLoss::new(&inst.x);
        let ws = whiten_and_decompose(
            &inst.w,
            &inst.x.tr_matmul(&inst.x).map_err(err)?,
            &DampingPolicy::none(),
        )
        .map_err(err)?;
        let k = rng.gen_range(1..=ws.full_rank);
        let best_f = truncate(&ws, k).map_err(err)?;
        let best = oracle.loss(&inst.w, &best_f.to_dense());
        let plain = svd(&inst.w).map_err(err)?;
        let scale = oracle.loss(&inst.w, &Matrix::zeros(inst.w.rows(), inst.w.cols()));
        for t in 0..100 {
            let alt = match t % 4 {
                0 => plain.reconstruct_rank(k).ok_or("rank")?,
                1 => {
                    let s = 10f64.powf(rng.gen_range(-5.0..0.0)) * rms(&best_f.a);
                    let da = gaussian(&mut rng, best_f.a.rows(), k).scale(s);
                    best_f.a.add(&da).map_err(err)?.matmul(&best_f.b).map_err(err)?
                }
                2 => {
                    let s = 10f64.powf(rng.gen_range(-5.0..0.0)) * rms(&best_f.b);
                    let db = gaussian(&mut rng, k, best_f.b.cols()).scale(s);
                    best_f.a.matmul(&best_f.b.add(&db).map_err(err)?).map_err(err)?
                }
                _ => {
                    let q = gaussian(&mut rng, inst.w.cols(), k);
                    let basis = svd(&q).map_err(err)?.u.first_columns(k).ok_or("rank")?;
                    inst.w.matmul(&basis.matmul_tr(&basis).map_err(err)?).map_err(err)?
                }
            };
            let loss = oracle.loss(&inst.w, &alt);
            if loss < best - 1e-9 * scale {
                violations += 1;
            }
            margin = margin.min((loss - best) / scale);
        }
    }
    Ok((
        violations == 0,
        format!(
            "20 instances x 100 alternatives, {violations} beat the truncation, smallest relative margin {margin:.2e}"
        ),
    ))
}

/// Dense SiLU-gated FFN by explicit loops.
fn ffn_by_loops(layer: &LayerWeights, x: &Matrix) -> Matrix {
    let (d, f) = (layer.gate.rows(), layer.gate.cols());
    let mut out = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        for n in 0..f {
            let (mut g, mut u) = (0.0, 0.0);
            for i in 0..d {
                g += x[(t, i)] * layer.gate[(i, n)];
                u += x[(t, i)] * layer.up[(i, n)];
            }
            let h = g / (1.0 + (-g).exp()) * u;
            for j in 0..d {
                out[(t, j)] += h * layer.down[(n, j)];
            }
        }
    }
    out
}

fn criterion_split() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst = 0.0f64;
    for l in 0..10 {
        let d = rng.gen_range(4..=32);
        let f = rng.gen_range(d..=4 * d);
        let tokens = 3 * f;
        let s = 1.0 / (d as f64).sqrt();
        let layer = LayerWeights {
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
            q: Matrix::identity(d),
            k: Matrix::identity(d),
            v: Matrix::identity(d),
            o: Matrix::identity(d),
            gate: gaussian(&mut rng, d, f).scale(s),
            up: gaussian(&mut rng, d, f).scale(s),
            down: gaussian(&mut rng, f, d).scale(1.0 / (f as f64).sqrt()),
        };
        let x = gaussian(&mut rng, tokens, d);
        let g = x.matmul(&layer.gate).map_err(err)?;
        let u = x.matmul(&layer.up).map_err(err)?;
        let h = Matrix::from_fn(tokens, f, |t, n| g[(t, n)] / (1.0 + (-g[(t, n)]).exp()) * u[(t, n)]);
        let gram = x.tr_matmul(&x).map_err(err)?;
        let stats = LayerStats {
            attn_gram: gram.clone(),
            o_gram: gram.clone(),
            ffn_gram: gram,
            h_gram: h.tr_matmul(&h).map_err(err)?,
            neuron_sq_norm: (0..f).map(|n| (0..tokens).map(|t| h[(t, n)].powi(2)).sum()).collect(),
        };
        let profile = EnergyProfile::from_norms(&stats.neuron_sq_norm).map_err(err)?;
        let gamma = rng.gen_range(0.05..0.5);
        let part = partition_neurons(l, &profile, gamma, SelectionRule::FixedFraction).map_err(err)?;
        let m = part.marginal.len().max(1);
        let opts = DecomposeOptions {
            damping: DampingPolicy::default(),
            dense_fallback: false,
        };
        let split = split_ffn(&layer, &stats, &part, FfnRanks::shared_input(d.min(m), d.min(m)), &opts).map_err(err)?;
        let (y, _) = split.forward(&x, false).map_err(err)?;
        worst = worst.max(y.max_abs_diff(&ffn_by_loops(&layer, &x)));
    }
    Ok((
        worst <= 1e-6,
        format!("10 layers, worst max-abs difference {worst:.2e}"),
    ))
}

fn criterion_ablation() -> Outcome {
    let (w, cfg) = fixture()?;
    let stats = calibrate(&w, &cfg).map_err(err)?;
    let eval = eval_tokens(&cfg).map_err(err)?;
    let n = w.config.n_layers;
    let dense = evaluate(&w, &eval, &cfg).map_err(err)?;
    let top = ablate_neurons(
        &w,
        &stats,
        &AblationSpec::non_excluded(AblationMode::RemoveTopPN(0.01), &cfg, n),
    )
    .map_err(err)?;
    let bottom = ablate_neurons(
        &w,
        &stats,
        &AblationSpec::non_excluded(AblationMode::RemoveBottomMN(0.1), &cfg, n),
    )
    .map_err(err)?;
    let ppl_top = evaluate(&top, &eval, &cfg).map_err(err)?;
    let ppl_bottom = evaluate(&bottom, &eval, &cfg).map_err(err)?;
    let degradation = ppl_bottom / dense - 1.0;
    Ok((
        ppl_top > ppl_bottom && degradation < 0.25,
        format!(
            "dense {dense:.4}, top 1% PN removed {ppl_top:.4}, bottom 10% MN removed {ppl_bottom:.4} ({:+.2}%)",
            100.0 * degradation
        ),
    ))
}

/// Best objective over every admissible rank tuple, by odometer.
fn exhaustive_by_enumeration(spectra: &[ComponentSpectrum], budget: u64, step: usize) -> Option<f64> {
    let options: Vec<Vec<(u64, f64)>> = spectra
        .iter()
        .map(|s| {
            let total: f64 = s.sigma_sq.iter().sum();
            let (m, n) = (s.d_in, s.d_out);
            let mut v: Vec<(u64, f64)> = (1..)
                .map(|j| j * step)
                .take_while(|&k| k <= m.min(n) && (m + n) * k < m * n)
                .map(|k| (((m + n) * k) as u64, s.sigma_sq[..k].iter().sum::<f64>() / total))
                .collect();
            v.push(((m * n) as u64, 1.0));
            v
        })
        .collect();
    let mut idx = vec![0usize; options.len()];
    let mut best: Option<f64> = None;
    'outer: loop {
        let cost: u64 = idx.iter().zip(&options).map(|(&i, o)| o[i].0).sum();
        if cost <= budget {
            let f: f64 = idx.iter().zip(&options).map(|(&i, o)| o[i].1).sum();
            best = Some(best.map_or(f, |b| b.max(f)));
        }
        for c in 0..idx.len() {
            idx[c] += 1;
            if idx[c] < options[c].len() {
                continue 'outer;
            }
            idx[c] = 0;
        }
        return best;
    }
}

fn criterion_allocator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let step = 2;
    let opts = AllocOptions::with_step(step);
    let (mut uniform_wins, mut gaps) = (0, Vec::new());
    for i in 0..50 {
        let spectra: Vec<ComponentSpectrum> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let d_in = rng.gen_range(4..=16);
                let d_out = rng.gen_range(4..=32);
                let decay = rng.gen_range(0.05..1.5);
                let mut s: Vec<f64> = (0..d_in.min(d_out))
                    .map(|j| rng.gen_range(0.5..1.5) * (-decay * j as f64).exp())
                    .collect();
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                ComponentSpectrum::new(BlockId::whole(i, ComponentKind::Q), s, d_in, d_out).unwrap()
            })
            .collect();
        let min: u64 = spectra
            .iter()
            .map(|s| ((s.d_in + s.d_out) * step).min(s.d_in * s.d_out) as u64)
            .sum();
        let max: u64 = spectra.iter().map(|s| (s.d_in * s.d_out) as u64).sum();
        let budget = rng.gen_range(min..=max);
        let g = greedy_allocate(&spectra, budget, &opts).map_err(err)?;
        let u = uniform_allocate(&spectra, budget, &opts).map_err(err)?;
        let best = exhaustive_by_enumeration(&spectra, budget, step).ok_or("no feasible tuple")?;
        if g.objective < u.objective - 1e-12 {
            uniform_wins += 1;
        }
        gaps.push((best - g.objective) / best);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((
        uniform_wins == 0 && mean <= 0.05 && max <= 0.15,
        format!(
            "50 instances, uniform ahead {uniform_wins} times, mean gap {:.3}%, max gap {:.3}%",
            100.0 * mean,
            100.0 * max
        ),
    ))
}

/// Stored floats of every tensor in `tf`.
fn stored_params(tf: &TensorFile) -> usize {
    tf.tensors.iter().map(|(_, m)| m.rows() * m.cols()).sum()
}

fn criterion_budget() -> Outcome {
    let (w, cfg) = fixture()?;
    let stats = calibrate(&w, &cfg).map_err(err)?;
    let eval = eval_tokens(&cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let dense_path = dir.path().join("dense.bin");
    slimrank_core::io::save_model(&w, &dense_path).map_err(err)?;
    let dense_params = stored_params(&TensorFile::load(&dense_path).map_err(err)?) as f64;
    let prepared = prepare(&w, &stats, &cfg).map_err(err)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for ratio in [0.2, 0.3, 0.4, 0.5] {
        let (budget, alloc) = allocate(&prepared, &cfg.allocation, ratio).map_err(err)?;
        let out = assemble(&w, &prepared, &alloc, budget, &cfg, ratio).map_err(err)?;
        let path = dir.path().join(format!("c{ratio}.bin"));
        save_compressed(&out.model, &out.manifest, &path).map_err(err)?;
        let achieved = 1.0 - stored_params(&TensorFile::load(&path).map_err(err)?) as f64 / dense_params;
        ok &= (achieved - ratio).abs() <= 0.02;
        parts.push(format!("{ratio}->{achieved:.4}"));
    }
    let dense_ppl = evaluate(&w, &eval, &cfg).map_err(err)?;
    let (budget, alloc) = allocate(&prepared, &cfg.allocation, 0.0).map_err(err)?;
    let zero = assemble(&w, &prepared, &alloc, budget, &cfg, 0.0).map_err(err)?;
    let zero_ppl = evaluate(&zero.model, &eval, &cfg).map_err(err)?;
    let rel = (zero_ppl - dense_ppl).abs() / dense_ppl;
    ok &= rel <= 1e-3;
    Ok((
        ok,
        format!(
            "achieved {}; ratio 0 perplexity {zero_ppl:.5} vs dense {dense_ppl:.5} (relative {rel:.1e})",
            parts.join(", ")
        ),
    ))
}

fn criterion_sparsity() -> Outcome {
    let (w, cfg) = fixture()?;
    let stats = calibrate(&w, &cfg).map_err(err)?;
    let n = w.config.n_layers;
    let mut worst = 0.0f64;
    let mut fractions = Vec::new();
    for l in (0..n).filter(|&l| !cfg.exclusions.layer_excluded(l, n)) {
        let mut e = stats.layers[l].neuron_sq_norm.clone();
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = e.iter().sum();
        let mut acc = 0.0;
        let mut count = e.len();
        for (i, v) in e.iter().enumerate() {
            acc += v;
            if acc >= 0.95 * total {
                count = i + 1;
                break;
            }
        }
        let frac = count as f64 / e.len() as f64;
        worst = worst.max(frac);
        fractions.push(format!("{frac:.2}"));
    }
    Ok((
        worst < 0.5,
        format!(
            "neuron fraction at 95% energy per compressible layer [{}], worst {worst:.3}",
            fractions.join(" ")
        ),
    ))
}

/// Counts multiply-adds by walking the loops of `x·W` and `(x·A)·B`.
fn flops_by_loops(seq: usize, m: usize, n: usize, k: usize) -> (u64, u64) {
    let mut dense = 0u64;
    for _ in 0..seq {
        for _ in 0..n {
            for _ in 0..m {
                dense += 2;
            }
        }
    }
    let mut factored = 0u64;
    for _ in 0..seq {
        for _ in 0..k {
            for _ in 0..m {
                factored += 2;
            }
        }
        for _ in 0..n {
            for _ in 0..k {
                factored += 2;
            }
        }
    }
    (dense, factored)
}

fn criterion_flops() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let mut mismatches = 0;
    for i in 0..20 {
        let (seq, m, n, k) = (
            rng.gen_range(1..=16),
            rng.gen_range(1..=24),
            rng.gen_range(1..=24),
            rng.gen_range(1..=24),
        );
        let shape = BenchShape {
            label: format!("tiny{i}"),
            m,
            n,
            k: Some(k),
            repeats: 3,
            seq_len: seq,
        };
        let f = flop_count(&shape);
        if (f.dense, f.factored) != flops_by_loops(seq, m, n, k) {
            mismatches += 1;
        }
    }
    let (m, n) = (13824, 5120);
    let k = rank_for_ratio(m, n, 0.3, 16);
    let big = flop_count(&BenchShape {
        label: "13b-down".into(),
        m,
        n,
        k: Some(k),
        repeats: 3,
        seq_len: 2048,
    });
    let local = BenchShape {
        label: "local".into(),
        m: 512,
        n: 512,
        k: Some(64),
        repeats: 7,
        seq_len: 256,
    };
    let t = time_bench(std::slice::from_ref(&local), 7).map_err(err)?;
    let speedup = t[0].speedup().ok_or("no factored timing")?;
    let local_ratio = flop_count(&local).ratio();
    let speed_ok = local_ratio >= 0.5 || speedup > 1.0;
    Ok((
        mismatches == 0 && big.ratio() < 0.7 && speed_ok,
        format!(
            "20 tiny shapes, {mismatches} mismatches; 13824x5120 at k={k}: flop ratio {:.4}; 512x512 at k=64 (flop ratio {local_ratio:.3}) speedup {speedup:.2}x",
            big.ratio()
        ),
    ))
}

fn criterion_robustness() -> Outcome {
    let (w, mut cfg) = fixture()?;
    cfg.target_ratio = 0.3;
    let eval = eval_tokens(&cfg).map_err(err)?;
    let counts = calib_robustness(&w, &cfg, &[8, 16, 32], &["all"], &eval).map_err(err)?;
    let halves = calib_robustness(&w, &cfg, &[32], &["first-half", "second-half"], &eval).map_err(err)?;
    let cells: Vec<_> = counts.iter().chain(&halves).collect();
    let ppl: Vec<f64> = cells.iter().map(|c| c.perplexity).collect();
    let spread = relative_spread(&ppl);
    let listing: Vec<String> = cells
        .iter()
        .map(|c| format!("{}/{}={:.4}", c.count, c.split, c.perplexity))
        .collect();
    Ok((
        spread <= 0.15,
        format!("{}; spread {:.2}%", listing.join(" "), 100.0 * spread),
    ))
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut files = Vec::new();
    for run in 0..2 {
        let (w, cfg) = fixture()?;
        let stats = calibrate(&w, &cfg).map_err(err)?;
        let out = compress(&w, &stats, &cfg).map_err(err)?;
        let eval = eval_tokens(&cfg).map_err(err)?;
        let ppl = evaluate(&out.model, &eval, &cfg).map_err(err)?;
        let path = dir.path().join(format!("run{run}.bin"));
        save_compressed(&out.model, &out.manifest, &path).map_err(err)?;
        files.push((std::fs::read(&path).map_err(err)?, ppl));
    }
    let same = files[0].0 == files[1].0 && files[0].1 == files[1].1;
    Ok((
        same,
        format!(
            "two runs, {} bytes each, identical {same}, perplexity {:.5}",
            files[0].0.len(),
            files[0].1
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 truncation-identity", Duration::from_secs(10), criterion_identity),
        ("2 truncation-optimality", Duration::from_secs(30), criterion_optimality),
        ("3 split-exactness", Duration::from_secs(10), criterion_split),
        ("4 ablation-direction", Duration::from_secs(120), criterion_ablation),
        ("5 allocator-oracle", Duration::from_secs(60), criterion_allocator),
        ("6 budget-compliance", Duration::from_secs(300), criterion_budget),
        ("7 soft-sparsity", Duration::from_secs(60), criterion_sparsity),
        ("8 flop-accounting", Duration::from_secs(120), criterion_flops),
        (
            "9 calibration-robustness",
            Duration::from_secs(600),
            criterion_robustness,
        ),
        ("10 determinism", Duration::from_secs(120), criterion_determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (passed, detail) = match outcome {
            Ok((p, d)) => (p && elapsed <= limit, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1}s, limit {}s]",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
