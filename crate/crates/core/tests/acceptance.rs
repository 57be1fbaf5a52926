//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use catq::numerics::argmax;
use catq::pipeline::{run_demo, DemoConfig};
use catq::quantizer::{grid_bounds, range_params};
use catq::synth::{CorpusConfig, DistortionModel};
use catq::*;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| normal(rng)).collect()).unwrap()
}

fn agreement(pred: &Tensor, fp: &Tensor) -> f64 {
    let hits = pred
        .row_iter()
        .zip(fp.row_iter())
        .filter(|(a, b)| argmax(a) == argmax(b))
        .count();
    hits as f64 / pred.rows() as f64
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Per-coordinate least squares through the normal equations of the
/// design matrix `[q, 1]`.
fn ls_oracle(lq: &[Vec<f64>], fp: &[Vec<f64>], j: usize) -> (f64, f64) {
    let n = lq.len();
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { lq[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, 1, |i, _| fp[i][j]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let sol = xtx.lu().solve(&xty).expect("non-singular normal equations");
    (sol[0], sol[1])
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=500);
        let d = rng.random_range(1..=64);
        let (lq, fp) = loop {
            let mut lq = vec![vec![0.0; d]; n];
            let mut fp = vec![vec![0.0; d]; n];
            for j in 0..d {
                let mean = rng.random_range(-5.0..5.0);
                let sd = rng.random_range(0.05..3.0);
                let g = rng.random_range(-2.0..2.0);
                let b = rng.random_range(-3.0..3.0);
                for i in 0..n {
                    lq[i][j] = mean + sd * normal(&mut rng);
                    fp[i][j] = g * lq[i][j] + b + 0.5 * normal(&mut rng);
                }
            }
            let ok = (0..d).all(|j| {
                let m = lq.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                lq.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64 > 1e-4
            });
            if ok {
                break (lq, fp);
            }
        };
        let lq_refs: Vec<&[f64]> = lq.iter().map(Vec::as_slice).collect();
        let fp_refs: Vec<&[f64]> = fp.iter().map(Vec::as_slice).collect();
        let fit = fit_cluster_affine(d, &lq_refs, &fp_refs, 0.0, VarianceGuard::Additive)
            .map_err(|e| e.to_string())?;
        for j in 0..d {
            let (g, b) = ls_oracle(&lq, &fp, j);
            worst = worst.max((fit.gamma[j] - g).abs()).max((fit.beta[j] - b).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e} > 1e-6"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!("100 clusters, max |diff| {worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut tightest = f64::INFINITY;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(20..300);
        let d = rng.random_range(1..12);
        let k = rng.random_range(1..=8);
        let pca_dim = rng.random_range(1..=d.min(n - 1));
        let lq = random_matrix(&mut rng, n, d);
        let fp = lq
            .map(|v| v.tanh() * 2.0 + 0.3 * v * v)
            .unwrap();
        let noise = random_matrix(&mut rng, n, d);
        let fp = Tensor::matrix(
            n,
            d,
            fp.data().iter().zip(noise.data()).map(|(a, b)| a + 0.2 * b).collect(),
        )
        .unwrap();
        let pairs = LogitPairSet::new(lq.clone(), fp.clone(), "random").unwrap();
        let cfg = CatConfig { clusters: k, pca_dim, alpha: 1.0, seed, ..Default::default() };
        let cat = cat_fit(&pairs, &cfg).map_err(|e| e.to_string())?;
        let plain = cat_fit(&pairs, &cfg.plain_affine()).map_err(|e| e.to_string())?;
        let m_cat = mse(&cat.apply(&lq).unwrap(), &fp);
        let m_id = mse(&lq, &fp);
        let m_plain = mse(&plain.apply(&lq).unwrap(), &fp);
        ensure(m_cat <= m_id + 1e-6, || format!("seed {seed}: CAT {m_cat} > identity {m_id}"))?;
        ensure(m_cat <= m_plain + 1e-6, || format!("seed {seed}: CAT {m_cat} > plain {m_plain}"))?;
        tightest = tightest.min(m_id - m_cat).min(m_plain - m_cat);
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("50 sets, smallest slack {tightest:.2e}"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for seed in [0u64, 1, 2] {
        let model = DistortionModel::new(CorpusConfig::default(), seed).unwrap();
        let fit = model.sample(600, 1000 + 2 * seed).unwrap().pairs;
        let test = model.sample(600, 1001 + 2 * seed).unwrap().pairs;
        let cfg = CatConfig { clusters: 3, pca_dim: 5, alpha: 1.0, seed, ..Default::default() };
        let cat = cat_fit(&fit, &cfg).map_err(|e| e.to_string())?;
        let plain = cat_fit(&fit, &cfg.plain_affine()).map_err(|e| e.to_string())?;
        let none = agreement(&test.lq, &test.fp);
        let p = agreement(&plain.apply(&test.lq).unwrap(), &test.fp);
        let c = agreement(&cat.apply(&test.lq).unwrap(), &test.fp);
        ensure(c - p >= 0.02, || format!("seed {seed}: CAT {c:.3} vs plain {p:.3}"))?;
        ensure(c - none >= 0.02, || format!("seed {seed}: CAT {c:.3} vs none {none:.3}"))?;
        ensure(p <= none, || format!("seed {seed}: plain {p:.3} > none {none:.3}"))?;
        lines.push(format!("none {none:.3} plain {p:.3} cat {c:.3}"));
    }
    within(start.elapsed(), 30.0)?;
    Ok(lines.join("; "))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in [0u64, 1, 2] {
        let model = DistortionModel::new(CorpusConfig::separated(), seed).unwrap();
        let sample = model.sample(900, 50 + seed).unwrap();
        let cfg = CatConfig { clusters: 3, pca_dim: 5, seed, ..Default::default() };
        let cat = cat_fit(&sample.pairs, &cfg).map_err(|e| e.to_string())?;
        let labels = cat.assign(&sample.pairs.lq).unwrap();
        for k in 0..3 {
            let mut counts = [0usize; 3];
            for (&l, &g) in labels.iter().zip(&sample.groups) {
                if l == k {
                    counts[g] += 1;
                }
            }
            let g = (0..3).max_by_key(|&g| counts[g]).unwrap();
            ensure(counts.iter().sum::<usize>() == counts[g], || {
                format!("seed {seed}: cluster {k} mixes groups {counts:?}")
            })?;
            for j in 0..model.config.dim {
                worst = worst
                    .max((cat.affine[k].gamma[j] - model.gamma[g][j]).abs())
                    .max((cat.affine[k].beta[j] - model.beta[g][j]).abs());
            }
        }
    }
    ensure(worst <= 1e-3, || format!("max parameter error {worst:e}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("max |diff| {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100_000 {
        let bits = rng.random_range(2..=8u32);
        let a = rng.random_range(-100.0..100.0);
        let width = 10f64.powf(rng.random_range(-3.0..2.0));
        let (lo, hi) = (a, a + width);
        let (q_min, q_max) = grid_bounds(bits);
        let (scale, zp) = range_params(lo, hi, bits, q_min, q_max);
        let p = QuantParams::per_tensor(bits, scale, zp).map_err(|e| e.to_string())?;
        let f1 = rng.random_range(lo..=hi);
        let f2 = rng.random_range(lo..=hi);
        let fq = |f: f64| dequantize(quantize(f, &p), &p).unwrap();
        let (r1, r2) = (fq(f1), fq(f2));
        ensure((f1 - r1).abs() <= scale / 2.0 + 1e-12, || {
            format!("trial {trial}: |{f1} - {r1}| > {scale}/2 at b={bits}")
        })?;
        let ordered = if f1 <= f2 { r1 <= r2 } else { r1 >= r2 };
        ensure(ordered, || format!("trial {trial}: order broken for {f1}, {f2}"))?;
    }
    within(start.elapsed(), 5.0)?;
    Ok("100000 triples".into())
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let calib = random_matrix(&mut rng, 256, 16);
    let mut parts = Vec::new();
    for (w, a) in [(2u32, 2u32), (4, 4)] {
        let net = TinyNet::random(&[16, 32, 10], QuantSpec::wa(w, a), 7).unwrap();
        let init = net.init_quant_params(&calib).unwrap();
        let state = refine(&net, &calib, &CalibConfig::default(), CalibState::new(init))
            .map_err(|e| e.to_string())?;
        let trace: Vec<f64> = state.trace.iter().map(|e| e.l_cat).collect();
        ensure(trace.windows(2).all(|p| p[1] <= p[0]), || {
            format!("W{w}A{a} trace increases: {trace:?}")
        })?;
        let (first, last) = (trace[0], *trace.last().unwrap());
        let drop = (first - last) / first;
        if w == 2 {
            ensure(drop >= 0.01, || format!("W2A2 relative drop {drop:.4} < 1%"))?;
        }
        parts.push(format!("W{w}A{a} {first:.4} -> {last:.4} ({:.1}%)", 100.0 * drop));
    }
    within(start.elapsed(), 60.0)?;
    Ok(parts.join("; "))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lq = random_matrix(&mut rng, 200, 6);
    let fp = lq.map(|v| 1.5 * v - 0.3 + (3.0 * v).sin() * 0.2).unwrap();
    let pairs = LogitPairSet::new(lq.clone(), fp, "blend").unwrap();
    let cfg = CatConfig { clusters: 4, pca_dim: 3, seed: 7, ..Default::default() };
    let art = cat_fit(&pairs, &cfg).map_err(|e| e.to_string())?;
    let test = random_matrix(&mut rng, 100, 6);
    let labels = art.assign(&test).unwrap();
    let mut affine = Vec::with_capacity(test.len());
    for (row, &l) in test.row_iter().zip(&labels) {
        let a = &art.affine[l];
        affine.extend(row.iter().zip(&a.gamma).zip(&a.beta).map(|((q, g), b)| g * q + b));
    }

    let id = art.apply_with_alpha(&test, 0.0).unwrap();
    ensure(id.data() == test.data(), || "alpha = 0 is not the identity".into())?;
    let full = art.apply_with_alpha(&test, 1.0).unwrap();
    ensure(full.data() == affine.as_slice(), || "alpha = 1 is not the affine map".into())?;
    for alpha in [0.25, 0.5, 0.75] {
        let blend = art.apply_with_alpha(&test, alpha).unwrap();
        for ((b, q), a) in blend.data().iter().zip(test.data()).zip(&affine) {
            let want = (1.0 - alpha) * q + alpha * a;
            ensure((b - want).abs() <= 1e-12, || format!("alpha {alpha}: {b} vs {want}"))?;
        }
    }
    Ok("endpoints bit-exact, interior within 1e-12".into())
}

fn count_reals(v: &serde_json::Value) -> usize {
    match v {
        serde_json::Value::Number(_) => 1,
        serde_json::Value::Array(items) => items.iter().map(count_reals).sum(),
        _ => 0,
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = Vec::new();
    for (k, pca_dim, d) in [(1usize, 1usize, 4usize), (3, 2, 5), (8, 5, 10), (16, 10, 12)] {
        let lq = random_matrix(&mut rng, 120, d);
        let fp = lq.map(|v| 0.9 * v + 0.1).unwrap();
        let pairs = LogitPairSet::new(lq, fp, "count").unwrap();
        let cfg = CatConfig { clusters: k, pca_dim, seed: 8, ..Default::default() };
        let art = cat_fit(&pairs, &cfg).map_err(|e| e.to_string())?;
        let json: serde_json::Value =
            serde_json::from_str(&catq::io::to_canonical_json(&art).unwrap()).unwrap();
        let affine: usize = json["affine"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| count_reals(&a["gamma"]) + count_reals(&a["beta"]))
            .sum();
        let centroids = count_reals(&json["clusters"]["centroids"]);
        ensure(affine == 2 * k * d, || format!("K={k} d={d}: {affine} affine reals"))?;
        ensure(centroids == k * pca_dim, || format!("K={k}: {centroids} centroid reals"))?;
        let pc = art.parameter_count();
        ensure(pc.affine == affine && pc.centroids == centroids, || {
            format!("parameter_count {pc:?} disagrees with serialized counts")
        })?;
        checked.push(format!("{}", affine + centroids));
    }
    Ok(format!("totals {}", checked.join(", ")))
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_demo(a.path(), &DemoConfig::new(42)).map_err(|e| e.to_string())?;
    run_demo(b.path(), &DemoConfig::new(42)).map_err(|e| e.to_string())?;
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    ensure(!ta.is_empty(), || "demo wrote nothing".into())?;
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for required in ["corpus/bundle.json", "corpus/eval.csv", "net/bundle.json", "net/trace.csv"] {
        ensure(names.contains(&required), || format!("missing {required}"))?;
    }
    ensure(ta.len() == tb.len(), || "different file sets".into())?;
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        ensure(na == nb && ba == bb, || format!("{na} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical", ta.len()))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, d, k) = (200, 20, 5);
    // Anisotropic data so the leading eigenvalues are well separated.
    let x = Tensor::matrix(
        n,
        d,
        (0..n * d).map(|i| normal(&mut rng) * (1.0 + (d - i % d) as f64 * 0.3)).collect(),
    )
    .unwrap();
    let model = pca_fit(&x, k).map_err(|e| e.to_string())?;
    let mean: Vec<f64> = (0..d).map(|j| x.row_iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        x.row_iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n as f64
    });
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut pca_err = 0.0f64;
    for (c, &idx) in order.iter().take(k).enumerate() {
        pca_err = pca_err.max((model.explained_variance[c] - eig.eigenvalues[idx]).abs());
        let ours = model.components.row(c);
        let theirs = eig.eigenvectors.column(idx);
        let dot: f64 = ours.iter().zip(theirs.iter()).map(|(a, b)| a * b).sum();
        let sign = dot.signum();
        for (a, b) in ours.iter().zip(theirs.iter()) {
            pca_err = pca_err.max((a - sign * b).abs());
        }
    }
    ensure(pca_err <= 1e-6, || format!("PCA deviates from eigensolver by {pca_err:e}"))?;

    let mut good = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(6..=12);
        let kk = rng.random_range(2..=3);
        let pts = random_matrix(&mut rng, n, 2);
        let fitted = kmeans_fit(&pts, kk, seed).map_err(|e| e.to_string())?;
        let best = exhaustive_inertia(&pts, kk);
        if fitted.inertia <= best * 1.05 + 1e-12 {
            good += 1;
        }
    }
    ensure(good >= 8, || format!("k-means within 5% on only {good}/10 seeds"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("PCA max |diff| {pca_err:.1e}; k-means optimal-within-5% on {good}/10"))
}

/// Minimum within-cluster sum of squares over every labeling of the rows.
fn exhaustive_inertia(pts: &Tensor, k: usize) -> f64 {
    let n = pts.rows();
    let total = k.pow(n as u32);
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut cost = 0.0;
        for cluster in 0..k {
            let members: Vec<&[f64]> = pts
                .row_iter()
                .zip(&labels)
                .filter(|(_, &l)| l == cluster)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                continue;
            }
            let dim = members[0].len();
            for j in 0..dim {
                let m = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>();
            }
        }
        best = best.min(cost);
    }
    best
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", criterion_1),
        ("MSE dominance", criterion_2),
        ("cluster-structured distortion", criterion_3),
        ("parameter recovery", criterion_4),
        ("quantizer contract", criterion_5),
        ("calibration monotonicity", criterion_6),
        ("blend endpoints", criterion_7),
        ("parameter-count accounting", criterion_8),
        ("determinism", criterion_9),
        ("PCA/k-means oracles", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
