use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use catq::io::CsvTable;
use catq::pipeline::{
    adopt_params, default_pca_dim, eval_table, evaluate_variants, labels_from_tensor, provenance,
    run_demo, DemoConfig, SweepAxis,
};
use catq::quantizer::{MAX_BITS, MIN_BITS};
use catq::{
    cat_fit as fit_cat, load_bundle, load_model, read_tensor, refine, save_bundle, ArtifactBundle,
    CalibConfig, CalibState, CatConfig, Error, LogitPairSet, QuantSpec, Result, TinyNet,
};
use serde::Serialize;

use crate::{CalibrateArgs, CatArgs, CatFitArgs, DemoArgs, EvaluateArgs, QuantArgs, SourceArgs, SweepArgs};

pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

type Outcome = std::result::Result<(), Failure>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

fn check_bits(name: &str, bits: Option<u32>) -> Result<()> {
    match bits {
        Some(b) if !(MIN_BITS..=MAX_BITS).contains(&b) => Err(Error::Parameter(format!(
            "--{name} must be in [{MIN_BITS}, {MAX_BITS}], got {b}"
        ))),
        _ => Ok(()),
    }
}

fn override_spec(base: QuantSpec, q: &QuantArgs) -> QuantSpec {
    QuantSpec {
        weight_bits: q.wbits.or(base.weight_bits),
        act_bits: q.abits.or(base.act_bits),
        last_layer_bits: q.last_bits.or(base.last_layer_bits),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

/// Refuses to overwrite `input` with an output written to `out_dir/name`.
fn output_path(out_dir: &Path, name: &str, input: Option<&Path>) -> Result<PathBuf> {
    let out = out_dir.join(name);
    if let (Some(input), Ok(a)) = (input, out.canonicalize()) {
        if input.canonicalize().is_ok_and(|b| a == b) {
            return Err(Error::Parameter(format!(
                "output {} would overwrite the input bundle; choose another --out",
                out.display()
            )));
        }
    }
    Ok(out)
}

fn print_csv(table: &CsvTable) -> Result<()> {
    let bytes = table.to_bytes()?;
    std::io::stdout()
        .write_all(&bytes)
        .map_err(|e| Error::Internal(format!("writing to stdout: {e}")))
}

#[derive(Serialize)]
struct CalibrateRun<'a> {
    command: &'static str,
    quant_spec: QuantSpec,
    calib: &'a CalibConfig,
}

pub fn calibrate(a: CalibrateArgs) -> Outcome {
    let mut config = CalibConfig { temperature: a.temp, lambda_p: a.lambda_p, ..CalibConfig::default() };
    config.search.seed = a.seed;
    config.sample_count = a.samples.unwrap_or(0);
    (|| {
        check_bits("wbits", a.quant.wbits)?;
        check_bits("abits", a.quant.abits)?;
        check_bits("last-bits", a.quant.last_bits)?;
        if a.samples == Some(0) {
            return Err(Error::Parameter("--samples must be positive".into()));
        }
        config.validate()
    })()
    .stage("validating arguments")?;

    let net = load_model(&a.model).stage("loading model")?;
    let spec = override_spec(net.quant_spec(), &a.quant);
    let net = net.with_quant_spec(spec).stage("loading model")?;
    let data = read_tensor(&a.data).stage("loading calibration data")?;
    let init = net.init_quant_params(&data).stage("min-max initialization")?;
    let state = refine(&net, &data, &config, CalibState::new(init)).stage("refining")?;

    let run = CalibrateRun { command: "calibrate", quant_spec: spec, calib: &config };
    let bundle = ArtifactBundle::new(
        state.current.clone(),
        provenance(a.seed, &run).stage("writing outputs")?,
    );
    create_dir(&a.out).stage("writing outputs")?;
    save_bundle(a.out.join("bundle.json"), &bundle).stage("writing outputs")?;
    state.trace_csv().write(a.out.join("trace.csv")).stage("writing outputs")?;
    let (first, last) = (state.trace[0].l_cat, state.trace.last().map_or(f64::NAN, |e| e.l_cat));
    println!("objective {first:?} -> {last:?} over {} cycles", state.trace.len() - 1);
    println!("wrote {}", a.out.join("bundle.json").display());
    Ok(())
}

/// Aligned logits from a stacked pair file or a model run.
fn load_pairs(
    source: &SourceArgs,
    data_override: Option<&Path>,
    bundle: Option<&ArtifactBundle>,
    what: &str,
) -> Result<LogitPairSet> {
    if let Some(p) = data_override.filter(|_| source.pairs.is_some()).or(source.pairs.as_deref()) {
        let t = read_tensor(p)?;
        return LogitPairSet::from_stacked(&t, p.display().to_string());
    }
    let (Some(model), Some(data)) = (&source.model, data_override.or(source.data.as_deref())) else {
        return Err(Error::Parameter(format!(
            "{what} needs either --pairs or both --model and --data"
        )));
    };
    let bundle = bundle.ok_or_else(|| {
        Error::Parameter("--model needs --bundle with calibrated quantization parameters".into())
    })?;
    let net: TinyNet = adopt_params(load_model(model)?, &bundle.quant_params)?;
    let x = read_tensor(data)?;
    LogitPairSet::new(
        net.forward_lq(&x, &bundle.quant_params)?,
        net.forward_fp(&x)?,
        data.display().to_string(),
    )
}

fn cat_config(c: &CatArgs, seed: u64, n: usize, d: usize) -> CatConfig {
    CatConfig {
        clusters: c.clusters,
        pca_dim: c.pca_dim.unwrap_or_else(|| default_pca_dim(n, d)),
        epsilon: c.epsilon,
        alpha: c.alpha,
        seed,
        ..CatConfig::default()
    }
}

fn check_cat_args(c: &CatArgs) -> Result<()> {
    // Validate everything that does not depend on the data size.
    let probe = CatConfig {
        clusters: c.clusters,
        pca_dim: c.pca_dim.unwrap_or(1),
        epsilon: c.epsilon,
        alpha: c.alpha,
        ..CatConfig::default()
    };
    probe.validate()
}

#[derive(Serialize)]
struct CatFitRun<'a> {
    command: &'static str,
    previous: Option<&'a str>,
    cat: &'a CatConfig,
    samples: usize,
}

pub fn cat_fit(a: CatFitArgs) -> Outcome {
    (|| {
        check_cat_args(&a.cat)?;
        if a.samples == Some(0) {
            return Err(Error::Parameter("--samples must be positive".into()));
        }
        Ok(())
    })()
    .stage("validating arguments")?;
    let path = output_path(&a.out, "bundle.json", a.bundle.as_deref()).stage("validating arguments")?;
    let bundle = a.bundle.as_ref().map(load_bundle).transpose().stage("loading bundle")?;
    let mut pairs = load_pairs(&a.source, None, bundle.as_ref(), "cat-fit").stage("loading fitting data")?;
    if let Some(n) = a.samples {
        if n < pairs.len() {
            pairs = pairs.head(n);
        }
    }
    let config = cat_config(&a.cat, a.seed, pairs.len(), pairs.dim());
    if config.clusters > pairs.len() {
        return Err(Error::Parameter(format!(
            "--clusters {} exceeds the {} fitting samples",
            config.clusters,
            pairs.len()
        )))
        .stage("validating arguments");
    }
    let cat = fit_cat(&pairs, &config).stage("fitting CAT")?;
    let plain = fit_cat(&pairs, &config.plain_affine()).stage("fitting plain affine")?;

    let previous = bundle.as_ref().map(|b| b.provenance.config_hash.as_str());
    let run = CatFitRun { command: "cat-fit", previous, cat: &config, samples: pairs.len() };
    let prov = provenance(a.seed, &run).stage("writing outputs")?;
    let mut out = match bundle {
        Some(b) => ArtifactBundle { provenance: prov, ..b },
        None => ArtifactBundle::new(Default::default(), prov),
    };
    println!(
        "fit MSE: identity {:?}, plain affine {:?}, cat {:?} ({} clusters, pca_dim {})",
        cat.fit_meta.fit_mse_identity,
        plain.fit_meta.fit_mse_cat,
        cat.fit_meta.fit_mse_cat,
        config.clusters,
        config.pca_dim
    );
    out.cat = Some(cat);
    out.plain_affine = Some(plain);
    create_dir(&a.out).stage("writing outputs")?;
    save_bundle(&path, &out).stage("writing outputs")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_labels(path: Option<&Path>, rows: usize) -> Result<Option<Vec<usize>>> {
    let Some(p) = path else { return Ok(None) };
    let labels = labels_from_tensor(&read_tensor(p)?)?;
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} labels for {rows} evaluation rows",
            labels.len()
        )));
    }
    Ok(Some(labels))
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    if let Some(alpha) = a.alpha {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Parameter(format!("--alpha must be in [0, 1], got {alpha}")))
                .stage("validating arguments");
        }
    }
    let mut bundle = load_bundle(&a.bundle).stage("loading bundle")?;
    let pairs = load_pairs(&a.source, None, Some(&bundle), "evaluate").stage("loading evaluation data")?;
    let labels = load_labels(a.labels.as_deref(), pairs.len()).stage("loading labels")?;
    if let (Some(alpha), Some(cat)) = (a.alpha, bundle.cat.as_mut()) {
        cat.alpha = alpha;
    }
    let rows = evaluate_variants(bundle.cat.as_ref(), bundle.plain_affine.as_ref(), &pairs, labels.as_deref())
        .stage("evaluating")?;
    let table = eval_table(&rows);
    print_csv(&table).stage("writing outputs")?;
    if let Some(dir) = &a.out {
        create_dir(dir).stage("writing outputs")?;
        table.write(dir.join("eval.csv")).stage("writing outputs")?;
    }
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    let values = grid
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parameter(format!("bad grid value `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Parameter("--grid is empty".into()));
    }
    Ok(values)
}

pub fn sweep(a: SweepArgs) -> Outcome {
    let (axis, grid) = (|| {
        let axis: SweepAxis = a.axis.parse()?;
        let grid = parse_grid(&a.grid)?;
        check_cat_args(&a.cat)?;
        if a.repeats == 0 {
            return Err(Error::Parameter("--repeats must be at least 1".into()));
        }
        let held_out = if a.source.pairs.is_some() { &a.eval_pairs } else { &a.eval_data };
        if held_out.is_none() {
            return Err(Error::Parameter(
                "held-out data is required: --eval-pairs with --pairs, --eval-data with --model".into(),
            ));
        }
        Ok((axis, grid))
    })()
    .stage("validating arguments")?;
    let bundle = a.bundle.as_ref().map(load_bundle).transpose().stage("loading bundle")?;
    let fit = load_pairs(&a.source, None, bundle.as_ref(), "sweep").stage("loading fitting data")?;
    let held_path = a.eval_pairs.as_deref().or(a.eval_data.as_deref());
    let held = load_pairs(&a.source, held_path, bundle.as_ref(), "sweep").stage("loading evaluation data")?;
    let labels = load_labels(a.labels.as_deref(), held.len()).stage("loading labels")?;
    let smallest_fit = match axis {
        SweepAxis::Samples => grid.iter().fold(fit.len(), |m, &v| m.min(v.max(1.0) as usize)),
        _ => fit.len(),
    };
    let base = cat_config(&a.cat, a.seed, smallest_fit, fit.dim());
    let seeds: Vec<u64> = (0..a.repeats as u64).map(|i| a.seed.wrapping_add(i)).collect();
    let table = catq::pipeline::sweep(&fit, &held, labels.as_deref(), &base, axis, &grid, &seeds)
        .stage("sweeping")?;
    print_csv(&table).stage("writing outputs")?;
    if let Some((value, kl)) = best_by_kl(&table) {
        eprintln!("lowest mean_kl {kl} at {axis} = {value}");
    }
    if let Some(dir) = &a.out {
        create_dir(dir).stage("writing outputs")?;
        table
            .write(dir.join(format!("sweep_{axis}.csv")))
            .stage("writing outputs")?;
    }
    Ok(())
}

fn best_by_kl(table: &CsvTable) -> Option<(String, f64)> {
    let col = table.header.iter().position(|h| h == "mean_kl")?;
    table
        .rows
        .iter()
        .filter_map(|r| Some((r[1].clone(), r[col].parse::<f64>().ok()?)))
        .fold(None, |best: Option<(String, f64)>, (v, kl)| match best {
            Some((_, b)) if b <= kl => best,
            _ => Some((v, kl)),
        })
}

pub fn demo(a: DemoArgs) -> Outcome {
    let report = run_demo(&a.out, &DemoConfig::new(a.seed)).stage("running demo")?;
    println!(
        "calibration objective {:?} -> {:?}",
        report.initial_objective, report.final_objective
    );
    for (title, rows) in [("synthetic corpus", &report.corpus_eval), ("W2A2 classifier", &report.net_eval)] {
        println!("{title}:");
        for r in rows.iter() {
            println!(
                "  {:<14} agreement {:.4}  accuracy {:.4}  kl {:.5}  mse {:.5}",
                r.variant,
                r.top1_agreement,
                r.top1_accuracy.unwrap_or(f64::NAN),
                r.mean_kl,
                r.logit_mse
            );
        }
    }
    println!("wrote {} files under {}", report.files.len(), a.out.display());
    Ok(())
}
