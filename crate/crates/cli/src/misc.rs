use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use nbinv_core::data::write_faces;
use nbinv_core::norta::{covariance_with_se, ks_critical, ks_statistic, uniform_inputs, NortaModel};
use nbinv_core::synthetic::DeskSplit;
use serde::Serialize;

use crate::config::{Checks, IdentificationSection, RunConfig};
use crate::stage::Stage;

pub fn init_config(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let text = cfg.to_toml()?;
    match out {
        Some(p) => {
            std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            println!("config written to {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Renders the desk population into `out/{extractor,train,eval}` and writes
/// `out/config.toml` pointing at the three manifests. The first evaluation
/// sample of each subject forms the identification gallery, the others are
/// probes.
pub fn synth_data(
    cfg: &RunConfig,
    out: &Path,
    subjects: usize,
    train_per: usize,
    eval_per: usize,
    size: usize,
) -> Result<()> {
    let mut checks = Checks::default();
    if subjects < 4 || subjects % 2 != 0 {
        checks.push(format!("--subjects must be an even number of at least 4, got {subjects}"));
    }
    if train_per == 0 || eval_per < 2 {
        checks.push("--train-per-subject must be positive and --eval-per-subject at least 2");
    }
    if size < 8 {
        checks.push(format!("--size {size} is too small"));
    }
    checks.finish()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let out = out.canonicalize()?;
    let split = DeskSplit::new(size, subjects, train_per, eval_per, cfg.seed);
    let extractor = write_faces(&split.extractor_train, &out.join("extractor"), "train")?;
    let train = write_faces(&split.attack_train, &out.join("train"), "train")?;
    let mut eval = write_faces(&split.eval, &out.join("eval"), "probe")?;
    let mut seen = HashSet::new();
    for e in &mut eval.entries {
        if seen.insert(e.subject_id.clone()) {
            e.partition = "gallery".into();
        }
    }
    let eval_path = out.join("eval").join("manifest.jsonl");
    eval.write(&eval_path)?;

    let mut c = cfg.clone();
    c.data.image_size = size;
    c.data.extractor_manifest = Some(out.join("extractor").join("manifest.jsonl"));
    c.data.train_manifests = vec![out.join("train").join("manifest.jsonl")];
    c.data.eval_manifest = Some(eval_path);
    c.eval.identification = Some(IdentificationSection::default());
    let c = c.resolve();
    std::fs::write(out.join("config.toml"), c.to_toml()?)?;
    println!(
        "{} extractor, {} train and {} eval images written to {}; config at {}",
        extractor.len(),
        train.len(),
        eval.len(),
        out.display(),
        out.join("config.toml").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MarginalFit {
    family: String,
    ks_statistic: f64,
    ks_critical_5pct: f64,
    passes: bool,
}

#[derive(Serialize)]
struct NortaSummary {
    samples: usize,
    seed: u64,
    adjusted: bool,
    marginals: Vec<MarginalFit>,
    target_covariance: Vec<Vec<f64>>,
    empirical_covariance: Vec<Vec<f64>>,
    standard_error: Vec<Vec<f64>>,
    max_abs_z: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn norta_demo(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    let n = &cfg.norta;
    let k = n.marginals.len();
    let mut checks = Checks::default();
    if k == 0 {
        checks.push("norta.marginals: empty");
    }
    for (i, m) in n.marginals.iter().enumerate() {
        checks.core(&format!("norta.marginals[{i}]"), m.validate());
    }
    if n.covariance.len() != k || n.covariance.iter().any(|r| r.len() != k) {
        checks.push(format!("norta.covariance: expected a {k}x{k} matrix"));
    }
    if n.samples < 2 {
        checks.push("norta.samples: need at least 2");
    }
    checks.finish()?;
    let sigma_b = DMatrix::from_fn(k, k, |i, j| n.covariance[i][j]);
    let model = NortaModel::fit(n.marginals.clone(), sigma_b.clone()).context("fitting NORTA model")?;
    if model.adjusted {
        eprintln!("warning: the matched base correlation was not positive definite and has been repaired");
    }

    let stage = Stage::in_run(cfg, "norta", overwrite, false)?;
    model.save(&stage.path("model.json"))?;
    let x = model.sample(&uniform_inputs(n.samples, k, cfg.seed))?;
    let mut csv = String::new();
    writeln!(csv, "{}", (0..k).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","))?;
    for r in x.rows() {
        writeln!(csv, "{}", r.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(","))?;
    }
    std::fs::write(stage.path("samples.csv"), csv)?;

    let crit = ks_critical(0.05, n.samples);
    let marginals = n
        .marginals
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let col: Vec<f64> = x.column(j).to_vec();
            let d = ks_statistic(&col, m);
            let family = serde_json::to_value(m).ok().and_then(|v| v["family"].as_str().map(String::from));
            MarginalFit { family: family.unwrap_or_default(), ks_statistic: d, ks_critical_5pct: crit, passes: d <= crit }
        })
        .collect();
    let (cov, se) = covariance_with_se(&x);
    let max_abs_z = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| ((cov[(i, j)] - sigma_b[(i, j)]) / se[(i, j)].max(f64::MIN_POSITIVE)).abs())
        .fold(0.0, f64::max);
    let summary = NortaSummary {
        samples: n.samples,
        seed: cfg.seed,
        adjusted: model.adjusted,
        marginals,
        target_covariance: rows(&sigma_b),
        empirical_covariance: rows(&cov),
        standard_error: rows(&se),
        max_abs_z,
    };
    std::fs::write(stage.path("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    stage.finish(cfg)?;
    for (j, m) in summary.marginals.iter().enumerate() {
        println!("x{j} {:<12} KS {:.5} (5% critical {:.5})", m.family, m.ks_statistic, m.ks_critical_5pct);
    }
    println!("max |empirical - target| / SE over covariance entries: {max_abs_z:.2}");
    println!("outputs in {}", stage.dir.display());
    Ok(())
}
