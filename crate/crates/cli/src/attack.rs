use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use nbinv_core::attack_eval::{
    evaluate_verification, identify, render_report, subject_folds, IdentificationEntry, IdentityReconstructor,
    Reconstructor, Report,
};
use nbinv_core::data::{load_faces, load_manifest, FaceImage};
use nbinv_core::extractor::{cosine, stack_templates, Extractor, Template};
use nbinv_core::nbnet::{Arch, ReconstructionModel};
use serde::Serialize;

use crate::config::{Checks, RunConfig};
use crate::stage::Stage;
use crate::train::load_extractor;

/// 3x5 bitmap glyphs for similarity annotations.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        '-' => [0, 0, 0b111, 0, 0],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    for (k, c) in text.chars().enumerate() {
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) != 0 {
                    let (x, y) = (x0 + 4 * k as u32 + col, y0 + row as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, Rgb([255, 255, 255]));
                    }
                }
            }
        }
    }
}

/// Original and reconstruction side by side with the score underneath.
fn panel(original: &FaceImage, recon: &FaceImage, score: f64) -> RgbImage {
    let (a, b) = (original.to_rgb(), recon.to_rgb());
    let s = a.width();
    let mut out = RgbImage::new(2 * s + 2, s + 8);
    image::imageops::replace(&mut out, &a, 0, 0);
    image::imageops::replace(&mut out, &b, (s + 2) as i64, 0);
    draw_text(&mut out, 1, s + 2, &format!("{score:.3}"));
    out
}

fn load_model(path: &Path) -> Result<ReconstructionModel<f32>> {
    ReconstructionModel::load(path).with_context(|| format!("loading reconstruction model {}", path.display()))
}

fn read_templates(path: &Path) -> Result<Vec<Template>> {
    let f = std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}: bad template record", path.display(), i + 1))?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct PanelRecord {
    file: String,
    subject_id: String,
    sample_id: String,
    similarity: Option<f64>,
}

pub fn reconstruct(
    cfg: &RunConfig,
    overwrite: bool,
    model: Option<PathBuf>,
    arch: Option<Arch>,
    images: Option<PathBuf>,
    templates: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model_path = model.unwrap_or_else(|| cfg.model_path(arch.unwrap_or(cfg.nbnet.arch)));
    let mut checks = Checks::default();
    checks.file("--model", Some(&model_path));
    match (&images, &templates) {
        (None, None) => checks.push("one of --images or --templates is required"),
        (Some(p), _) | (_, Some(p)) => checks.file("input", Some(p)),
    }
    if images.is_some() {
        checks.file("artifacts.extractor", Some(&cfg.extractor_path()));
    }
    checks.finish()?;
    let model = load_model(&model_path)?;
    let mut stage = Stage::open("reconstruct", out.unwrap_or_else(|| cfg.run_dir().join("reconstruct")), overwrite, false)?;
    stage.input(&model_path);
    let mut records = Vec::new();
    if let Some(manifest_path) = images {
        stage.input(&manifest_path);
        let extractor = load_extractor(cfg)?;
        let manifest = load_manifest(&manifest_path)?;
        let faces = load_faces(&manifest, extractor.handle().input_size)?;
        let ts = extractor.extract_all(&faces)?;
        let recon = model.reconstruct_batch(&stack_templates(&ts), &faces).context("reconstructing")?;
        let rts = extractor.extract_all(&recon)?;
        for (k, ((f, r), (t, rt))) in faces.iter().zip(&recon).zip(ts.iter().zip(&rts)).enumerate() {
            let score = cosine(&t.vector, &rt.vector)?;
            let file = format!("{k:04}_{}_{}.png", f.subject_id, f.sample_id);
            panel(f, r, score).save(stage.path(&file)).with_context(|| format!("writing {file}"))?;
            records.push(PanelRecord { file, subject_id: f.subject_id.clone(), sample_id: f.sample_id.clone(), similarity: Some(score) });
        }
    } else if let Some(tpath) = templates {
        stage.input(&tpath);
        let ts = read_templates(&tpath)?;
        if ts.first().map(|t| t.vector.len()) != Some(model.input_dim()) {
            return Err(crate::ValidationError(vec![format!(
                "templates: model expects {}-D templates, file holds {}",
                model.input_dim(),
                ts.first().map_or("none".to_string(), |t| format!("{}-D", t.vector.len()))
            )])
            .into());
        }
        for (k, t) in ts.iter().enumerate() {
            let img = model.reconstruct(t)?;
            let file = format!("{k:04}_{}_{}.png", t.subject_id, t.sample_id);
            img.save_png(&stage.path(&file))?;
            records.push(PanelRecord { file, subject_id: t.subject_id.clone(), sample_id: t.sample_id.clone(), similarity: None });
        }
    }
    std::fs::write(stage.path("panels.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    stage.finish(cfg)?;
    println!("{} reconstructions written to {}", records.len(), stage.dir.display());
    Ok(())
}

fn attack_models(cfg: &RunConfig) -> Vec<(String, PathBuf)> {
    if !cfg.artifacts.models.is_empty() {
        return cfg.artifacts.models.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    }
    Arch::ALL
        .iter()
        .map(|a| (a.name().to_string(), cfg.model_path(*a)))
        .filter(|(_, p)| p.is_file())
        .collect()
}

pub fn attack(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    let models = attack_models(cfg);
    let mut checks = Checks::default();
    checks.file("artifacts.extractor", Some(&cfg.extractor_path()));
    checks.file("data.eval_manifest", cfg.data.eval_manifest.as_deref());
    for (name, p) in &models {
        checks.file(&format!("artifacts.models.{name}"), Some(p));
    }
    if models.is_empty() && !cfg.eval.include_original {
        checks.push("eval: no trained models found and include_original is false");
    }
    if let Some(f) = cfg.eval.fars.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        checks.push(format!("eval.fars: {f} is not in (0, 1)"));
    }
    if cfg.eval.attacks.is_empty() && cfg.eval.identification.is_none() {
        checks.push("eval: no attacks and no identification requested");
    }
    checks.finish()?;

    let extractor = load_extractor(cfg)?;
    let eval_path = cfg.data.eval_manifest.clone().expect("checked");
    let manifest = load_manifest(&eval_path)?;
    let faces = load_faces(&manifest, extractor.handle().input_size)?;
    let folds = subject_folds(&faces, cfg.eval.folds, cfg.seed).context("building evaluation folds")?;

    let mut stage = Stage::in_run(cfg, "attack", overwrite, false)?;
    stage.input(&cfg.extractor_path());
    stage.input(&eval_path);
    let mut loaded: Vec<(String, Box<dyn Reconstructor>)> = Vec::new();
    if cfg.eval.include_original {
        loaded.push(("original".into(), Box::new(IdentityReconstructor)));
    }
    for (name, p) in &models {
        stage.input(p);
        loaded.push((name.clone(), Box::new(load_model(p)?)));
    }

    let mut report = Report::default();
    for (name, r) in &loaded {
        if !cfg.eval.attacks.is_empty() {
            let res = evaluate_verification(&faces, &folds, r.as_ref(), &extractor, &cfg.eval.attacks, &cfg.eval.fars, name, &cfg.eval.dataset)
                .with_context(|| format!("verification attack with model `{name}` on `{}`", cfg.eval.dataset))?;
            report.verification.extend(res);
        }
        if let Some(id) = &cfg.eval.identification {
            let gallery: Vec<FaceImage> = manifest
                .entries
                .iter()
                .zip(&faces)
                .filter(|(e, _)| e.partition == id.gallery_partition)
                .map(|(_, f)| f.clone())
                .collect();
            for part in &id.probe_partitions {
                let probes: Vec<FaceImage> =
                    manifest.entries.iter().zip(&faces).filter(|(e, _)| &e.partition == part).map(|(_, f)| f.clone()).collect();
                let recon: Option<&dyn Reconstructor> = if name == "original" { None } else { Some(r.as_ref()) };
                let result = identify(&gallery, &probes, recon, &extractor, part)
                    .with_context(|| format!("identification with model `{name}`, probe partition `{part}`"))?;
                report.identification.push(IdentificationEntry { model: name.clone(), dataset: cfg.eval.dataset.clone(), result });
            }
        }
    }
    let report = report.sorted();
    std::fs::write(stage.path("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    render_report(&report, &stage.dir)?;
    stage.finish(cfg)?;
    print!("{}", report.to_markdown());
    Ok(())
}

pub fn report(cfg: &RunConfig, overwrite: bool, inputs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let inputs: Vec<PathBuf> =
        if inputs.is_empty() { vec![cfg.run_dir().join("attack").join("report.json")] } else { inputs.to_vec() };
    let mut checks = Checks::default();
    for p in &inputs {
        checks.file("report input", Some(p));
    }
    checks.finish()?;
    let mut stage = Stage::open("report", out.unwrap_or_else(|| cfg.run_dir().join("report")), overwrite, false)?;
    let mut merged = Report::default();
    for p in &inputs {
        stage.input(p);
        let r: Report = serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?;
        merged.verification.extend(r.verification);
        merged.identification.extend(r.identification);
    }
    render_report(&merged, &stage.dir)?;
    stage.finish(cfg)?;
    print!("{}", merged.to_markdown());
    Ok(())
}
