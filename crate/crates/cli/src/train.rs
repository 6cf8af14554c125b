use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nbinv_core::checkpoint::Rotation;
use nbinv_core::data::{load_faces, load_manifest, FaceImage};
use nbinv_core::extractor::{train_stand_in_on_faces, CnnExtractor, Extractor};
use nbinv_core::gan::{GanTrainer, GeneratorHandle};
use nbinv_core::nbnet::{build_network, canonical_spec, count_parameters, desk_spec, NetworkSpec};
use nbinv_core::nn::Init;
use nbinv_core::trainer::{make_training_stream, two_phase_train, DataSource, Source};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Checks, Profile, RunConfig};
use crate::stage::Stage;

pub fn load_face_sets(paths: &[PathBuf], size: usize) -> Result<Vec<FaceImage>> {
    let mut faces = Vec::new();
    for p in paths {
        let m = load_manifest(p).with_context(|| format!("loading manifest {}", p.display()))?;
        faces.extend(load_faces(&m, size).with_context(|| format!("loading images of {}", p.display()))?);
    }
    Ok(faces)
}

pub fn load_extractor(cfg: &RunConfig) -> Result<CnnExtractor> {
    let p = cfg.extractor_path();
    CnnExtractor::load(&p).with_context(|| format!("loading extractor {}", p.display()))
}

pub fn train_extractor(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    let mut checks = Checks::default();
    checks.file("data.extractor_manifest", cfg.data.extractor_manifest.as_deref());
    if cfg.extractor.steps == 0 || cfg.extractor.output_dim == 0 || cfg.extractor.width == 0 {
        checks.push("extractor: steps, output_dim and width must be positive");
    }
    checks.finish()?;
    let manifest = cfg.data.extractor_manifest.clone().expect("checked");
    let mut stage = Stage::open("extractor", cfg.run_dir().join("extractor"), overwrite, false)?;
    stage.input(&manifest);
    let faces = load_face_sets(std::slice::from_ref(&manifest), cfg.data.image_size)?;
    let mut log = BufWriter::new(File::create(stage.path("extractor_log.jsonl"))?);
    let mut io_err = None;
    let ex = train_stand_in_on_faces(&faces, &cfg.extractor, |e| {
        if let Err(err) = writeln!(log, "{}", serde_json::to_string(e).expect("log entry serializes")) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    ex.save(&stage.path("extractor.ckpt"))?;
    stage.finish(cfg)?;
    println!("extractor `{}` ({}-D) written to {}", ex.handle().extractor_id, ex.handle().output_dim, stage.dir.display());
    Ok(())
}

pub fn train_gan(cfg: &RunConfig, overwrite: bool, resume: bool) -> Result<()> {
    let mut checks = Checks::default();
    if cfg.data.train_manifests.is_empty() {
        checks.push("data.train_manifests: not set");
    }
    for (i, p) in cfg.data.train_manifests.iter().enumerate() {
        checks.file(&format!("data.train_manifests[{i}]"), Some(p));
    }
    checks.core("gan", cfg.gan.validate());
    checks.finish()?;
    let mut stage = Stage::open("gan", cfg.run_dir().join("gan"), overwrite, resume)?;
    for p in &cfg.data.train_manifests {
        stage.input(p);
    }
    let faces = load_face_sets(&cfg.data.train_manifests, cfg.data.image_size)?;
    let latest = if resume { Rotation::new(&stage.dir, "gan", 3).latest()? } else { None };
    let mut trainer = match &latest {
        Some(p) => {
            println!("resuming from {}", p.display());
            GanTrainer::load(p)?
        }
        None => GanTrainer::new(&cfg.gan)?,
    };
    let every = (cfg.gan.iterations / 10).max(1);
    trainer.run(&faces, Some(&stage.dir), |e| {
        if e.iter % every == 0 {
            println!("iter {:>7}  g_loss {:.4}  d_loss {:.4}", e.iter, e.g_loss, e.d_loss);
        }
    })?;
    trainer.to_checkpoint().write(&stage.path("generator.ckpt"))?;
    stage.finish(cfg)?;
    println!("generator written to {}", stage.path("generator.ckpt").display());
    Ok(())
}

pub fn network_spec(cfg: &RunConfig, output_dim: usize) -> Result<NetworkSpec> {
    let spec = match (&cfg.nbnet.spec_file, cfg.profile) {
        (Some(p), _) => NetworkSpec::load_json(p).with_context(|| format!("loading network spec {}", p.display()))?,
        (None, Profile::Desk) => desk_spec(cfg.nbnet.arch, output_dim),
        (None, Profile::Canonical) => canonical_spec(cfg.nbnet.arch),
    };
    Ok(spec)
}

pub fn train_nbnet(cfg: &RunConfig, overwrite: bool, count_only: bool) -> Result<()> {
    if count_only {
        let dim = if cfg.extractor_path().is_file() { load_extractor(cfg)?.handle().output_dim } else { cfg.extractor.output_dim };
        let spec = network_spec(cfg, dim)?;
        let model = build_network::<f32, _>(&spec, Init::Normal { std: cfg.train.init_std }, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        println!("{}", count_parameters(&model));
        return Ok(());
    }
    let mut checks = Checks::default();
    checks.file("artifacts.extractor", Some(&cfg.extractor_path()));
    match cfg.train.data_source {
        DataSource::Generator => checks.file("artifacts.generator", Some(&cfg.generator_path())),
        DataSource::RawManifest => {
            if cfg.data.train_manifests.is_empty() {
                checks.push("data.train_manifests: not set (needed for raw training)");
            }
            for (i, p) in cfg.data.train_manifests.iter().enumerate() {
                checks.file(&format!("data.train_manifests[{i}]"), Some(p));
            }
        }
    }
    checks.core("train", cfg.train.validate());
    if let Some(p) = &cfg.nbnet.spec_file {
        checks.file("nbnet.spec_file", Some(p));
    }
    checks.finish()?;

    let extractor = load_extractor(cfg)?;
    let handle = extractor.handle().clone();
    let spec = network_spec(cfg, handle.output_dim)?;
    let mut checks = Checks::default();
    if spec.input_dim != handle.output_dim {
        checks.push(format!("nbnet: spec takes {}-D templates, extractor emits {}-D", spec.input_dim, handle.output_dim));
    }
    if spec.output_size() != handle.input_size {
        checks.push(format!("nbnet: spec emits {0}x{0} images, extractor reads {1}x{1}", spec.output_size(), handle.input_size));
    }
    checks.finish()?;

    let name = format!("nbnet-{}", cfg.nbnet.arch.name());
    let mut stage = Stage::open(&name, cfg.run_dir().join(&name), overwrite, false)?;
    stage.input(&cfg.extractor_path());
    let generator;
    let raw;
    let source = match cfg.train.data_source {
        DataSource::Generator => {
            stage.input(&cfg.generator_path());
            generator = GeneratorHandle::load(&cfg.generator_path())?;
            Source::Generator(&generator)
        }
        DataSource::RawManifest => {
            for p in &cfg.data.train_manifests {
                stage.input(p);
            }
            raw = load_face_sets(&cfg.data.train_manifests, cfg.data.image_size)?;
            Source::Raw(&raw)
        }
    };
    let model = build_network(&spec, Init::Normal { std: cfg.train.init_std }, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    println!("{}: {} trainable parameters", cfg.nbnet.arch.name(), count_parameters(&model));
    let mut stream = make_training_stream(source, &extractor, cfg.train.batch_size, cfg.seed)?;
    let features = extractor.feature_map();
    let every = ((cfg.train.phase1_batches + cfg.train.phase2_batches) / 20).max(1);
    let res = two_phase_train(model, &mut stream, Some(&features), &cfg.train, Some(&stage.dir), |e| {
        if e.batch % every == 0 {
            println!("phase {} batch {:>7}  loss {:.5}  lr {:.3e}", e.phase, e.batch, e.loss, e.lr);
        }
    })?;
    if res.log.is_empty() {
        bail!("training produced no batches");
    }
    res.model.save(&stage.path("model.ckpt"))?;
    stage.finish(cfg)?;
    println!("model written to {}", stage.path("model.ckpt").display());
    Ok(())
}
