use nalgebra::DMatrix;
use nbinv_core::attack_eval::{
    evaluate_verification, identify, render_report, subject_folds, AttackKind, ConstantReconstructor, IdentityReconstructor,
    Report,
};
use nbinv_core::data::{load_faces, load_manifest, write_faces};
use nbinv_core::extractor::{train_stand_in_on_faces, CnnExtractor, Extractor, ExtractorConfig};
use nbinv_core::nbnet::{build_network, desk_spec, Arch, ReconstructionModel};
use nbinv_core::nn::Init;
use nbinv_core::norta::{uniform_inputs, Marginal, NortaModel};
use nbinv_core::synthetic::DeskSplit;
use nbinv_core::trainer::{make_training_stream, two_phase_train, Source, TrainConfig};
use nbinv_core::Error;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_extractor(split: &DeskSplit) -> CnnExtractor {
    train_stand_in_on_faces(&split.extractor_train, &ExtractorConfig { steps: 20, ..Default::default() }, |_| {}).unwrap()
}

#[test]
fn faces_survive_a_manifest_round_trip() {
    let split = DeskSplit::new(32, 6, 2, 2, 1);
    let dir = tempfile::tempdir().unwrap();
    write_faces(&split.eval, dir.path(), "probe").unwrap();
    let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m.subjects().len(), 3);
    let back = load_faces(&m, 32).unwrap();
    for (a, b) in split.eval.iter().zip(&back) {
        assert_eq!(a.subject_id, b.subject_id);
        let err = a.pixels.iter().zip(b.pixels.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 255.0 + 1e-6, "8-bit quantisation bound exceeded: {err}");
    }
}

#[test]
fn train_save_load_and_attack() {
    let split = DeskSplit::new(32, 12, 3, 3, 2);
    let ex = small_extractor(&split);
    let dir = tempfile::tempdir().unwrap();
    ex.save(&dir.path().join("ex.ckpt")).unwrap();
    let ex = CnnExtractor::load(&dir.path().join("ex.ckpt")).unwrap();

    let config = TrainConfig { phase1_batches: 4, phase2_batches: 2, batch_size: 6, ..TrainConfig::desk() };
    let model = build_network(&desk_spec(Arch::NbnetA, ex.handle().output_dim), Init::Normal { std: 0.02 }, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let mut stream = make_training_stream(Source::Raw(&split.attack_train), &ex, config.batch_size, 3).unwrap();
    let features = ex.feature_map();
    let res = two_phase_train(model, &mut stream, Some(&features), &config, None, |_| {}).unwrap();
    assert_eq!(res.log.len(), 6);
    assert_eq!(res.log.iter().filter(|e| e.phase == 2).count(), 2);
    res.model.save(&dir.path().join("m.ckpt")).unwrap();
    let model = ReconstructionModel::<f32>::load(&dir.path().join("m.ckpt")).unwrap();

    let folds = subject_folds(&split.eval, 2, 3).unwrap();
    let attacks = [AttackKind::Type1, AttackKind::Type2];
    let mut report = Report::default();
    report.verification.extend(evaluate_verification(&split.eval, &folds, &model, &ex, &attacks, &[0.25], "nbnet_a", "desk").unwrap());
    report.verification.extend(
        evaluate_verification(&split.eval, &folds, &IdentityReconstructor, &ex, &attacks, &[0.25], "original", "desk").unwrap(),
    );
    let files = render_report(&report.sorted(), dir.path()).unwrap();
    assert!(files.json.is_file() && files.roc_svg.as_ref().is_some_and(|p| p.is_file()));
    let md = std::fs::read_to_string(&files.markdown).unwrap();
    assert!(md.contains("nbnet_a") && md.contains("original"));
}

#[test]
fn constant_reconstruction_cannot_identify() {
    let split = DeskSplit::new(32, 12, 3, 3, 4);
    let ex = small_extractor(&split);
    let gallery: Vec<_> = split.eval.iter().step_by(3).cloned().collect();
    let probes: Vec<_> = split.eval.iter().enumerate().filter(|(i, _)| i % 3 != 0).map(|(_, f)| f.clone()).collect();
    let flat = ConstantReconstructor(Array3::zeros((3, 32, 32)));
    let r = identify(&gallery, &probes, Some(&flat), &ex, "probe").unwrap();
    // Every probe maps to the same gallery entry, so exactly one subject is hit.
    assert!((r.rate - 100.0 * 2.0 / probes.len() as f64).abs() < 1e-9, "{}", r.rate);
    assert!(identify(&gallery, &probes, None, &ex, "probe").unwrap().rate > r.rate);
}

#[test]
fn attack_rejects_unresolvable_far() {
    let split = DeskSplit::new(32, 8, 2, 2, 5);
    let ex = small_extractor(&split);
    let folds = subject_folds(&split.eval, 2, 5).unwrap();
    let err = evaluate_verification(&split.eval, &folds, &IdentityReconstructor, &ex, &[AttackKind::Type1], &[0.001], "o", "d")
        .unwrap_err();
    assert!(matches!(err, Error::InsufficientImpostors { .. }), "{err}");
}

#[test]
fn norta_model_file_round_trip_reproduces_samples() {
    let marginals = vec![Marginal::Exponential { rate: 2.0 }, Marginal::Uniform { lo: -1.0, hi: 1.0 }];
    let sigma = DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 1.0 / 3.0]);
    let model = NortaModel::fit(marginals, sigma).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("norta.json");
    model.save(&path).unwrap();
    let back = NortaModel::load(&path).unwrap();
    let z = uniform_inputs(500, 2, 9);
    assert_eq!(model.sample(&z).unwrap(), back.sample(&z).unwrap());
    assert!(model.sample(&(z.clone() * 2.0)).is_err());
}
