mod common;

use std::fs;

use common::small_volumes;
use vtcd_core::Volume3D;
use vtcd_model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vtcd_model::losses::Phase;
use vtcd_model::srm::SrmConfig;
use vtcd_model::trainer::{resume_volumes, train_volumes, Models, TrainConfig, TrainReport, CHECKPOINT_FILE, LOG_FILE};
use vtcd_model::Error;

fn tiny(epochs: [usize; 3]) -> TrainConfig {
    TrainConfig {
        epochs_per_phase: epochs,
        steps_per_epoch: 1,
        batch_size: 2,
        diffusion_steps: 8,
        denoiser_channels: 4,
        disc_width: 4,
        srm: SrmConfig {
            features: 4,
            ..SrmConfig::default()
        },
        sr_crop: 8,
        sr_batch: 1,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn volumes() -> Vec<Volume3D> {
    small_volumes(3, 16, 8, 70).into_iter().map(|(lr, _)| lr).collect()
}

fn run(config: &TrainConfig, dir: &std::path::Path) -> TrainReport {
    train_volumes(config, volumes(), dir).unwrap()
}

fn group(ckpt: &Checkpoint, name: &str) -> Vec<vtcd_model::params::TensorRecord> {
    Models::from_checkpoint(ckpt).unwrap().group(name).export().unwrap()
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny([0, 0, 0]);
    let rep = run(&cfg, dir.path());
    assert!(rep.log.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join(LOG_FILE)).unwrap(), "");
    let init = Models::init(&cfg, cfg.seed).unwrap().export().unwrap();
    let saved = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let params: Vec<_> = saved.tensors.iter().filter(|t| t.name.starts_with("param/")).collect();
    assert_eq!(params.len(), init.len());
    for (a, b) in params.iter().zip(&init) {
        assert_eq!(a.data, b.data, "{}", a.name);
    }
}

#[test]
fn same_seed_same_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny([1, 1, 1]);
    let ra = run(&cfg, a.path());
    let rb = run(&cfg, b.path());
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.checkpoint.payload(), rb.checkpoint.payload());
    assert_eq!(
        fs::read(a.path().join(LOG_FILE)).unwrap(),
        fs::read(b.path().join(LOG_FILE)).unwrap()
    );
}

#[test]
fn log_lines_carry_active_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny([1, 1, 1]);
    let rep = run(&cfg, dir.path());
    let phases: Vec<Phase> = rep.log.iter().map(|l| l.phase).collect();
    assert_eq!(phases, vec![Phase::Denoise, Phase::Sr, Phase::Joint]);
    for l in &rep.log {
        assert_eq!(l.weights, cfg.loss_weights.active(l.phase));
        assert!(l.losses.is_finite());
    }
    let lines = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert!(rep.checkpoint.hyperplane.is_some());
}

#[test]
fn phases_only_touch_their_networks() {
    let cfg0 = tiny([0, 0, 0]);
    let init = Models::init(&cfg0, cfg0.seed).unwrap();
    let init_group = |g: &str| init.group(g).export().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let den = run(&tiny([1, 0, 0]), dir.path()).checkpoint;
    assert_ne!(group(&den, "den"), init_group("den"));
    assert_eq!(group(&den, "srm"), init_group("srm"));
    assert_eq!(group(&den, "disc_b"), init_group("disc_b"));

    let dir = tempfile::tempdir().unwrap();
    let sr = run(&tiny([0, 1, 0]), dir.path()).checkpoint;
    assert_eq!(group(&sr, "den"), init_group("den"));
    assert_eq!(group(&sr, "disc_a"), init_group("disc_a"));
    assert_ne!(group(&sr, "srm"), init_group("srm"));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let rep = run(&tiny([1, 0, 0]), dir.path());
    let path = dir.path().join("copy.vtcd");
    save_checkpoint(&rep.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, rep.checkpoint);
    assert_eq!(back.payload(), rep.checkpoint.payload());

    let bytes = fs::read(&path).unwrap();
    let cut = dir.path().join("cut.vtcd");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format { .. })));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let pos = text.find("\"format_version\":1").unwrap() + "\"format_version\":".len();
    let mut bumped = bytes.clone();
    bumped[pos] = b'7';
    let v7 = dir.path().join("v7.vtcd");
    fs::write(&v7, bumped).unwrap();
    match load_checkpoint(&v7) {
        Err(Error::Format { reason, .. }) => assert!(reason.contains("version 7"), "{reason}"),
        other => panic!("expected version error, got {other:?}"),
    }
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn resume_reproduces_next_step() {
    let cfg = tiny([2, 1, 1]);
    let whole_dir = tempfile::tempdir().unwrap();
    let whole = run(&cfg, whole_dir.path());

    let part_dir = tempfile::tempdir().unwrap();
    let first = run(&tiny([1, 0, 0]), part_dir.path());
    let saved = load_checkpoint(part_dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.payload(), first.checkpoint.payload());
    let rest = resume_volumes(&saved, &cfg, volumes(), part_dir.path()).unwrap();

    assert_eq!(whole.log[0], first.log[0]);
    assert_eq!(&whole.log[1..], &rest.log[..]);
    assert_eq!(whole.checkpoint.payload(), rest.checkpoint.payload());
    assert_eq!(whole.checkpoint.rng, rest.checkpoint.rng);
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&tiny([1, 0, 0]), dir.path());
    let changed = TrainConfig {
        learning_rate: 1e-2,
        ..tiny([2, 0, 0])
    };
    assert!(matches!(
        resume_volumes(&first.checkpoint, &changed, volumes(), dir.path()),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_aborts_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        steps_per_epoch: 3,
        ..tiny([3, 0, 0])
    };
    match train_volumes(&cfg, volumes(), dir.path()) {
        Err(Error::NonFinite { checkpoint, .. }) => {
            assert!(load_checkpoint(checkpoint).is_ok());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn invalid_configs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..tiny([1, 0, 0]) },
        TrainConfig { learning_rate: -1.0, ..tiny([1, 0, 0]) },
        TrainConfig { beta_end: 2.0, ..tiny([1, 0, 0]) },
        TrainConfig { edit_range: Some((5, 2)), ..tiny([1, 0, 0]) },
    ] {
        assert!(matches!(train_volumes(&cfg, volumes(), dir.path()), Err(Error::Config(_)) | Err(Error::Core(_))));
    }
    assert!(train_volumes(&tiny([1, 0, 0]), vec![], dir.path()).is_err());
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"epochs_per_phase":[1,0,0],"bogus":1}"#).unwrap();
    assert!(TrainConfig::load(&p).is_err());
    fs::write(&p, r#"{"epochs_per_phase":[1,0,0],"T":8}"#).unwrap();
    let cfg = TrainConfig::load(&p).unwrap();
    assert_eq!(cfg.diffusion_steps, 8);
    assert_eq!(cfg.steps_per_epoch, TrainConfig::default().steps_per_epoch);
}
