use std::fs;
use std::path::Path;

use thinkrec::checkpoint::Checkpoint;
use thinkrec::config::{PipelineConfig, Stage};
use thinkrec::pipeline::{load_collab, open_checkpoint, stage_collab, stage_global, stage_prepare, stage_synth};
use thinkrec::synthetic::{write_bundle, SyntheticConfig};
use thinkrec::Error;

fn small_bundle(dir: &Path) -> PipelineConfig {
    let small = SyntheticConfig { users: 60, items: 40, events_per_user: 8, ..Default::default() };
    let path = write_bundle(dir, &small).unwrap();
    let mut cfg = PipelineConfig::load(&path).unwrap();
    cfg.reasons.sample_n = 20;
    cfg.collab.epochs = 2;
    cfg
}

#[test]
fn global_before_prepare_is_a_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_bundle(dir.path());
    let err = stage_global(&cfg).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn collab_checkpoint_round_trips_and_tracks_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_bundle(dir.path());
    stage_prepare(&cfg).unwrap();
    stage_synth(&cfg).unwrap();
    stage_collab(&cfg).unwrap();

    let path = cfg.artifact("collab.trkc");
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let model = load_collab(&cfg).unwrap();
    assert_eq!(model, ck.get_collab().unwrap());

    cfg.collab.dim += 1;
    let err = open_checkpoint(&cfg, Stage::Collab).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
    cfg.collab.dim -= 1;
    open_checkpoint(&cfg, Stage::Collab).unwrap();

    let inter = cfg.artifact("processed/interactions.tsv");
    let mut text = fs::read_to_string(&inter).unwrap();
    text.push('\n');
    fs::write(&inter, text).unwrap();
    let err = open_checkpoint(&cfg, Stage::Collab).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let mut ck = Checkpoint::new("collab");
    ck.set_meta("seed", 3);
    let good = ck.to_bytes();
    assert_eq!(&good[..4], b"TRKC");

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut bad_version = good.clone();
    bad_version[4] = 99;
    assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Format(_))));

    assert!(matches!(Checkpoint::from_bytes(&good[..good.len() - 1]), Err(Error::Format(_))));
}
