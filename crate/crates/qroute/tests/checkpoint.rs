use qroute::checkpoint::{checkpoint_file_name, Checkpoint, FORMAT_VERSION};
use qroute::commands;
use qroute::config::Config;
use qroute::Error;

const SMOKE: &str = "
seed = 5
[train]
num_epochs = 2
batches_per_epoch = 2
batch_size = 3
[policy]
d_h = 8
n_layers = 1
n_heads = 2
d_k = 4
d_ff = 8
decoder_heads = 2
compatibility = \"learned\"
[instances]
n_nodes = 4
";

fn smoke(overrides: &[&str]) -> Config {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::from_toml(SMOKE, &o).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&smoke(&[]), dir.path(), None).unwrap();
    let path = dir.path().join(checkpoint_file_name(2));
    let text = std::fs::read_to_string(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.to_json(), text);
    assert_eq!(ckpt.epoch, 2);
    assert_eq!(ckpt.format_version, FORMAT_VERSION);
    // rebuilding the trainer loses nothing either
    let again = Checkpoint::from_trainer(&ckpt.config, &ckpt.to_trainer().unwrap());
    assert_eq!(again.to_json(), text);
}

#[test]
fn other_versions_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&smoke(&["train.num_epochs=1", "train.batches_per_epoch=1"]), dir.path(), None).unwrap();
    let text = std::fs::read_to_string(dir.path().join(checkpoint_file_name(1))).unwrap();
    let bumped = text.replacen(
        &format!("\"format_version\": {FORMAT_VERSION}"),
        &format!("\"format_version\": {}", FORMAT_VERSION + 1),
        1,
    );
    assert_ne!(bumped, text);
    match Checkpoint::from_json(&bumped) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("format_version"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(Checkpoint::from_json("{}"), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_json("not json"), Err(Error::Checkpoint(_))));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    commands::train(&smoke(&[]), straight.path(), None).unwrap();

    let split = tempfile::tempdir().unwrap();
    commands::train(&smoke(&["train.num_epochs=1"]), split.path(), None).unwrap();
    let mut first = Checkpoint::load(&split.path().join(checkpoint_file_name(1))).unwrap();
    first.config.train.num_epochs = 2;
    // the checkpoint alone carries everything needed to continue
    commands::train(&Config::default(), split.path(), Some(&first)).unwrap();

    let a = std::fs::read_to_string(straight.path().join(checkpoint_file_name(2))).unwrap();
    let b = std::fs::read_to_string(split.path().join(checkpoint_file_name(2))).unwrap();
    assert_eq!(a, b);
}
