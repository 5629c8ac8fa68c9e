use std::fs;
use std::path::Path;

use detrame::cli::{
    run_command, EQUIV_FILE, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, METRICS_FILE, MODEL_FILE, PROX_BENCH_FILE,
};
use detrame::config::Config;
use detrame::data::{load_idx, parse_idx_images, parse_idx_labels, Split};
use detrame::net::ModelFile;
use detrame::Error;

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("detrame").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 0x08, 3];
    for d in [n, rows, cols] {
        v.extend(d.to_be_bytes());
    }
    v.extend(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 0x08, 1];
    v.extend((labels.len() as u32).to_be_bytes());
    v.extend(labels);
    v
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&[]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--seed", "not-a-number"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "[train]\nepochs = 0\n",
        "[nonsense]\nx = 1\n",
        "[model]\nactivation = tanh\n",
        "[train\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.conf"));
        fs::write(&cfg, text).unwrap();
        let code = run(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
        assert_eq!(code, EXIT_USAGE, "{text:?}");
    }
    let missing = dir.path().join("absent.conf");
    // an unreadable config file is a configuration error too
    assert_eq!(run(&["train", "--config", path(&missing)]), EXIT_USAGE);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("moons.conf");
    fs::write(
        &cfg,
        "seed = 5\n[data]\nn_train = 60\nn_test = 60\n[model]\nhidden = 6\n[train]\nepochs = 3\nbatch_size = 10\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", path(&cfg), "--out", path(&out)]), EXIT_OK);
    let csv = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let file = ModelFile::load(out.join(MODEL_FILE)).unwrap();
    assert!(file.extra("norm.mean").is_some() && file.extra("norm.std").is_some());
    assert_eq!(file.model.class_count(), 2);
    assert_eq!(run(&["eval", "--config", path(&cfg), "--out", path(&out)]), EXIT_OK);
    let absent = dir.path().join("absent.bin");
    assert_eq!(
        run(&["eval", "--config", path(&cfg), "--model", path(&absent)]),
        EXIT_FAILURE
    );
}

#[test]
fn analysis_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.conf");
    fs::write(&cfg, "[equiv]\ninstances = 3\nm = 4\nk = 5\nn = 2\n").unwrap();
    assert_eq!(
        run(&["equiv-check", "--config", path(&cfg), "--out", path(dir.path())]),
        EXIT_OK
    );
    let equiv = fs::read_to_string(dir.path().join(EQUIV_FILE)).unwrap();
    assert_eq!(equiv.lines().count(), 4);

    assert_eq!(run(&["gradcheck", "--out", path(dir.path())]), EXIT_OK);

    assert_eq!(run(&["prox-bench", "--out", path(dir.path())]), EXIT_OK);
    let bench = fs::read_to_string(dir.path().join(PROX_BENCH_FILE)).unwrap();
    assert!(bench.starts_with("tt_max,max_abs_err,mean_abs_err,rnn_ms,oracle_ms"));
}

#[test]
fn idx_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    fs::write(
        &images,
        idx_images(3, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0]),
    )
    .unwrap();
    fs::write(&labels, idx_labels(&[2, 0, 1])).unwrap();
    let data = load_idx(&images, &labels, 3, Split::Test).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.labels(), &[2, 0, 1]);
    let x = data.features().as_flat().unwrap();
    assert_eq!(x.dim(), (4, 3));
    assert_eq!(x[[1, 0]], 1.0);
    assert_eq!(x[[2, 0]], 0.2);
    assert_eq!(x[[0, 2]], 1.0);
    assert!(data.provenance().starts_with("idx:"));

    assert!(matches!(
        load_idx(&images, &labels, 2, Split::Test),
        Err(Error::LabelRange { label: 2, index: 0, .. })
    ));
}

#[test]
fn idx_errors_are_specific() {
    let good = idx_images(1, 2, 2, &[1, 2, 3, 4]);
    assert!(matches!(
        parse_idx_labels(&good),
        Err(Error::IdxMagic {
            found: 2051,
            expected: 2049
        })
    ));
    assert!(matches!(
        parse_idx_images(&good[..good.len() - 1]),
        Err(Error::IdxTruncated {
            needed: 20,
            available: 19
        })
    ));
    assert!(matches!(parse_idx_images(&good[..6]), Err(Error::IdxTruncated { .. })));
    let huge = idx_images(u32::MAX, u32::MAX, u32::MAX, &[]);
    assert!(matches!(
        parse_idx_images(&huge),
        Err(Error::IdxDimOverflow | Error::IdxTruncated { .. })
    ));
}

#[test]
fn config_parsing() {
    let cfg = Config::parse("seed = 4 # trailing\n\n[train]\nepochs = 7\ndecay_epochs = 2, 5\n").unwrap();
    assert_eq!(cfg.get::<u64>("", "seed").unwrap(), Some(4));
    assert_eq!(cfg.get_or("train", "epochs", 1usize).unwrap(), 7);
    assert_eq!(cfg.list::<usize>("train", "decay_epochs").unwrap(), Some(vec![2, 5]));
    assert_eq!(cfg.get_or("train", "batch_size", 32usize).unwrap(), 32);
    assert!(matches!(cfg.get::<u64>("train", "decay_epochs"), Err(Error::Config(_))));
    assert!(Config::parse("no equals sign\n").is_err());
}
