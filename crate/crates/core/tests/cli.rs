//! Harness tests for the `dcca` binary: exit codes, report formats, and
//! artifact determinism through the command-line surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcca_core::datagen::{load_sample, save_sample, MultiViewDataset, Split, View};

fn dcca() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcca"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    dcca()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn dcca")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn sha_line(out: &Output) -> String {
    stdout_of(out)
        .lines()
        .find(|l| l.starts_with("sha="))
        .expect("sha line")
        .to_string()
}

/// Pipeline shared by most tests: a 200-pair dataset (default view geometry),
/// a short-trained checkpoint, and an image index over the 40-snippet test
/// split. Built once; tests write their own uniquely named extra artifacts
/// into the same directory.
struct Pipeline {
    dir: tempfile::TempDir,
    data: PathBuf,
    index: PathBuf,
}

static PIPELINE: std::sync::OnceLock<Pipeline> = std::sync::OnceLock::new();

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(build_pipeline)
}

fn build_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mvds");
    let index = dir.path().join("i.dcix");

    let out = run_in(
        dir.path(),
        &[
            "gen-data", "--kind", "nonlinear", "--pieces", "20", "--snippets-per-piece", "10",
            "--seed", "5", "--out", "d.mvds",
        ],
    );
    assert!(out.status.success(), "gen-data failed: {out:?}");

    let out = run_in(
        dir.path(),
        &[
            "train", "--data", "d.mvds", "--out", "m.dcck", "--epochs", "2", "--batch-size", "50",
            "--h", "4", "--seed", "6",
        ],
    );
    assert!(out.status.success(), "train failed: {out:?}");

    let out = run_in(
        dir.path(),
        &[
            "index", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--modality",
            "image", "--out", "i.dcix",
        ],
    );
    assert!(out.status.success(), "index failed: {out:?}");

    Pipeline { dir, data, index }
}

#[test]
fn help_exists_for_every_subcommand() {
    for sub in ["gen-data", "train", "index", "query", "evaluate"] {
        let out = dcca().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help failed");
        let text = stdout_of(&out);
        assert!(text.contains("--help"), "{sub} help text missing flags");
    }
    let out = dcca().arg("--help").output().unwrap();
    assert!(out.status.success());
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = dcca().arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = dcca().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_and_reports_n_and_sha() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gen-data", "--kind", "nonlinear", "--pieces", "6", "--snippets-per-piece", "8",
        "--seed", "7", "--out", "a.mvds",
    ];
    let first = run_in(dir.path(), &args);
    assert!(first.status.success());
    assert!(stdout_of(&first).contains("n=48"));

    let mut args2 = args;
    args2[args.len() - 1] = "b.mvds";
    let second = run_in(dir.path(), &args2);
    assert_eq!(sha_line(&first), sha_line(&second));
    assert_eq!(
        std::fs::read(dir.path().join("a.mvds")).unwrap(),
        std::fs::read(dir.path().join("b.mvds")).unwrap()
    );

    // provenance sits next to the artifact
    let prov = std::fs::read_to_string(dir.path().join("a.mvds.config")).unwrap();
    assert!(prov.contains("kind = nonlinear"));
    assert!(prov.contains("seed = 7"));
}

#[test]
fn gen_data_linear_kind_and_bad_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["gen-data", "--kind", "linear", "--corrs", "0.9,0.5,0.1", "--n", "500", "--out", "l.mvds"],
    );
    assert!(out.status.success());
    let ds = MultiViewDataset::load(&dir.path().join("l.mvds")).unwrap();
    assert_eq!(ds.len(), 500);
    assert_eq!(ds.shape_x, vec![3]);

    let out = run_in(dir.path(), &["gen-data", "--kind", "mystery", "--out", "x.mvds"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_echoes_canonical_defaults_in_resolved_config() {
    let pipeline = pipeline();
    // Defaults (no overrides beyond the data/out/epochs needed to run fast):
    // the provenance file must echo the canonical hyperparameters.
    let out = run_in(
        pipeline.dir.path(),
        &["train", "--data", "d.mvds", "--out", "defaults.dcck", "--epochs", "0", "--h", "4"],
    );
    assert!(out.status.success());
    let prov = std::fs::read_to_string(pipeline.dir.path().join("defaults.dcck.config")).unwrap();
    assert!(prov.contains("batch-size = 100"));
    assert!(prov.contains("lr0 = 0.1"));
    assert!(prov.contains("momentum = 0.9"));
    assert!(prov.contains("halve-every = 25"));
}

#[test]
fn train_epoch_log_format() {
    let pipeline = pipeline();
    let out = run_in(
        pipeline.dir.path(),
        &[
            "train", "--data", "d.mvds", "--out", "log.dcck", "--epochs", "2", "--batch-size",
            "20", "--h", "4", "--seed", "9",
        ],
    );
    assert!(out.status.success());
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        assert!(
            line.starts_with(&format!("epoch={i} loss=")),
            "unexpected log line: {line}"
        );
        assert!(line.contains(" val_corr="), "{line}");
        assert!(line.contains(" lr=0.1"), "{line}");
    }
}

#[test]
fn train_on_corrupt_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.mvds"), b"MVDSgarbage").unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--data", "junk.mvds", "--out", "m.dcck", "--epochs", "0"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.path().join("m.dcck").exists(), "no checkpoint on failure");
}

#[test]
fn index_is_deterministic_and_counts_records() {
    let pipeline = pipeline();
    let first = run_in(
        pipeline.dir.path(),
        &[
            "index", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--modality",
            "image", "--out", "again.dcix",
        ],
    );
    assert!(first.status.success());
    assert_eq!(
        std::fs::read(&pipeline.index).unwrap(),
        std::fs::read(pipeline.dir.path().join("again.dcix")).unwrap()
    );
    // 20 pieces → 4 test pieces × 10 snippets
    assert!(stdout_of(&first).contains("m=40"));

    let limited = run_in(
        pipeline.dir.path(),
        &[
            "index", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--modality",
            "audio", "--limit", "7", "--out", "lim.dcix",
        ],
    );
    assert!(limited.status.success());
    assert!(stdout_of(&limited).contains("m=7"));

    let bad = run_in(
        pipeline.dir.path(),
        &[
            "index", "--ckpt", "m.dcck", "--data", "d.mvds", "--modality", "telepathy", "--out",
            "t.dcix",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn query_finds_the_paired_snippet() {
    let pipeline = pipeline();
    // Export the audio view of the first test sample; its image pair holds
    // snippet id 0 in the index. Query the full candidate list: the pair must
    // appear, and its rank is reported.
    let ds = MultiViewDataset::load(&pipeline.data).unwrap();
    let test_idx = ds.split_indices(Split::Test);
    let sample = ds.sample(View::Y, test_idx[0]);
    let qpath = pipeline.dir.path().join("q.mvsn");
    save_sample(&qpath, &ds.shape_y, sample).unwrap();

    let out = run_in(
        pipeline.dir.path(),
        &["query", "--ckpt", "m.dcck", "--index", "i.dcix", "--input", "q.mvsn", "--k", "40"],
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 40, "expected k lines:\n{text}");

    let mut last_distance = f64::NEG_INFINITY;
    let mut pair_rank = None;
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 5, "rank snippet piece position distance: {line}");
        assert_eq!(fields[0].parse::<usize>().unwrap(), i + 1);
        let distance: f64 = fields[4].parse().unwrap();
        assert!(distance >= last_distance, "distances not ascending:\n{text}");
        last_distance = distance;
        if fields[1] == "0" {
            pair_rank = Some(i + 1);
        }
    }
    let rank = pair_rank.expect("paired snippet missing from full ranking");
    println!("paired snippet ranked {rank} of 40");
}

#[test]
fn query_k_beyond_index_is_usage_error() {
    let pipeline = pipeline();
    let ds = MultiViewDataset::load(&pipeline.data).unwrap();
    let test_idx = ds.split_indices(Split::Test);
    let qpath = pipeline.dir.path().join("q.mvsn");
    save_sample(&qpath, &ds.shape_y, ds.sample(View::Y, test_idx[0])).unwrap();
    let out = run_in(
        pipeline.dir.path(),
        &["query", "--ckpt", "m.dcck", "--index", "i.dcix", "--input", "q.mvsn", "--k", "999"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn query_wrong_modality_shape_is_usage_error() {
    let pipeline = pipeline();
    let ds = MultiViewDataset::load(&pipeline.data).unwrap();
    let test_idx = ds.split_indices(Split::Test);
    // The index holds images, so queries must be audio-shaped; hand it an
    // image sample instead.
    let qpath = pipeline.dir.path().join("wrong.mvsn");
    save_sample(&qpath, &ds.shape_x, ds.sample(View::X, test_idx[0])).unwrap();
    let out = run_in(
        pipeline.dir.path(),
        &["query", "--ckpt", "m.dcck", "--index", "i.dcix", "--input", "wrong.mvsn", "--k", "3"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_report_layout_and_directions() {
    let pipeline = pipeline();
    let out = run_in(
        pipeline.dir.path(),
        &["evaluate", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--direction", "both"],
    );
    assert!(out.status.success());
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("direction=audio-to-sheet "));
    assert!(lines[1].starts_with("direction=sheet-to-audio "));
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        let keys: Vec<&str> = fields.iter().map(|f| f.split('=').next().unwrap()).collect();
        assert_eq!(keys, vec!["direction", "r_at_1", "r_at_5", "r_at_10", "mr", "m"]);
        assert!(fields[5].ends_with("=40"), "candidate pool: {line}");
    }

    let single = run_in(
        pipeline.dir.path(),
        &[
            "evaluate", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--direction",
            "sheet-to-audio",
        ],
    );
    assert_eq!(stdout_of(&single).lines().count(), 1);

    let relaxed = run_in(
        pipeline.dir.path(),
        &[
            "evaluate", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--direction",
            "audio-to-sheet", "--relaxed-tol", "2",
        ],
    );
    let text = stdout_of(&relaxed);
    assert!(text.contains(" relaxed_tol=2 relaxed_r_at_1="), "{text}");
}

#[test]
fn evaluate_clips_oversized_limit_with_warning() {
    let pipeline = pipeline();
    let out = run_in(
        pipeline.dir.path(),
        &[
            "evaluate", "--ckpt", "m.dcck", "--data", "d.mvds", "--split", "test", "--direction",
            "audio-to-sheet", "--limit", "16000",
        ],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clipped"));
    assert!(stdout_of(&out).contains("m=40"));
}

#[test]
fn config_file_values_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "kind = nonlinear\npieces = 6\nsnippets-per-piece = 8\nseed = 11\n",
    )
    .unwrap();
    // pieces comes from the file, --snippets-per-piece flag overrides it.
    let out = run_in(
        dir.path(),
        &[
            "--config", "run.cfg", "gen-data", "--snippets-per-piece", "4", "--out", "c.mvds",
        ],
    );
    assert!(out.status.success(), "{out:?}");
    assert!(stdout_of(&out).contains("n=24"), "{}", stdout_of(&out));
    let prov = std::fs::read_to_string(dir.path().join("c.mvds.config")).unwrap();
    assert!(prov.contains("pieces = 6"));
    assert!(prov.contains("snippets-per-piece = 4"));
    assert!(prov.contains("seed = 11"));
}

#[test]
fn sample_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.mvsn");
    let data: Vec<f64> = (0..6).map(|i| i as f64).collect();
    save_sample(&path, &[1, 2, 3], &data).unwrap();
    let (shape, back) = load_sample(&path).unwrap();
    assert_eq!(shape, vec![1, 2, 3]);
    assert_eq!(back, data);
}
