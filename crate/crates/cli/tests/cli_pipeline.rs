//! End-to-end pipeline drive at miniature scale: every stage runs from
//! config files, unknown keys are rejected, and reruns are digest-identical.

use std::path::{Path, PathBuf};
use stegolab_cli::manifest::deterministic_section;
use stegolab_cli::{run_experiment, Stage};

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("stegolab-cli-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(stage: Stage, config: &Path, out: &Path) -> stegolab_cli::RunManifest {
    run_experiment(stage, config, None, out).expect("stage should succeed")
}

const GEN: &str = "height=16\nwidth=16\nchannels=1\nellipses=2\n\
sigma_low_sq=1e-4\nsigma_high_sq=4.9e-3\nlow_region_fraction=0.6\n\
mask=centered-rect\nseed=5\ncount=12\n";

/// Run the whole quickstart into fixed directories (wiping stage outputs
/// first) and return each stage's deterministic manifest section.
fn quickstart(root: &Path) -> Vec<String> {
    let corpus_dir = root.join("corpus");
    let codec_dir = root.join("codec");
    let ddpm_dir = root.join("ddpm");
    let select_dir = root.join("select");
    let analyze_dir = root.join("analyze");
    for d in [&corpus_dir, &codec_dir, &ddpm_dir, &select_dir, &analyze_dir] {
        let _ = std::fs::remove_dir_all(d);
    }

    let gen_cfg = write_config(root, "gen.kv", GEN);
    run(Stage::GenData, &gen_cfg, &corpus_dir);

    let codec_cfg = write_config(
        root,
        "codec.kv",
        &format!(
            "corpus={}\npayload=1\nepochs=3\nlambda_q=40\nseed=7\n",
            corpus_dir.display()
        ),
    );
    run(Stage::TrainCodec, &codec_cfg, &codec_dir);

    let ddpm_cfg = write_config(
        root,
        "ddpm.kv",
        &format!(
            "corpus={}\nt_diff=8\nepochs=2\nseed=9\n",
            corpus_dir.display()
        ),
    );
    run(Stage::TrainDdpm, &ddpm_cfg, &ddpm_dir);

    let select_cfg = write_config(
        root,
        "select.kv",
        &format!(
            "corpus={}\ncodec={}\nddpm={}\ncovers=2\nepochs=2\nsteps_per_epoch=3\nlr=0.01\nseed=11\n",
            corpus_dir.display(),
            codec_dir.join("codec").display(),
            ddpm_dir.join("ddpm").display(),
        ),
    );
    run(Stage::SelectDdim, &select_cfg, &select_dir);

    let analyze_cfg = write_config(
        root,
        "analyze.kv",
        &format!(
            "corpus={}\ncodec={}\nseed=13\n",
            corpus_dir.display(),
            codec_dir.join("codec").display(),
        ),
    );
    run(Stage::Analyze, &analyze_cfg, &analyze_dir);

    [corpus_dir, codec_dir, ddpm_dir, select_dir, analyze_dir]
        .iter()
        .map(|d| {
            let text = std::fs::read_to_string(d.join("manifest.txt")).unwrap();
            deterministic_section(&text).to_string()
        })
        .collect()
}

#[test]
fn quickstart_pipeline_runs_and_reproduces() {
    // Delete everything except configs and seeds, rerun, compare digests.
    let root = workdir("quickstart");
    let first = quickstart(&root);
    let second = quickstart(&root);
    for (stage, (a, b)) in first.iter().zip(&second).enumerate() {
        assert_eq!(a, b, "stage {stage} manifests diverged between reruns");
    }
}

#[test]
fn unknown_config_keys_rejected() {
    let root = workdir("badkeys");
    let cfg = write_config(&root, "gen.kv", &format!("{GEN}mystery_knob=3\n"));
    let err = run_experiment(Stage::GenData, &cfg, None, &root.join("out")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("mystery_knob"), "{msg}");
    assert_eq!(stegolab_cli::exit_code_for(&err), 1);
}

#[test]
fn missing_prerequisite_is_a_runtime_error() {
    let root = workdir("missing");
    let corpus_dir = root.join("corpus");
    let gen_cfg = write_config(&root, "gen.kv", GEN);
    run(Stage::GenData, &gen_cfg, &corpus_dir);
    let cfg = write_config(
        &root,
        "select.kv",
        &format!(
            "corpus={}\ncodec=/nonexistent/codec\nddpm=/nonexistent/ddpm\n",
            corpus_dir.display()
        ),
    );
    let err = run_experiment(Stage::SelectDdim, &cfg, None, &root.join("out")).unwrap_err();
    assert_eq!(stegolab_cli::exit_code_for(&err), 2, "missing checkpoint: {err}");
    assert!(err.to_string().contains("nonexistent"), "{err}");
}

#[test]
fn seed_override_changes_outputs() {
    let root = workdir("seeds");
    let gen_cfg = write_config(&root, "gen.kv", GEN);
    let a = run_experiment(Stage::GenData, &gen_cfg, Some(100), &root.join("a")).unwrap();
    let b = run_experiment(Stage::GenData, &gen_cfg, Some(101), &root.join("b")).unwrap();
    let da: Vec<u64> = a.outputs.iter().map(|(_, d)| *d).collect();
    let db: Vec<u64> = b.outputs.iter().map(|(_, d)| *d).collect();
    assert_ne!(da, db, "different seeds must generate different corpora");
}
