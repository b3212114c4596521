//! Miniature-scale drives of the remaining subcommands: each produces its
//! documented outputs with well-formed headers.

use std::path::{Path, PathBuf};
use stegolab_cli::{run_experiment, Stage};

fn workdir() -> PathBuf {
    let dir = std::env::temp_dir().join("stegolab-cli-stages");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn remaining_stages_produce_documented_outputs() {
    let root = workdir();
    let corpus_dir = root.join("corpus");
    let gen_cfg = write_config(
        &root,
        "gen.kv",
        "height=16\nwidth=16\nsigma_low_sq=1e-4\nsigma_high_sq=4.9e-3\nseed=5\ncount=16\n",
    );
    run_experiment(Stage::GenData, &gen_cfg, None, &corpus_dir).unwrap();
    let surrogate_dir = root.join("surrogate");
    run_experiment(Stage::GenData, &gen_cfg, Some(27), &surrogate_dir).unwrap();

    let codec_dir = root.join("codec");
    let codec_cfg = write_config(
        &root,
        "codec.kv",
        &format!("corpus={}\npayload=1\nepochs=3\nlambda_q=40\nseed=7\n", corpus_dir.display()),
    );
    run_experiment(Stage::TrainCodec, &codec_cfg, None, &codec_dir).unwrap();
    let codec = codec_dir.join("codec");

    let ddpm_dir = root.join("ddpm");
    let ddpm_cfg = write_config(
        &root,
        "ddpm.kv",
        &format!("corpus={}\nt_diff=6\nepochs=2\nseed=9\n", corpus_dir.display()),
    );
    run_experiment(Stage::TrainDdpm, &ddpm_cfg, None, &ddpm_dir).unwrap();
    let ddpm = ddpm_dir.join("ddpm");

    // train-gan + select-gan.
    let gan_dir = root.join("gan");
    let gan_cfg = write_config(
        &root,
        "gan.kv",
        &format!("corpus={}\nepochs=2\nseed=15\n", corpus_dir.display()),
    );
    run_experiment(Stage::TrainGan, &gan_cfg, None, &gan_dir).unwrap();
    assert!(gan_dir.join("gan_gen.bin").exists());
    assert!(read(&gan_dir.join("gan_log.csv")).starts_with("epoch,d_loss,g_loss"));

    let select_gan_dir = root.join("select-gan");
    let select_gan_cfg = write_config(
        &root,
        "select-gan.kv",
        &format!(
            "codec={}\ngenerator={}\nruns=2\nepochs=3\nseed=17\n",
            codec.display(),
            gan_dir.join("gan_gen").display(),
        ),
    );
    run_experiment(Stage::SelectGan, &select_gan_cfg, None, &select_gan_dir).unwrap();
    let summary = read(&select_gan_dir.join("summary.csv"));
    assert!(summary.starts_with("run,baseline_error,best_error,best_epoch"));
    assert_eq!(summary.lines().count(), 3, "two runs plus header: {summary}");

    // payload-sweep emits one row per payload with the reserved column.
    let sweep_dir = root.join("sweep");
    let sweep_cfg = write_config(
        &root,
        "sweep.kv",
        &format!(
            "corpus={}\nddpm={}\npayloads=1,2\nepochs=2\ncovers=2\nlambda_q=40\nsteps_per_epoch=2\nseed=19\n",
            corpus_dir.display(),
            ddpm.display(),
        ),
    );
    run_experiment(Stage::PayloadSweep, &sweep_cfg, None, &sweep_dir).unwrap();
    let sweep = read(&sweep_dir.join("payload_sweep.csv"));
    assert!(sweep.starts_with("payload,error_original,error_optimized,ssim_original"));
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.contains("unavailable"), "brisque column is reserved: {sweep}");

    // robustness over one noise level.
    let robust_dir = root.join("robust");
    let robust_cfg = write_config(
        &root,
        "robust.kv",
        &format!(
            "corpus={}\ncodec={}\nddpm={}\nbetas=0.01\ncovers=2\nepochs=2\nsteps_per_epoch=2\nseed=21\n",
            corpus_dir.display(),
            codec.display(),
            ddpm.display(),
        ),
    );
    run_experiment(Stage::Robustness, &robust_cfg, None, &robust_dir).unwrap();
    let robust = read(&robust_dir.join("robustness.csv"));
    assert!(robust.starts_with("beta,error_original,error_optimized"));
    assert_eq!(robust.lines().count(), 2);

    // steganalyze: both scenarios at one payload.
    let steg_dir = root.join("steg");
    let steg_cfg = write_config(
        &root,
        "steg.kv",
        &format!(
            "corpus={}\nsurrogate_corpus={}\npayloads=1\nepochs=2\nlambda_q=40\ndetector_epochs=2\nseed=23\n",
            corpus_dir.display(),
            surrogate_dir.display(),
        ),
    );
    run_experiment(Stage::Steganalyze, &steg_cfg, None, &steg_dir).unwrap();
    let steg = read(&steg_dir.join("steganalysis.csv"));
    assert!(steg.starts_with("payload,scenario,detection_pct,error_pct"));
    assert_eq!(steg.lines().count(), 3, "scenario 1 and 2 rows: {steg}");

    // The saved surrogate detector feeds an evasion-aware codec training.
    assert!(steg_dir.join("detector_b1.bin").exists());
    let evade_dir = root.join("codec-evade");
    let evade_cfg = write_config(
        &root,
        "codec-evade.kv",
        &format!(
            "corpus={}
payload=1
epochs=3
lambda_q=40
seed=7
stegan_detector={}
stegan_weight=0.1
",
            corpus_dir.display(),
            steg_dir.join("detector_b1").display(),
        ),
    );
    run_experiment(Stage::TrainCodec, &evade_cfg, None, &evade_dir).unwrap();
    assert!(evade_dir.join("codec.bin").exists());

    // report emits per-image metrics plus the correlation table.
    let report_dir = root.join("report");
    let report_cfg = write_config(
        &root,
        "report.kv",
        &format!("corpus={}\ncodec={}\nseed=25\n", corpus_dir.display(), codec.display()),
    );
    run_experiment(Stage::Report, &report_cfg, None, &report_dir).unwrap();
    let metrics = read(&report_dir.join("metrics.csv"));
    assert!(metrics.starts_with("image,error_rate,psnr,ssim,entropy"));
    assert_eq!(metrics.lines().count(), 17, "16 images plus header");
    let corr = read(&report_dir.join("correlations.csv"));
    assert!(corr.starts_with("metric,target,pearson_r"));
    assert_eq!(corr.lines().count(), 5, "four metrics against error rate");
}
