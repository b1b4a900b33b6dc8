//! End-to-end checks through the compiled `advlab` binary: exit codes,
//! artifact layout, and the trainability of the synthetic task.

use std::path::Path;
use std::process::Command;

fn advlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advlab"))
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.conf");
    let text = format!(
        "data.classes = 2\ndata.per_class = 12\ndata.size = 8\ndata.seed = 3\n\
         train.method = sat\ntrain.epochs = 2\ntrain.batch_size = 8\n\
         train.attack.steps = 2\neval.attacks = FGSM, 2-PGD\n\
         output.dir = {}\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_command_flow_with_exit_codes() {
    let dir = std::env::temp_dir().join("advlab_cli_e2e");
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(&dir, "");

    // usage errors exit 1
    let out = advlab().arg("bogus-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = advlab().arg("train").output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(1),
        "missing --config is a usage error"
    );

    // runtime errors exit 2
    let out = advlab()
        .args(["eval", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "eval before train must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("checkpoint"),
        "actionable message: {stderr}"
    );

    // happy path exits 0 and produces the documented artifacts
    for command in [
        "synth-data",
        "train",
        "attack",
        "eval",
        "gradcam",
        "report",
        "ablation",
    ] {
        let out = advlab()
            .args([command, "--config"])
            .arg(&cfg)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{command} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let outdir = dir.join("out");
    assert!(outdir.join("checkpoint_sat.dpat").exists());
    assert!(outdir.join("train_sat.csv").exists());
    assert!(outdir.join("eval_sat.csv").exists());
    assert!(outdir.join("report.csv").exists());
    assert!(outdir.join("ablation.csv").exists());
    assert!(outdir.join("data_train").join("index.csv").exists());
    assert!(outdir.join("adv_sat_FGSM").join("index.csv").exists());
    assert!(outdir.join("adv_sat_FGSM_norms.csv").exists());

    let log = std::fs::read_to_string(outdir.join("train_sat.csv")).unwrap();
    assert!(log.starts_with("epoch,clean_loss,adv_loss,sync_loss,fragile_frac,val_gacc,seconds"));
    let eval = std::fs::read_to_string(outdir.join("eval_sat.csv")).unwrap();
    assert!(eval.starts_with("method,attack,gacc,racc,map,marp,precision,recall,f1"));

    // --set overrides work through the same validation
    let out = advlab()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "train.alpha=1.5"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "range error surfaces as runtime failure"
    );

    std::fs::remove_dir_all(&dir).ok();
}

/// The synthetic task is learnable at the documented scale: a seeded
/// standard-trained reference CNN reaches at least 90% test accuracy within
/// 30 epochs.
#[test]
fn synthetic_task_is_trainable_at_scale() {
    use advlab_core::config::parse_config_text;
    use advlab_core::pipeline;

    let dir = std::env::temp_dir().join("advlab_cli_trainable");
    std::fs::remove_dir_all(&dir).ok();
    let text = format!(
        "data.classes = 3\ndata.per_class = 200\ndata.size = 32\ndata.seed = 7\n\
         train.method = std\ntrain.epochs = 30\noutput.dir = {}\n",
        dir.display()
    );
    let cfg = parse_config_text(&text).unwrap();
    pipeline::cmd_train(&cfg).unwrap();
    let reports = pipeline::cmd_eval(&cfg).unwrap();
    assert!(
        reports[0].gacc >= 0.9,
        "STD test accuracy {:.4} below 0.9",
        reports[0].gacc
    );
    std::fs::remove_dir_all(&dir).ok();
}

/// A standard-trained model loses accuracy under the iterative attack at a
/// scale where the evaluation budget reaches decision boundaries.
#[test]
fn std_robust_accuracy_collapses_under_pgd() {
    use advlab_core::config::parse_config_text;
    use advlab_core::pipeline;

    let dir = std::env::temp_dir().join("advlab_cli_std_racc");
    std::fs::remove_dir_all(&dir).ok();
    let text = format!(
        "data.classes = 3\ndata.per_class = 120\ndata.size = 16\ndata.seed = 5\n\
         train.method = std\ntrain.epochs = 30\neval.attacks = 20-PGD\n\
         output.dir = {}\n",
        dir.display()
    );
    let cfg = parse_config_text(&text).unwrap();
    pipeline::cmd_train(&cfg).unwrap();
    let reports = pipeline::cmd_eval(&cfg).unwrap();
    let row = &reports[0];
    assert!(
        row.racc < row.gacc,
        "expected robust accuracy {} strictly below clean accuracy {}",
        row.racc,
        row.gacc
    );
    std::fs::remove_dir_all(&dir).ok();
}
