//! Command orchestration behind the CLI: data generation, training,
//! attacking, evaluation, Grad-CAM export, and cross-method reports.
//! Every artifact path derives from (output dir, command, method, attack),
//! and every command is byte-reproducible for a fixed config.

use std::path::{Path, PathBuf};

use crate::attack::{iterative_attack, AttackSpec};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_folder, save_folder, split, synth, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::gradcam::{gradcam_for_image, render};
use crate::metrics::{accuracy, confusion, map_marp, prf1, EvalReport, EVAL_CSV_HEADER};
use crate::model::{
    build_model, load_checkpoint, predict_labels, predict_proba, save_checkpoint, Classifier,
    ModelParams,
};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::train::{FitResult, Method, Trainer};

/// Stream tag for evaluation-time attack noise.
const EVAL_ATTACK_TAG: u64 = 11;

/// Methods joined by the comparison report, in row order.
pub const REPORT_METHODS: [Method; 5] = [
    Method::Std,
    Method::At,
    Method::Sat,
    Method::Amat,
    Method::Dpaat,
];

/// Ablation arms and their row labels.
pub const ABLATION_ARMS: [(Method, &str); 3] = [
    (Method::DpaatAOnly, "D-A"),
    (Method::DpaatBOnly, "D-B"),
    (Method::Dpaat, "D-(A+B)"),
];

fn method_slug(method: Method) -> String {
    method.name().to_ascii_lowercase().replace('-', "_")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.out_dir
        .join(format!("checkpoint_{}.dpat", method_slug(method)))
}

pub fn train_log_path(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.out_dir
        .join(format!("train_{}.csv", method_slug(method)))
}

pub fn eval_csv_path(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.out_dir
        .join(format!("eval_{}.csv", method_slug(method)))
}

pub fn report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("report.csv")
}

pub fn ablation_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("ablation.csv")
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Materialize the train/val/test splits this config describes.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let full = match cfg.data.source {
        DataSource::Synth => synth(
            cfg.data.classes,
            cfg.data.per_class,
            cfg.data.size,
            cfg.data.seed,
        )?,
        DataSource::Folder => {
            let root = cfg
                .data
                .path
                .as_ref()
                .expect("validated: folder source has a path");
            load_folder(root, &root.join("index.csv"), None)?
        }
    };
    split(&full, cfg.data.split, cfg.data.seed)
}

/// Generate the synthetic dataset and export each split as a folder
/// container under the output directory.
pub fn cmd_synth_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let (train, val, test) = load_data(cfg)?;
    let mut out = Vec::new();
    for ds in [&train, &val, &test] {
        let dir = cfg.out_dir.join(format!("data_{}", ds.split_tag.name()));
        save_folder(ds, &dir)?;
        out.push(dir);
    }
    Ok(out)
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub fit: FitResult,
    pub attack_calls: usize,
}

/// Train the configured method, then write the checkpoint (best-epoch
/// parameters when validation is present) and the training-log CSV. The
/// `seconds` column is fixed at zero so artifacts stay byte-reproducible;
/// live timings go to stdout via the CLI instead.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    ensure_out_dir(cfg)?;
    let (train, val, _) = load_data(cfg)?;
    let arch = cfg.arch_spec()?;
    let params = build_model(&arch, cfg.model.seed)?;
    let mut trainer = Trainer::new(arch, cfg.train.clone())?;
    let fit = trainer.fit(params, &train, Some(&val))?;

    let mut log =
        String::from("epoch,clean_loss,adv_loss,sync_loss,fragile_frac,val_gacc,seconds\n");
    for r in &fit.reports {
        log.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.epoch, r.clean_loss, r.adv_loss, r.sync_loss, r.fragile_frac, r.val_gacc, 0.0
        ));
    }
    let log_path = train_log_path(cfg, cfg.train.method);
    write_text(&log_path, &log)?;

    let ckpt = checkpoint_path(cfg, cfg.train.method);
    save_checkpoint(&fit.params, &ckpt)?;
    Ok(TrainArtifacts {
        checkpoint: ckpt,
        log: log_path,
        fit,
        attack_calls: trainer.attack_calls(),
    })
}

fn load_trained(cfg: &ExperimentConfig, method: Method) -> Result<ModelParams> {
    let path = checkpoint_path(cfg, method);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint {} not found; run `train` with train.method = {} first",
            path.display(),
            method.name().to_ascii_lowercase()
        )));
    }
    load_checkpoint(&path)
}

/// Craft an adversarial copy of a dataset in training-batch-sized chunks.
/// Returns the perturbed images plus per-example norms and success flags.
pub fn craft_adversarial(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    data: &Dataset,
    spec: &AttackSpec,
    attack_idx: usize,
) -> Result<(Tensor, Vec<Real>, Vec<bool>)> {
    let arch = cfg.arch_spec()?;
    let target = Classifier {
        arch: &arch,
        params,
    };
    let root = Rng::new(cfg.train.seed);
    let chunk_size = cfg.train.batch_size.max(1);
    let stride = data.images.example_stride();
    let mut x_adv = Vec::with_capacity(data.images.len());
    let mut norms = Vec::with_capacity(data.len());
    let mut success = Vec::with_capacity(data.len());
    let mut start = 0;
    let mut chunk_idx = 0u64;
    while start < data.len() {
        let m = chunk_size.min(data.len() - start);
        let idx: Vec<usize> = (start..start + m).collect();
        let batch = data.select(&idx, data.split_tag);
        let stream = root.fork(&[EVAL_ATTACK_TAG, attack_idx as u64, chunk_idx]);
        let adv = iterative_attack(&target, &batch.images, &batch.labels, spec, &stream)?;
        x_adv.extend_from_slice(adv.x_adv.data());
        norms.extend(adv.delta_norms);
        success.extend(adv.success);
        start += m;
        chunk_idx += 1;
    }
    let mut shape = data.images.shape().to_vec();
    shape[0] = data.len();
    debug_assert_eq!(x_adv.len(), data.len() * stride);
    Ok((Tensor::from_parts(shape, x_adv), norms, success))
}

/// Craft and export adversarial copies of the test set for every configured
/// attack, with per-example delta-norm stats.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let (_, _, test) = load_data(cfg)?;
    let params = load_trained(cfg, cfg.train.method)?;
    let slug = method_slug(cfg.train.method);
    let mut out = Vec::new();
    for (idx, (name, spec)) in cfg.eval_attacks()?.iter().enumerate() {
        let (x_adv, norms, success) = craft_adversarial(cfg, &params, &test, spec, idx)?;
        let adv_ds = Dataset {
            images: x_adv,
            labels: test.labels.clone(),
            class_names: test.class_names.clone(),
            split_tag: SplitTag::Test,
        };
        let dir = cfg.out_dir.join(format!("adv_{slug}_{name}"));
        save_folder(&adv_ds, &dir)?;

        let mut csv = String::from("index,label,delta_norm,success\n");
        for i in 0..adv_ds.len() {
            csv.push_str(&format!(
                "{i},{},{:.9},{}\n",
                test.labels[i], norms[i], success[i] as u8
            ));
        }
        let stats = cfg.out_dir.join(format!("adv_{slug}_{name}_norms.csv"));
        write_text(&stats, &csv)?;
        out.push(dir);
        out.push(stats);
    }
    Ok(out)
}

/// Evaluate the trained method on the clean test set and under every
/// configured attack; writes one EvalReport row per attack.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    ensure_out_dir(cfg)?;
    let (_, _, test) = load_data(cfg)?;
    let params = load_trained(cfg, cfg.train.method)?;
    let reports = evaluate_params(cfg, &params, cfg.train.method, &test)?;
    let mut csv = String::from(EVAL_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&eval_csv_path(cfg, cfg.train.method), &csv)?;
    Ok(reports)
}

/// Shared evaluation core: clean metrics once, then per-attack RAcc/mARP.
pub fn evaluate_params(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    method: Method,
    test: &Dataset,
) -> Result<Vec<EvalReport>> {
    let arch = cfg.arch_spec()?;
    let clean_probs = predict_proba(&arch, params, &test.images)?;
    let clean_pred = clean_probs.argmax_rows()?;
    let cm = confusion(&test.labels, &clean_pred, arch.classes)?;
    let gacc = accuracy(&cm)?;
    let map = map_marp(&clean_probs, &test.labels)?;
    let (precision, recall, f1) = prf1(&cm)?;

    let mut out = Vec::new();
    for (idx, (name, spec)) in cfg.eval_attacks()?.iter().enumerate() {
        let (x_adv, _, _) = craft_adversarial(cfg, params, test, spec, idx)?;
        let adv_probs = predict_proba(&arch, params, &x_adv)?;
        let adv_pred = adv_probs.argmax_rows()?;
        let acm = confusion(&test.labels, &adv_pred, arch.classes)?;
        let racc = accuracy(&acm)?;
        let marp = map_marp(&adv_probs, &test.labels)?;
        out.push(EvalReport {
            method: method.name().to_string(),
            attack: name.clone(),
            gacc,
            racc,
            map,
            marp,
            precision,
            recall,
            f1,
        });
    }
    Ok(out)
}

/// Write Grad-CAM heatmaps for the first n correctly predicted test images.
pub fn cmd_gradcam(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let (_, _, test) = load_data(cfg)?;
    let params = load_trained(cfg, cfg.train.method)?;
    let arch = cfg.arch_spec()?;
    let pred = predict_labels(&arch, &params, &test.images)?;
    let slug = method_slug(cfg.train.method);
    let mut out = Vec::new();
    let mut written = 0;
    let [c, h, w] = arch.input_shape;
    for (i, predicted) in pred.iter().enumerate() {
        if written >= cfg.eval.gradcam_count {
            break;
        }
        if *predicted != test.labels[i] {
            continue;
        }
        let x = Tensor::from_parts(vec![1, c, h, w], test.images.example(i).to_vec());
        let cam = gradcam_for_image(&arch, &params, &x, test.labels[i], None)?;
        let base = format!("img{i:05}_{slug}_{}", test.labels[i]);
        let pgm = cfg.out_dir.join(format!("{base}.pgm"));
        let csv = cfg.out_dir.join(format!("{base}.csv"));
        render(&cam, &pgm, &csv)?;
        out.push(pgm);
        out.push(csv);
        written += 1;
    }
    Ok(out)
}

fn read_eval_csv(path: &Path) -> Result<Vec<EvalReport>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "evaluation CSV {} not found; run `eval` for that method first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != EVAL_CSV_HEADER {
                return Err(Error::Config {
                    line: Some(1),
                    message: format!("unexpected eval CSV header in {}", path.display()),
                });
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::Config {
                line: Some(i + 1),
                message: format!("malformed eval CSV row in {}", path.display()),
            });
        }
        let num = |s: &str| -> Result<Real> {
            s.parse::<f64>()
                .map(|v| v as Real)
                .map_err(|_| Error::Config {
                    line: Some(i + 1),
                    message: format!("bad number '{s}' in {}", path.display()),
                })
        };
        out.push(EvalReport {
            method: cells[0].to_string(),
            attack: cells[1].to_string(),
            gacc: num(cells[2])?,
            racc: num(cells[3])?,
            map: num(cells[4])?,
            marp: num(cells[5])?,
            precision: num(cells[6])?,
            recall: num(cells[7])?,
            f1: num(cells[8])?,
        });
    }
    Ok(out)
}

fn comparison_csv(cfg: &ExperimentConfig, rows: &[(String, Vec<EvalReport>)]) -> String {
    let mut csv = String::from("method,gacc");
    for name in &cfg.eval.attacks {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (label, reports) in rows {
        let gacc = reports.first().map_or(0.0, |r| r.gacc);
        csv.push_str(&format!("{label},{gacc:.6}"));
        for name in &cfg.eval.attacks {
            let racc = reports
                .iter()
                .find(|r| &r.attack == name)
                .map_or(0.0, |r| r.racc);
            csv.push_str(&format!(",{racc:.6}"));
        }
        csv.push('\n');
    }
    csv
}

/// Join per-method evaluation CSVs into one methods-by-attacks table.
/// Methods evaluated so far contribute one row each; at least one is needed.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    ensure_out_dir(cfg)?;
    let mut rows = Vec::new();
    for method in REPORT_METHODS {
        let csv = eval_csv_path(cfg, method);
        if !csv.exists() {
            continue;
        }
        let reports = read_eval_csv(&csv)?;
        rows.push((method.name().to_string(), reports));
    }
    if rows.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no evaluation CSVs under {}; run `eval` first",
            cfg.out_dir.display()
        )));
    }
    let path = report_path(cfg);
    write_text(&path, &comparison_csv(cfg, &rows))?;
    Ok(path)
}

pub struct AblationArtifacts {
    pub csv: PathBuf,
    /// (label, evaluation rows, train-split checksum) per arm.
    pub arms: Vec<(String, Vec<EvalReport>, u64)>,
}

/// Run the three ablation arms on identical data and emit one comparison CSV.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<AblationArtifacts> {
    ensure_out_dir(cfg)?;
    let mut arms = Vec::new();
    let mut rows = Vec::new();
    for (method, label) in ABLATION_ARMS {
        let mut sub = cfg.clone();
        sub.train.method = method;
        let (train, _, test) = load_data(&sub)?;
        let artifacts = cmd_train(&sub)?;
        let reports = evaluate_params(&sub, &artifacts.fit.params, method, &test)?;
        let mut csv = String::from(EVAL_CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write_text(&eval_csv_path(&sub, method), &csv)?;
        arms.push((label.to_string(), reports.clone(), train.checksum()));
        rows.push((label.to_string(), reports));
    }
    let path = ablation_path(cfg);
    write_text(&path, &comparison_csv(cfg, &rows))?;
    Ok(AblationArtifacts { csv: path, arms })
}
