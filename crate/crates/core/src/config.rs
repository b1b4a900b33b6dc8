//! Plain-text experiment configuration: one `section.key = value` per line,
//! `#` comments, unknown keys rejected, defaults filled per module.

use std::path::{Path, PathBuf};

use crate::attack::{AttackMethod, AttackSpec, Norm, StepDirection};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::tensor::Real;
use crate::train::{Method, Regenerate, SyncVariant, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Folder,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub split: (Real, Real, Real),
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: String,
    pub hidden: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub attacks: Vec<String>,
    pub epsilon: Real,
    pub step: Real,
    pub gradcam_count: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Architecture implied by the model and data sections.
    pub fn arch_spec(&self) -> Result<ArchSpec> {
        match self.model.arch.as_str() {
            "smallcnn" => ArchSpec::small_cnn(1, self.data.size, self.data.size, self.data.classes),
            "mlp" => ArchSpec::mlp(
                1,
                self.data.size,
                self.data.size,
                self.model.hidden,
                self.data.classes,
            ),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    /// Evaluation attack specs in configured order, pixel clamp on.
    pub fn eval_attacks(&self) -> Result<Vec<(String, AttackSpec)>> {
        self.eval
            .attacks
            .iter()
            .map(|name| {
                AttackSpec::from_name(name, self.eval.epsilon, self.eval.step)
                    .map(|s| (name.clone(), s.with_clamp(0.0, 1.0)))
            })
            .collect()
    }
}

/// Raw key assignments in file order, later used to build the config.
struct Assignment {
    line: Option<usize>,
    key: String,
    value: String,
}

fn parse_lines(text: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                line: Some(idx + 1),
                message: format!("expected 'section.key = value', got '{raw}'"),
            });
        };
        out.push(Assignment {
            line: Some(idx + 1),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parse a config file and apply `--set section.key=value` overrides.
pub fn parse_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut assignments = parse_lines(&text)?;
    for (key, value) in overrides {
        assignments.push(Assignment {
            line: None,
            key: key.clone(),
            value: value.clone(),
        });
    }
    build_config(assignments)
}

/// Parse config text directly (used by tests and the FFI layer).
pub fn parse_config_text(text: &str) -> Result<ExperimentConfig> {
    build_config(parse_lines(text)?)
}

fn build_config(assignments: Vec<Assignment>) -> Result<ExperimentConfig> {
    // Defaults per module design decisions; epsilon-relative knobs resolve
    // after all assignments are known.
    let mut data = DataConfig {
        source: DataSource::Synth,
        path: None,
        classes: 3,
        per_class: 200,
        size: 32,
        seed: 7,
        split: (0.7, 0.15, 0.15),
    };
    let mut model = ModelConfig {
        arch: "smallcnn".into(),
        hidden: 64,
        seed: 1,
    };
    let mut train = TrainConfig::new(Method::Dpaat);
    let mut eval = EvalConfig {
        attacks: ["FGSM", "10-IFGSM", "20-IFGSM", "20-PGD", "50-PGD"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        epsilon: 0.3,
        step: 0.15,
        gradcam_count: 8,
    };
    let mut out_dir = PathBuf::from("out");

    let mut eps_min_set = false;
    let mut gamma_cap_set = false;
    let mut delta_eps_set = false;
    let mut random_start_set = false;

    for a in &assignments {
        let err = |message: String| Error::Config {
            line: a.line,
            message,
        };
        let v = a.value.as_str();
        let parse_real = |what: &str| -> Result<Real> {
            v.parse::<f64>()
                .map(|x| x as Real)
                .map_err(|_| err(format!("{what}: expected a number, got '{v}'")))
        };
        let parse_usize = |what: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| err(format!("{what}: expected an integer, got '{v}'")))
        };
        let parse_u64 = |what: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| err(format!("{what}: expected an integer, got '{v}'")))
        };
        let parse_bool = |what: &str| -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(err(format!("{what}: expected true/false, got '{v}'"))),
            }
        };
        match a.key.as_str() {
            "data.source" => {
                data.source = match v {
                    "synth" => DataSource::Synth,
                    "folder" => DataSource::Folder,
                    _ => return Err(err(format!("data.source must be synth|folder, got '{v}'"))),
                }
            }
            "data.path" => data.path = Some(PathBuf::from(v)),
            "data.classes" => data.classes = parse_usize("data.classes")?,
            "data.per_class" => data.per_class = parse_usize("data.per_class")?,
            "data.size" => data.size = parse_usize("data.size")?,
            "data.seed" => data.seed = parse_u64("data.seed")?,
            "data.split" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(err(format!("data.split needs three fractions, got '{v}'")));
                }
                let f: Vec<Real> = parts
                    .iter()
                    .map(|p| p.parse::<f64>().map(|x| x as Real))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("data.split: bad fraction in '{v}'")))?;
                data.split = (f[0], f[1], f[2]);
            }
            "model.arch" => model.arch = v.to_string(),
            "model.hidden" => model.hidden = parse_usize("model.hidden")?,
            "model.seed" => model.seed = parse_u64("model.seed")?,
            "train.method" => train.method = Method::parse(v).map_err(|e| err(e.to_string()))?,
            "train.alpha" => train.alpha = parse_real("train.alpha")?,
            "train.beta" => train.beta = parse_real("train.beta")?,
            "train.xi" => {
                train.xi = if v == "auto" {
                    None
                } else {
                    Some(parse_real("train.xi")?)
                }
            }
            "train.delta_eps" => {
                train.delta_eps = parse_real("train.delta_eps")?;
                delta_eps_set = true;
            }
            "train.sync_variant" => {
                train.sync_variant = match v {
                    "jsd" => SyncVariant::Jsd,
                    "paper_literal" => SyncVariant::PaperLiteral,
                    _ => {
                        return Err(err(format!(
                            "train.sync_variant must be jsd|paper_literal, got '{v}'"
                        )))
                    }
                }
            }
            "train.lr" => train.lr = parse_real("train.lr")?,
            "train.batch_size" => train.batch_size = parse_usize("train.batch_size")?,
            "train.epochs" => train.epochs = parse_usize("train.epochs")?,
            "train.warmup_epochs" => train.warmup_epochs = parse_usize("train.warmup_epochs")?,
            "train.patience" => train.patience = parse_usize("train.patience")?,
            "train.seed" => train.seed = parse_u64("train.seed")?,
            "train.eps_min" => {
                train.eps_min = parse_real("train.eps_min")?;
                eps_min_set = true;
            }
            "train.gamma_cap" => {
                train.gamma_cap = parse_real("train.gamma_cap")?;
                gamma_cap_set = true;
            }
            "train.regenerate" => {
                train.regenerate = match v {
                    "rescale" => Regenerate::Rescale,
                    "reattack" => Regenerate::Reattack,
                    _ => {
                        return Err(err(format!(
                            "train.regenerate must be rescale|reattack, got '{v}'"
                        )))
                    }
                }
            }
            "train.attack.method" => {
                train.attack.method = match v.to_ascii_lowercase().as_str() {
                    "fgsm" => AttackMethod::Fgsm,
                    "ifgsm" => AttackMethod::Ifgsm,
                    "pgd" => AttackMethod::Pgd,
                    _ => {
                        return Err(err(format!(
                            "train.attack.method must be fgsm|ifgsm|pgd, got '{v}'"
                        )))
                    }
                }
            }
            "train.attack.p" => {
                train.attack.norm = match v {
                    "2" => Norm::L2,
                    "inf" => Norm::Linf,
                    _ => return Err(err(format!("train.attack.p must be 2|inf, got '{v}'"))),
                }
            }
            "train.attack.epsilon" => train.attack.epsilon = parse_real("train.attack.epsilon")?,
            "train.attack.step" => train.attack.step = parse_real("train.attack.step")?,
            "train.attack.steps" => train.attack.steps = parse_usize("train.attack.steps")?,
            "train.attack.random_start" => {
                train.attack.random_start = parse_bool("train.attack.random_start")?;
                random_start_set = true;
            }
            "train.attack.clamp" => {
                train.attack.clamp = if v == "none" {
                    None
                } else {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 2 {
                        return Err(err(format!(
                            "train.attack.clamp must be none or lo,hi, got '{v}'"
                        )));
                    }
                    let lo = parts[0]
                        .parse::<f64>()
                        .map_err(|_| err("train.attack.clamp: bad bound".into()))?;
                    let hi = parts[1]
                        .parse::<f64>()
                        .map_err(|_| err("train.attack.clamp: bad bound".into()))?;
                    Some((lo as Real, hi as Real))
                }
            }
            "train.attack.direction" => {
                train.attack.direction = match v {
                    "sign" => StepDirection::Sign,
                    "normalized" => StepDirection::NormalizedGradient,
                    _ => {
                        return Err(err(format!(
                            "train.attack.direction must be sign|normalized, got '{v}'"
                        )))
                    }
                }
            }
            "eval.attacks" => {
                eval.attacks = v.split(',').map(|s| s.trim().to_string()).collect();
            }
            "eval.epsilon" => eval.epsilon = parse_real("eval.epsilon")?,
            "eval.step" => eval.step = parse_real("eval.step")?,
            "eval.gradcam_count" => eval.gradcam_count = parse_usize("eval.gradcam_count")?,
            "output.dir" => out_dir = PathBuf::from(v),
            other => {
                return Err(err(format!("unknown key '{other}'")));
            }
        }
    }

    // Epsilon-relative defaults follow the final budget unless set explicitly.
    let eps = train.attack.epsilon;
    if !eps_min_set {
        train.eps_min = 0.05 * eps;
    }
    if !gamma_cap_set {
        train.gamma_cap = 2.0 * eps;
    }
    if !delta_eps_set {
        train.delta_eps = 0.1 * eps;
    }
    if !random_start_set {
        train.attack.random_start = train.attack.method == AttackMethod::Pgd;
    }
    if train.attack.method == AttackMethod::Fgsm {
        train.attack.steps = 1;
        train.attack.random_start = false;
        train.attack.step = train.attack.epsilon.max(Real::MIN_POSITIVE);
    }

    let cfg = ExperimentConfig {
        data,
        model,
        train,
        eval,
        out_dir,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let cerr = |message: String| Error::Config {
        line: None,
        message,
    };
    if cfg.data.classes < 2 {
        return Err(cerr(format!(
            "data.classes must be at least 2, got {}",
            cfg.data.classes
        )));
    }
    if cfg.data.size < 4 || !cfg.data.size.is_multiple_of(4) {
        return Err(cerr(format!(
            "data.size must be a positive multiple of 4 (two pool layers), got {}",
            cfg.data.size
        )));
    }
    if cfg.data.source == DataSource::Folder && cfg.data.path.is_none() {
        return Err(cerr("data.source = folder requires data.path".into()));
    }
    let (a, b, c) = cfg.data.split;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || a + b + c > 1.0 + 1e-9 {
        return Err(cerr(format!("bad data.split fractions ({a}, {b}, {c})")));
    }
    if cfg.eval.attacks.is_empty() {
        return Err(cerr("eval.attacks must name at least one attack".into()));
    }
    cfg.arch_spec()?;
    cfg.eval_attacks()?;
    cfg.train
        .validate()
        .map_err(|e| cerr(format!("train section: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = parse_config_text("").unwrap();
        assert_eq!(cfg.train.lr, 0.0003);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.train.patience, 5);
        assert_eq!(cfg.train.attack.steps, 7);
        assert_eq!(cfg.train.attack.epsilon, 0.3);
        assert_eq!(cfg.train.attack.step, 0.15);
        assert_eq!(cfg.train.attack.norm, Norm::L2);
        assert_eq!(
            cfg.eval.attacks,
            vec!["FGSM", "10-IFGSM", "20-IFGSM", "20-PGD", "50-PGD"]
        );
    }

    #[test]
    fn assignments_and_comments() {
        let cfg = parse_config_text(
            "# protocol tweak\ntrain.alpha = 0.25\ntrain.method = sat # inline comment\n",
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.25);
        assert_eq!(cfg.train.method, Method::Sat);
    }

    #[test]
    fn alpha_range_error() {
        let err = parse_config_text("train.alpha = 1.5").unwrap_err();
        assert!(err.to_string().contains("alpha"), "got: {err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = parse_config_text("train.alpha = 0.5\ntrain.bogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "got: {msg}");
        assert!(msg.contains("bogus"), "got: {msg}");
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_config_text("just words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn epsilon_relative_defaults_track_budget() {
        let cfg = parse_config_text("train.attack.epsilon = 0.6").unwrap();
        assert!((cfg.train.eps_min - 0.03).abs() < 1e-12);
        assert!((cfg.train.gamma_cap - 1.2).abs() < 1e-12);
        assert!((cfg.train.delta_eps - 0.06).abs() < 1e-12);
        // explicit values win
        let cfg = parse_config_text("train.attack.epsilon = 0.6\ntrain.eps_min = 0.2").unwrap();
        assert!((cfg.train.eps_min - 0.2).abs() < 1e-12);
    }

    #[test]
    fn eval_attack_list_parses() {
        let cfg = parse_config_text("eval.attacks = FGSM, 3-PGD").unwrap();
        let specs = cfg.eval_attacks().unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].1.steps, 3);
        assert_eq!(specs[1].1.norm, Norm::L2);
        assert_eq!(specs[0].1.clamp, Some((0.0, 1.0)));
    }

    #[test]
    fn folder_source_requires_path() {
        assert!(parse_config_text("data.source = folder").is_err());
        assert!(parse_config_text("data.source = folder\ndata.path = /tmp/x").is_ok());
    }
}
