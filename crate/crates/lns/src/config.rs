//! Experiment configuration: `key = value` lines with dotted section prefixes.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, type mismatches,
//! and constraint violations are rejected with the key and line number. An
//! empty file yields the full default configuration.

use crate::binarize::ScaleMode;
use crate::data::AugmentSpec;
use crate::error::{LnsError, Result};
use crate::noisy_loss::{NoiseRates, Reduction};
use crate::train::TrainConfig;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model_spec: String,
    pub classes: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// crop = 0 means "native image size".
    pub aug: AugmentSpec,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model_spec: "cnn4".into(),
            classes: 10,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            mean: vec![0.5],
            std: vec![0.5],
            aug: AugmentSpec { pad: 0, crop: 0, hflip_prob: 0.0 },
            train: TrainConfig::default(),
            out_dir: PathBuf::from("lns-out"),
        }
    }
}

impl ExperimentConfig {
    /// Resolved snapshot written as `config.echo`; parsing it back yields the
    /// same configuration.
    pub fn echo(&self) -> String {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let list = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let milestones = self
            .train
            .lr_milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "aug.crop = {}\naug.hflip_prob = {}\naug.pad = {}\n\
             data.mean = {}\ndata.std = {}\n\
             data.test_images = {}\ndata.test_labels = {}\n\
             data.train_images = {}\ndata.train_labels = {}\n\
             lns.alpha = {}\nlns.flip_vs_pretrain = {}\nlns.frozen_labels = {}\n\
             lns.reduction = {}\nlns.rho_neg = {}\nlns.rho_pos = {}\n\
             model.classes = {}\nmodel.spec = {}\nout.dir = {}\n\
             train.batch_size = {}\ntrain.epochs = {}\ntrain.lr = {}\n\
             train.lr_decay = {}\ntrain.lr_milestones = {}\ntrain.momentum = {}\n\
             train.scale_mode = {}\ntrain.seed = {}\ntrain.warm_start_epochs = {}\n\
             train.weight_decay = {}\n",
            self.aug.crop,
            self.aug.hflip_prob,
            self.aug.pad,
            list(&self.mean),
            list(&self.std),
            path_str(&self.test_images),
            path_str(&self.test_labels),
            path_str(&self.train_images),
            path_str(&self.train_labels),
            self.train.alpha,
            self.train.flip_vs_pretrain,
            self.train.frozen_labels,
            match self.train.reduction {
                Reduction::Mean => "mean",
                Reduction::Sum => "sum",
            },
            self.train.rates.rho_neg,
            self.train.rates.rho_pos,
            self.classes,
            self.model_spec,
            self.out_dir.display(),
            self.train.batch_size,
            self.train.epochs,
            self.train.lr,
            self.train.lr_decay,
            milestones,
            self.train.momentum,
            match self.train.scale_mode {
                ScaleMode::None => "none",
                ScaleMode::LayerWise => "layer_wise",
            },
            self.train.seed,
            self.train.warm_start_epochs,
            self.train.weight_decay,
        )
    }
}

fn cfg_err(path: &str, line: usize, key: &str, msg: impl Into<String>) -> LnsError {
    LnsError::Config { path: path.into(), line, key: key.into(), msg: msg.into() }
}

/// Parse config text. `path` only labels error messages.
pub fn parse_config_str(text: &str, path: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    // line where each key was last set, for cross-key constraint reports
    let mut set_lines: HashMap<&'static str, usize> = HashMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            cfg_err(path, line_no, line, "expected `key = value`")
        })?;
        let key = key.trim();
        let value = value.trim();

        macro_rules! parse_as {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| {
                    cfg_err(path, line_no, key, format!("cannot parse `{value}`: {e}"))
                })
            };
        }
        let parse_f32_list = || -> Result<Vec<f32>> {
            value
                .split(',')
                .map(|s| {
                    s.trim().parse::<f32>().map_err(|e| {
                        cfg_err(path, line_no, key, format!("cannot parse `{s}`: {e}"))
                    })
                })
                .collect()
        };

        match key {
            "model.spec" => cfg.model_spec = value.to_string(),
            "model.classes" => cfg.classes = parse_as!(usize)?,
            // empty value means "unset" so config.echo parses back
            "data.train_images" => {
                cfg.train_images = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "data.train_labels" => {
                cfg.train_labels = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "data.test_images" => {
                cfg.test_images = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "data.test_labels" => {
                cfg.test_labels = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "data.mean" => cfg.mean = parse_f32_list()?,
            "data.std" => cfg.std = parse_f32_list()?,
            "aug.pad" => cfg.aug.pad = parse_as!(usize)?,
            "aug.crop" => cfg.aug.crop = parse_as!(usize)?,
            "aug.hflip_prob" => cfg.aug.hflip_prob = parse_as!(f32)?,
            "train.lr" => cfg.train.lr = parse_as!(f32)?,
            "train.momentum" => cfg.train.momentum = parse_as!(f32)?,
            "train.weight_decay" => cfg.train.weight_decay = parse_as!(f32)?,
            "train.batch_size" => cfg.train.batch_size = parse_as!(usize)?,
            "train.epochs" => cfg.train.epochs = parse_as!(usize)?,
            "train.lr_decay" => cfg.train.lr_decay = parse_as!(f32)?,
            "train.warm_start_epochs" => cfg.train.warm_start_epochs = parse_as!(usize)?,
            "train.seed" => cfg.train.seed = parse_as!(u64)?,
            "train.lr_milestones" => {
                cfg.train.lr_milestones = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| {
                            s.trim().parse::<usize>().map_err(|e| {
                                cfg_err(path, line_no, key, format!("cannot parse `{s}`: {e}"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                };
            }
            "train.scale_mode" => {
                cfg.train.scale_mode = match value {
                    "none" => ScaleMode::None,
                    "layer_wise" => ScaleMode::LayerWise,
                    other => {
                        return Err(cfg_err(
                            path,
                            line_no,
                            key,
                            format!("unknown scale mode `{other}` (none|layer_wise)"),
                        ))
                    }
                };
            }
            "lns.alpha" => cfg.train.alpha = parse_as!(f32)?,
            "lns.rho_pos" => cfg.train.rates.rho_pos = parse_as!(f64)?,
            "lns.rho_neg" => cfg.train.rates.rho_neg = parse_as!(f64)?,
            "lns.reduction" => {
                cfg.train.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    other => {
                        return Err(cfg_err(
                            path,
                            line_no,
                            key,
                            format!("unknown reduction `{other}` (mean|sum)"),
                        ))
                    }
                };
            }
            "lns.frozen_labels" => cfg.train.frozen_labels = parse_as!(bool)?,
            "lns.flip_vs_pretrain" => cfg.train.flip_vs_pretrain = parse_as!(bool)?,
            "out.dir" => cfg.out_dir = PathBuf::from(value),
            other => {
                return Err(cfg_err(path, line_no, other, "unknown key"));
            }
        }
        for known in [
            "train.lr",
            "lns.alpha",
            "lns.rho_pos",
            "lns.rho_neg",
            "train.momentum",
            "train.lr_decay",
            "train.lr_milestones",
            "train.weight_decay",
            "train.batch_size",
            "aug.hflip_prob",
            "model.classes",
            "data.mean",
            "data.std",
        ] {
            if key == known {
                set_lines.insert(known, line_no);
            }
        }
    }

    validate(&cfg, path, &set_lines)?;
    Ok(cfg)
}

fn validate(
    cfg: &ExperimentConfig,
    path: &str,
    lines: &HashMap<&'static str, usize>,
) -> Result<()> {
    let at = |key: &'static str| lines.get(key).copied().unwrap_or(0);
    let t = &cfg.train;
    if !(t.alpha >= 0.0) {
        return Err(cfg_err(path, at("lns.alpha"), "lns.alpha", format!("must be >= 0, got {}", t.alpha)));
    }
    if !(t.rates.rho_pos >= 0.0) {
        return Err(cfg_err(path, at("lns.rho_pos"), "lns.rho_pos", "must be >= 0"));
    }
    if !(t.rates.rho_neg >= 0.0) {
        return Err(cfg_err(path, at("lns.rho_neg"), "lns.rho_neg", "must be >= 0"));
    }
    if t.rates.rho_pos + t.rates.rho_neg >= 1.0 {
        let line = at("lns.rho_pos").max(at("lns.rho_neg"));
        return Err(cfg_err(
            path,
            line,
            "lns.rho_pos/lns.rho_neg",
            format!("rho_pos + rho_neg must be < 1, got {}", t.rates.rho_pos + t.rates.rho_neg),
        ));
    }
    if !(t.lr > 0.0 && t.lr.is_finite()) {
        return Err(cfg_err(path, at("train.lr"), "train.lr", format!("must be > 0, got {}", t.lr)));
    }
    if !(0.0..1.0).contains(&t.momentum) {
        return Err(cfg_err(path, at("train.momentum"), "train.momentum", "must be in [0,1)"));
    }
    if t.weight_decay < 0.0 {
        return Err(cfg_err(path, at("train.weight_decay"), "train.weight_decay", "must be >= 0"));
    }
    if t.batch_size == 0 {
        return Err(cfg_err(path, at("train.batch_size"), "train.batch_size", "must be >= 1"));
    }
    if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
        return Err(cfg_err(path, at("train.lr_decay"), "train.lr_decay", "must be in (0,1]"));
    }
    if t.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
        return Err(cfg_err(
            path,
            at("train.lr_milestones"),
            "train.lr_milestones",
            "must be strictly increasing",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.aug.hflip_prob) {
        return Err(cfg_err(path, at("aug.hflip_prob"), "aug.hflip_prob", "must be in [0,1]"));
    }
    if cfg.classes < 2 {
        return Err(cfg_err(path, at("model.classes"), "model.classes", "must be >= 2"));
    }
    if cfg.mean.is_empty() || cfg.std.is_empty() || cfg.mean.len() != cfg.std.len() {
        return Err(cfg_err(path, at("data.mean"), "data.mean/data.std", "must be same-length nonempty lists"));
    }
    if cfg.std.iter().any(|&s| s <= 0.0) {
        return Err(cfg_err(path, at("data.std"), "data.std", "entries must be > 0"));
    }
    // referenced data paths must resolve now
    for (key, p) in [
        ("data.train_images", &cfg.train_images),
        ("data.train_labels", &cfg.train_labels),
        ("data.test_images", &cfg.test_images),
        ("data.test_labels", &cfg.test_labels),
    ] {
        if let Some(p) = p {
            if !p.exists() {
                return Err(cfg_err(path, 0, key, format!("path `{}` does not exist", p.display())));
            }
        }
    }
    Ok(())
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LnsError::io(path.display().to_string(), e))?;
    parse_config_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_paper_defaults() {
        let cfg = parse_config_str("", "test").unwrap();
        assert_eq!(cfg.train.alpha, 1.0);
        assert_eq!(cfg.train.rates.rho_pos, 0.005);
        assert_eq!(cfg.train.rates.rho_neg, 0.005);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.model_spec, "cnn4");
    }

    #[test]
    fn rho_sum_rejected_with_key_and_line() {
        let e = parse_config_str("lns.rho_pos = 0.6\nlns.rho_neg = 0.5\n", "cfg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("rho"), "{msg}");
        assert!(msg.contains("cfg:2"), "{msg}");
    }

    #[test]
    fn negative_lr_and_alpha_rejected() {
        let e = parse_config_str("train.lr = -1\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
        let e = parse_config_str("lns.alpha = -0.1\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("lns.alpha"), "{e}");
        let e = parse_config_str("train.lr = 0\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
    }

    #[test]
    fn unknown_key_and_type_mismatch_name_the_line() {
        let e = parse_config_str("# comment\nwhatever.key = 3\n", "cfg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("whatever.key") && msg.contains("cfg:2"), "{msg}");

        let e = parse_config_str("train.epochs = banana\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("train.epochs"), "{e}");
    }

    #[test]
    fn milestones_and_lists_parse() {
        let cfg = parse_config_str(
            "train.lr_milestones = 30, 60, 90\ndata.mean = 0.4\ndata.std = 0.25\n",
            "cfg",
        )
        .unwrap();
        assert_eq!(cfg.train.lr_milestones, vec![30, 60, 90]);
        assert_eq!(cfg.mean, vec![0.4]);
        let e = parse_config_str("train.lr_milestones = 30, 30\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("lr_milestones"), "{e}");
    }

    #[test]
    fn echo_roundtrips() {
        let text = "lns.alpha = 0.5\ntrain.lr = 0.01\ntrain.lr_milestones = 3,6\naug.crop = 17\n";
        let cfg = parse_config_str(text, "cfg").unwrap();
        let echoed = cfg.echo();
        let back = parse_config_str(&echoed, "echo").unwrap();
        assert_eq!(back.train.alpha, cfg.train.alpha);
        assert_eq!(back.train.lr, cfg.train.lr);
        assert_eq!(back.train.lr_milestones, cfg.train.lr_milestones);
        assert_eq!(back.aug.crop, cfg.aug.crop);
    }

    #[test]
    fn missing_data_path_is_rejected() {
        let e = parse_config_str("data.train_images = /does/not/exist.idx\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("does not exist"), "{e}");
    }
}
