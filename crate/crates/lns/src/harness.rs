//! Experiment orchestration behind the CLI subcommands.
//!
//! Output directory layout: `ckpt/`, `export/`, `metrics.csv`, `config.echo`
//! (the resolved configuration snapshot). `LNS_THREADS` caps evaluation
//! parallelism (default 1).

use crate::binarize;
use crate::checkpoint::{Checkpoint, CKPT_MAGIC, EXPORT_MAGIC};
use crate::config::{parse_config, ExperimentConfig};
use crate::data::{load_idx, AugmentSpec, Dataset};
use crate::error::{LnsError, Result};
use crate::export::InferenceModel;
use crate::metrics::{format_sig6, MetricsWriter};
use crate::model::ModelSpec;
use crate::noisy_loss::{self, NoiseRates};
use crate::tensor::Tensor;
use crate::train::{self, RunEnv, TrainOutcome};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Finetune,
    Eval,
    Export,
    Selftest,
}

#[derive(Debug, Clone, Default)]
pub struct CliOptions {
    pub config: Option<PathBuf>,
    pub from: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn eval_threads_from_env() -> usize {
    std::env::var("LNS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

fn load_config(opts: &CliOptions) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    cfg.train.eval_threads = eval_threads_from_env();
    Ok(cfg)
}

fn require_dataset(
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    cfg: &ExperimentConfig,
    split: &str,
) -> Result<Dataset> {
    let (ip, lp) = match (images, labels) {
        (Some(i), Some(l)) => (i, l),
        _ => {
            return Err(LnsError::msg(format!(
                "config is missing data.{split}_images / data.{split}_labels"
            )))
        }
    };
    load_idx(ip, lp, &cfg.mean, &cfg.std, split)
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    for sub in ["", "ckpt", "export"] {
        let p = cfg.out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| LnsError::io(p.display().to_string(), e))?;
    }
    let echo_path = cfg.out_dir.join("config.echo");
    std::fs::write(&echo_path, cfg.echo())
        .map_err(|e| LnsError::io(echo_path.display().to_string(), e))
}

fn resolved_augment(cfg: &ExperimentConfig, data: &Dataset) -> Result<Option<AugmentSpec>> {
    let (_, h, w) = data.image_dims();
    let mut aug = cfg.aug;
    if aug.crop == 0 {
        if h != w && (aug.pad > 0 || aug.hflip_prob > 0.0) {
            return Err(LnsError::msg(format!(
                "aug.crop must be set explicitly for non-square {h}x{w} images"
            )));
        }
        aug.crop = h;
    }
    if aug.is_identity() && aug.crop == h && h == w {
        return Ok(None);
    }
    aug.validate(h, w)?;
    Ok(Some(aug))
}

fn finish_run(cfg: &ExperimentConfig, outcome: TrainOutcome) -> Result<i32> {
    if outcome.diverged {
        let path = cfg.out_dir.join("ckpt").join("last-good.lns1");
        outcome.checkpoint.save(&path)?;
        eprintln!(
            "training diverged (NaN loss for 3 consecutive steps); last-good checkpoint at {}",
            path.display()
        );
        return Ok(1);
    }
    let path = cfg.out_dir.join("ckpt").join("final.lns1");
    outcome.checkpoint.save(&path)?;
    if let Some(last) = outcome.records.iter().rev().find(|r| r.split == "test") {
        println!("final test accuracy {}", format_sig6(last.accuracy));
    }
    println!("checkpoint written to {}", path.display());
    Ok(0)
}

pub fn run_command(cmd: Command, opts: &CliOptions) -> Result<i32> {
    match cmd {
        Command::Selftest => return selftest(),
        Command::Finetune if opts.from.is_none() => {
            return Err(LnsError::msg("finetune requires --from <pretrain checkpoint>"))
        }
        Command::Eval | Command::Export if opts.from.is_none() => {
            return Err(LnsError::msg("this command requires --from <model file>"))
        }
        _ => {}
    }
    let cfg = load_config(opts)?;

    match cmd {
        Command::Pretrain | Command::Finetune => {
            let train_data =
                require_dataset(&cfg.train_images, &cfg.train_labels, &cfg, "train")?;
            let test_data = require_dataset(&cfg.test_images, &cfg.test_labels, &cfg, "test")?;
            prepare_out_dir(&cfg)?;
            let aug = resolved_augment(&cfg, &train_data)?;
            let env = RunEnv { train: &train_data, test: &test_data, augment: aug };

            let metrics_path = cfg.out_dir.join("metrics.csv");
            let mut writer = MetricsWriter::new(&metrics_path, cfg.train.flip_vs_pretrain);
            let mut write_err: Option<LnsError> = None;
            let mut on_epoch = |r: &crate::metrics::MetricsRecord| {
                if write_err.is_none() {
                    if let Err(e) = writer.append(r) {
                        write_err = Some(e);
                    }
                }
            };

            let outcome = match cmd {
                Command::Pretrain => match &opts.from {
                    Some(from) => {
                        let ckpt = Checkpoint::load(from)?;
                        train::resume_baseline(ckpt, &env, &cfg.train, &mut on_epoch)?
                    }
                    None => {
                        let spec = ModelSpec::by_name(&cfg.model_spec, cfg.classes)?;
                        train::pretrain_baseline(
                            &spec,
                            &env,
                            &cfg.train,
                            cfg.echo(),
                            &mut on_epoch,
                        )?
                    }
                },
                Command::Finetune => {
                    let ckpt = Checkpoint::load(opts.from.as_ref().expect("checked"))?;
                    train::lns_finetune(ckpt, &env, &cfg.train, &mut on_epoch)?
                }
                _ => unreachable!(),
            };
            if let Some(e) = write_err {
                return Err(e);
            }
            finish_run(&cfg, outcome)
        }
        Command::Eval => {
            let test_data = require_dataset(&cfg.test_images, &cfg.test_labels, &cfg, "test")?;
            let model = load_any_model(opts.from.as_ref().expect("checked"))?;
            let (acc, ce) =
                model.evaluate(&test_data, cfg.train.batch_size, cfg.train.eval_threads)?;
            println!("accuracy {}", format_sig6(acc));
            println!("cross_entropy {}", format_sig6(ce));
            Ok(0)
        }
        Command::Export => {
            let from = opts.from.as_ref().expect("checked");
            let ckpt = Checkpoint::load(from)?;
            prepare_out_dir(&cfg)?;
            let path = cfg.out_dir.join("export").join("model.lnsb");
            train::export_binary(&ckpt, &path)?;
            println!("exported model written to {}", path.display());
            Ok(0)
        }
        Command::Selftest => unreachable!(),
    }
}

/// Load either a training checkpoint or an exported model by sniffing magic.
pub fn load_any_model(path: &Path) -> Result<InferenceModel> {
    let bytes = std::fs::read(path).map_err(|e| LnsError::io(path.display().to_string(), e))?;
    if bytes.len() >= 4 && bytes[..4] == CKPT_MAGIC {
        InferenceModel::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    } else if bytes.len() >= 4 && bytes[..4] == EXPORT_MAGIC {
        InferenceModel::from_bytes(&bytes)
    } else {
        Err(LnsError::Format {
            format: "model",
            offset: 0,
            msg: "file is neither an LNS1 checkpoint nor an LNSB export".into(),
        })
    }
}

// ---- selftest property suites ----------------------------------------------

fn check(name: &str, ok: bool, detail: String, failures: &mut usize) {
    if ok {
        println!("[ok] {name}");
    } else {
        println!("[FAIL] {name}: {detail}");
        *failures += 1;
    }
}

/// Run the unbiasedness and gradient property suites; exit 0 when all pass.
pub fn selftest() -> Result<i32> {
    let mut failures = 0usize;

    // Monte Carlo unbiasedness of the corrected loss
    let mut worst = (0.0f64, 0.0f64, String::new());
    let mut mc_ok = true;
    let n = 1_000_000usize;
    for (ri, &(rp, rn)) in [(0.05, 0.05), (0.2, 0.2), (0.2, 0.1)].iter().enumerate() {
        let rates = NoiseRates::new(rp, rn)?;
        for (qi, &q_hat) in [-0.9, 0.0, 0.5, 1.0].iter().enumerate() {
            for &q in &[1.0f64, -1.0] {
                let clean = Tensor::filled(&[n], q as f32);
                let seed = (ri * 31 + qi * 7) as u64 + if q > 0.0 { 0 } else { 1000 };
                let noisy = noisy_loss::flip_noise_simulate(&clean, rates, seed)?;
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for &l in &noisy.data {
                    let v = noisy_loss::corrected_loss(q_hat, l as f64, rates)?;
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum / n as f64;
                let var = (sumsq / n as f64 - mean * mean).max(0.0);
                let tol = (4.0 * var.sqrt() / (n as f64).sqrt()).max(1e-9);
                let want = noisy_loss::mse_label_loss(q_hat, q)?;
                if (mean - want).abs() > tol {
                    mc_ok = false;
                    worst = (mean, want, format!("q_hat={q_hat} q={q} rates=({rp},{rn})"));
                }
            }
        }
    }
    check(
        "unbiasedness: Monte Carlo mean of corrected loss matches clean MSE",
        mc_ok,
        format!("mean {} vs clean {} at {}", worst.0, worst.1, worst.2),
        &mut failures,
    );

    // analytic gradient vs central finite differences on a grid
    let mut fd_ok = true;
    let mut fd_worst = 0.0f64;
    let eps = 1e-6;
    for i in 0..100 {
        let q_hat = -1.2 + 2.4 * (i as f64 / 99.0);
        let q = if i % 2 == 0 { 1.0 } else { -1.0 };
        let rates = NoiseRates::new(0.004 * i as f64, 0.002 * i as f64)?;
        let g = noisy_loss::corrected_loss_grad(q_hat, q, rates)?;
        let fd = (noisy_loss::corrected_loss(q_hat + eps, q, rates)?
            - noisy_loss::corrected_loss(q_hat - eps, q, rates)?)
            / (2.0 * eps);
        let diff = (g - fd).abs();
        if diff > 1e-6 {
            fd_ok = false;
        }
        fd_worst = fd_worst.max(diff);
    }
    check(
        "gradient: analytic corrected-loss gradient matches finite differences",
        fd_ok,
        format!("worst abs diff {fd_worst}"),
        &mut failures,
    );

    // zero-noise reduction is bitwise
    let mut zero_ok = true;
    let z = NoiseRates::zero();
    let mut x = 0.7391f64;
    for _ in 0..1000 {
        x = (x * 1.3).sin() * 1.8;
        for q in [1.0, -1.0] {
            let a = noisy_loss::corrected_loss(x, q, z)?;
            let b = noisy_loss::mse_label_loss(x, q)?;
            let ga = noisy_loss::corrected_loss_grad(x, q, z)?;
            if a.to_bits() != b.to_bits() || ga.to_bits() != (2.0 * (x - q)).to_bits() {
                zero_ok = false;
            }
        }
    }
    check("zero-noise: corrected loss reduces to plain MSE bitwise", zero_ok, String::new(), &mut failures);

    // packed kernel equivalence on random cases
    let mut kernel_ok = true;
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for case in 0..40 {
            let c = rng.gen_range(1..=4);
            let h = rng.gen_range(3..=10);
            let w = rng.gen_range(3..=10);
            let o = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=3.min(h).min(w));
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            if (h + 2 * padding) < k
                || (h + 2 * padding - k) % stride != 0
                || (w + 2 * padding) < k
                || (w + 2 * padding - k) % stride != 0
            {
                continue;
            }
            let rand_pm1 = |dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
                let n: usize = dims.iter().product();
                let data =
                    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                Tensor::from_vec(dims, data).unwrap()
            };
            let acts = rand_pm1(&[2, c, h, w], &mut rng);
            let weights = rand_pm1(&[o, c, k, k], &mut rng);
            let packed = binarize::binary_conv2d(
                &binarize::pack(&acts)?,
                &binarize::pack(&weights)?,
                stride,
                padding,
            )?;
            let padded = crate::ops::pad_spatial(&acts, padding, -1.0)?;
            let dense = crate::ops::conv2d(&padded, &weights, stride, 0)?;
            if packed.data != dense.data {
                kernel_ok = false;
                eprintln!("kernel mismatch on case {case}");
            }
        }
    }
    check("kernels: packed popcount convolution equals dense reference", kernel_ok, String::new(), &mut failures);

    // expected corrected risk is minimized at the clean label
    let mut min_ok = true;
    for rho in [0.05, 0.2] {
        let rates = NoiseRates::symmetric(rho)?;
        for q in [1.0f64, -1.0] {
            let mut best = f64::INFINITY;
            let mut best_q = 0.0;
            for i in 0..=400 {
                let q_hat = -1.0 + i as f64 / 200.0;
                let risk = (1.0 - rho) * noisy_loss::corrected_loss(q_hat, q, rates)?
                    + rho * noisy_loss::corrected_loss(q_hat, -q, rates)?;
                if risk < best {
                    best = risk;
                    best_q = q_hat;
                }
            }
            if (best_q - q).abs() > 1e-9 {
                min_ok = false;
            }
        }
    }
    check("risk: expected corrected risk is minimized at the clean label", min_ok, String::new(), &mut failures);

    if failures == 0 {
        println!("selftest passed");
        Ok(0)
    } else {
        println!("selftest failed ({failures} suites)");
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        assert_eq!(selftest().unwrap(), 0);
    }

    #[test]
    fn finetune_without_from_is_usage_error() {
        let e = run_command(Command::Finetune, &CliOptions::default()).unwrap_err();
        assert!(e.to_string().contains("--from"), "{e}");
    }
}
