//! Command implementations behind the CLI surface.

use crate::config::{render, DatasetKind, ResolvedConfig};
use crate::CliError;
use sepdrop_core::blocks::VariantKind;
use sepdrop_core::checkpoint;
use sepdrop_core::data::{
    load_cifar_binary, normalize, synthesize_dataset_with, LabeledImageSet, Split,
};
use sepdrop_core::gradcheck;
use sepdrop_core::model::{parameter_count, Network, NetworkSpec};
use sepdrop_core::parallel::ReplicaGroup;
use sepdrop_core::rng::{mix_seed, seeded_rng, SALT_INIT};
use sepdrop_core::schedule::{blocks_per_stage, build_channel_schedule, build_survival_schedule};
use sepdrop_core::train::{evaluate, train_epoch, MetricsWriter, TrainData, TrainState};
use sepdrop_core::{Error, Tensor};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Prints without panicking when the reader closes the pipe early.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
    let _ = std::io::stdout().flush();
}

fn concat_sets(mut parts: Vec<LabeledImageSet>) -> Result<LabeledImageSet, Error> {
    let first = parts.remove(0);
    let shape = first.images.shape();
    let mut data = first.images.data().to_vec();
    let mut labels = first.labels;
    let mut count = shape.n;
    for part in parts {
        data.extend_from_slice(part.images.data());
        labels.extend(part.labels);
        count += part.images.shape().n;
    }
    Ok(LabeledImageSet {
        images: Tensor::from_vec(
            sepdrop_core::Shape::new(count, shape.c, shape.h, shape.w),
            data,
        )?,
        labels,
        num_classes: first.num_classes,
        split: first.split,
        coarse_labels: None,
    })
}

/// Loads (train split, test split) for the configured dataset, both in raw
/// [0, 1] pixel space.
fn load_splits(cfg: &ResolvedConfig) -> Result<(LabeledImageSet, LabeledImageSet), Error> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let train = synthesize_dataset_with(
                cfg.train.net.num_classes,
                cfg.train_count,
                32,
                cfg.train.seed,
                cfg.signal as f32,
                cfg.noise as f32,
                Split::Train,
            )?;
            let test = sepdrop_core::data::synthesize_test_split(
                cfg.train.net.num_classes,
                cfg.test_count,
                32,
                cfg.train.seed,
                cfg.signal as f32,
                cfg.noise as f32,
            )?;
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let dir = cfg.data_dir.as_ref().expect("validated");
            let train_parts = (1..=5)
                .map(|i| load_cifar_binary(&dir.join(format!("data_batch_{i}.bin")), 10, Split::Train))
                .collect::<Result<Vec<_>, _>>()?;
            let train = concat_sets(train_parts)?;
            let test = load_cifar_binary(&dir.join("test_batch.bin"), 10, Split::Test)?;
            Ok((train, test))
        }
        DatasetKind::Cifar100 => {
            let dir = cfg.data_dir.as_ref().expect("validated");
            let train = load_cifar_binary(&dir.join("train.bin"), 100, Split::Train)?;
            let test = load_cifar_binary(&dir.join("test.bin"), 100, Split::Test)?;
            Ok((train, test))
        }
    }
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch-{epoch:05}.ckpt"))
}

fn state_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".state.json");
    ckpt.with_file_name(name)
}

pub fn run_train(cfg: &ResolvedConfig, resume: Option<&Path>) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(cfg.out_dir.join("config.txt"), render(cfg))
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let (train_raw, test_raw) = load_splits(cfg).map_err(CliError::runtime)?;
    let data = TrainData::new(train_raw).map_err(CliError::runtime)?;
    std::fs::write(cfg.out_dir.join("normalization.txt"), data.preprocess.manifest())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let test_norm = normalize(&test_raw, &data.preprocess);

    // Fresh build, or checkpoint + optimizer sidecar.
    let (net, start_epoch, loaded_state) = match resume {
        None => {
            let mut rng = seeded_rng(mix_seed(cfg.train.seed, SALT_INIT));
            let net = Network::build(cfg.train.net, &mut rng).map_err(CliError::runtime)?;
            (net, 0, None)
        }
        Some(ckpt) => {
            let net = checkpoint::load(ckpt).map_err(CliError::runtime)?;
            if net.spec != cfg.train.net {
                return Err(CliError::Usage(format!(
                    "checkpoint spec {:?} does not match configured spec {:?}",
                    net.spec, cfg.train.net
                )));
            }
            let (next_epoch, state) =
                checkpoint::load_train_state(&state_path(ckpt)).map_err(CliError::runtime)?;
            (net, next_epoch, Some(state))
        }
    };

    let mut group = ReplicaGroup::new(net, cfg.train.model_count, cfg.train.batch_size)
        .map_err(CliError::usage)?;
    let mut state = TrainState::new(&group, &cfg.train);
    if let Some(loaded) = loaded_state {
        for s in &mut state.states {
            *s = loaded.clone();
        }
    }

    let with_models = cfg.train.model_count > 1;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut writer = if start_epoch > 0 && metrics_path.exists() {
        MetricsWriter::append(&metrics_path, with_models).map_err(CliError::runtime)?
    } else {
        MetricsWriter::create(&metrics_path, with_models).map_err(CliError::runtime)?
    };

    let save_checkpoint = |group: &ReplicaGroup,
                           state: &TrainState,
                           next_epoch: usize,
                           path: &Path|
     -> Result<(), CliError> {
        let eval_net = group.evaluation_network();
        checkpoint::save(&eval_net, path).map_err(CliError::runtime)?;
        checkpoint::save_train_state(&state_path(path), next_epoch, &state.states[0])
            .map_err(CliError::runtime)
    };

    for epoch in start_epoch..cfg.train.total_epochs {
        let mut metrics =
            train_epoch(&mut group, &mut state, &data, &cfg.train, epoch).map_err(CliError::runtime)?;
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let mut eval_net = group.evaluation_network();
            metrics.test_err = Some(
                evaluate(&mut eval_net, &test_norm.images, &test_norm.labels)
                    .map_err(CliError::runtime)?,
            );
        }
        writer.write(&metrics).map_err(CliError::runtime)?;
        emit(&format!(
            "epoch {} lr {} loss {:.4} train_err {:.4}{}\n",
            metrics.epoch,
            metrics.lr,
            metrics.train_loss,
            metrics.train_err,
            metrics
                .test_err
                .map(|e| format!(" test_err {e:.4}"))
                .unwrap_or_default()
        ));
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&group, &state, epoch + 1, &checkpoint_path(&cfg.out_dir, epoch + 1))?;
        }
    }
    save_checkpoint(&group, &state, cfg.train.total_epochs, &cfg.out_dir.join("final.ckpt"))?;
    Ok(())
}

pub fn run_eval(cfg: &ResolvedConfig, ckpt: &Path) -> Result<(), CliError> {
    let mut net = checkpoint::load(ckpt).map_err(CliError::runtime)?;
    let (train_raw, test_raw) = load_splits(cfg).map_err(CliError::runtime)?;
    let data = TrainData::new(train_raw).map_err(CliError::runtime)?;
    let test_norm = normalize(&test_raw, &data.preprocess);
    let err = evaluate(&mut net, &test_norm.images, &test_norm.labels).map_err(CliError::runtime)?;
    emit(&format!("test_err {err:.6}\n"));
    Ok(())
}

/// Schedule report: human summary plus a per-block table, or pure CSV.
pub fn run_inspect(spec: &NetworkSpec, csv: bool) -> Result<(), CliError> {
    spec.validate().map_err(CliError::usage)?;
    let channels =
        build_channel_schedule(spec.depth, spec.alpha, spec.base_width).map_err(CliError::usage)?;
    let survival =
        build_survival_schedule(channels.block_count(), spec.p_last).map_err(CliError::usage)?;
    let per_stage = blocks_per_stage(spec.depth).map_err(CliError::usage)?;
    let params = parameter_count(spec).map_err(CliError::usage)?;

    let mut out = String::new();
    use std::fmt::Write as _;
    if csv {
        let _ = writeln!(out, "key,value");
        let _ = writeln!(out, "variant,{}", spec.variant);
        let _ = writeln!(out, "depth,{}", spec.depth);
        let _ = writeln!(out, "alpha,{}", spec.alpha);
        let _ = writeln!(out, "p_last,{}", spec.p_last);
        let _ = writeln!(out, "num_classes,{}", spec.num_classes);
        let _ = writeln!(out, "blocks,{}", channels.block_count());
        let _ = writeln!(out, "base_width,{}", spec.base_width);
        let _ = writeln!(out, "final_width,{}", channels.final_width());
        let _ = writeln!(out, "parameters,{params}");
        let _ = writeln!(out);
        let _ = writeln!(out, "block,stage,c_in,c_out,stride,survival_p");
    } else {
        let _ = writeln!(out, "variant      {}", spec.variant);
        let _ = writeln!(out, "depth        {}", spec.depth);
        let _ = writeln!(out, "alpha        {}", spec.alpha);
        let _ = writeln!(out, "p_last       {}", spec.p_last);
        let _ = writeln!(out, "num_classes  {}", spec.num_classes);
        let _ = writeln!(out, "blocks       {}", channels.block_count());
        let _ = writeln!(out, "base_width   {}", spec.base_width);
        let _ = writeln!(out, "final_width  {}", channels.final_width());
        let _ = writeln!(out, "parameters   {params}");
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>5} {:>5} {:>5} {:>5} {:>6} {:>10}", "block", "stage", "c_in", "c_out", "stride", "survival_p");
    }
    for k in 0..channels.block_count() {
        let stage = k / per_stage + 1;
        let stride = if stage > 1 && k % per_stage == 0 { 2 } else { 1 };
        let row = (
            k + 1,
            stage,
            channels.input_width(k),
            channels.block_widths[k],
            stride,
            survival.probs[k],
        );
        if csv {
            let _ = writeln!(out, "{},{},{},{},{},{:.6}", row.0, row.1, row.2, row.3, row.4, row.5);
        } else {
            let _ = writeln!(out, "{:>5} {:>5} {:>5} {:>5} {:>6} {:>10.6}", row.0, row.1, row.2, row.3, row.4, row.5);
        }
    }
    emit(&out);
    Ok(())
}

pub fn run_gradcheck(depth: usize, seed: u64, corrupt: Option<&str>) -> Result<(), CliError> {
    if depth > gradcheck::MAX_CHECK_DEPTH {
        return Err(CliError::Usage(format!(
            "depth {depth} too large for gradcheck (max {})",
            gradcheck::MAX_CHECK_DEPTH
        )));
    }
    let reports = gradcheck::run_all(depth, seed, corrupt).map_err(CliError::usage)?;
    let mut failed = Vec::new();
    let mut out = String::new();
    use std::fmt::Write as _;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{status} {:<24} max_rel_err {:.3e} tolerance {:.0e} ({} coords)",
            r.component, r.max_rel_err, r.tolerance, r.checked
        );
        if !r.passed() {
            failed.push(r.component.clone());
        }
    }
    emit(&out);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

/// Parses a variant name for clap.
pub fn parse_variant(s: &str) -> Result<VariantKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}
