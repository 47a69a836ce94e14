//! The `train` and `sample` commands: fit a denoiser to the configured
//! target, checkpoint it, and later draw from the checkpoint with any sampler
//! settings.

use std::path::Path;

use crate::config::ConfigFile;
use crate::denoiser::MlpDenoiser;
use crate::error::{Error, Result};
use crate::objectives::{self, TrainResult};
use crate::report::{fmt_f64, write_csv, RunWriter};
use crate::samplers::sample_ensemble;

use super::{write_samples_csv, write_trajectories_csv};

/// File name of the model checkpoint inside a train run's output directory.
pub const CHECKPOINT_NAME: &str = "checkpoint.json";

/// Train per the config; write `losses.csv`, the checkpoint and a run record.
pub fn cmd_train(out_dir: &Path, seed: Option<u64>, config_text: &str) -> Result<TrainResult> {
    let cfg = ConfigFile::parse(config_text)?;
    let space = cfg.space()?;
    let layout = cfg.layout(space);
    let train_cfg = cfg.train_config(seed)?;
    let target = cfg.target(space)?;
    let mut writer = RunWriter::create(out_dir, "train", train_cfg.seed, config_text)?;

    let result = objectives::train(space, layout, &train_cfg, &|r| target.draw(r))?;

    let rows = result
        .losses
        .iter()
        .map(|(epoch, loss)| vec![epoch.to_string(), fmt_f64(*loss)]);
    write_csv(writer.path("losses.csv"), &["epoch", "mean_loss"], rows)?;
    writer.track("losses.csv")?;

    result
        .model
        .save(&writer.path(CHECKPOINT_NAME), &train_cfg.schedule)?;
    writer.track(CHECKPOINT_NAME)?;

    if let Some((_, final_loss)) = result.losses.last() {
        writer.metric_f64("final_loss", *final_loss);
    }
    writer.metric("epochs", result.losses.len());
    writer.metric("degenerate_samples_skipped", result.skipped_total);
    writer.metric("param_count", result.model.param_count());
    writer.finish()?;
    Ok(result)
}

/// Sample from a checkpoint; write `samples.csv`, `trajectory.csv` and a run
/// record. Returns the number of samples drawn.
pub fn cmd_sample(
    out_dir: &Path,
    seed: Option<u64>,
    config_text: &str,
    checkpoint: &Path,
) -> Result<usize> {
    let cfg = ConfigFile::parse(config_text)?;
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let (model, schedule) = MlpDenoiser::load(checkpoint)?;
    let space = model.space();
    if let Some(section) = &cfg.space {
        let declared = section.build()?;
        if declared != space {
            return Err(Error::Config(format!(
                "config [space] ({:?}, {} points) does not match the checkpoint ({:?}, {} points); \
                 drop the section or fix it",
                declared.kind(),
                declared.n_points(),
                space.kind(),
                space.n_points()
            )));
        }
    }
    let sampler = cfg.sampler_config(seed)?;
    let demo = cfg.demo.clone().unwrap_or_default();
    let mut writer = RunWriter::create(out_dir, "sample", sampler.seed, config_text)?;

    let trajectories = sample_ensemble(&sampler, space, &model, &schedule, demo.n_samples)?;
    let finals: Vec<_> = trajectories.iter().map(|t| t.final_state().clone()).collect();
    write_samples_csv(&writer.path("samples.csv"), &finals)?;
    writer.track("samples.csv")?;

    let highlighted: Vec<_> = trajectories.iter().take(demo.n_trajectories).collect();
    write_trajectories_csv(&writer.path("trajectory.csv"), &highlighted)?;
    writer.track("trajectory.csv")?;

    writer.metric("n_samples", finals.len());
    writer.metric("n_trajectories_written", highlighted.len());
    writer.finish()?;
    Ok(finals.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL_TRAIN: &str = r#"
[space]
kind = "planar-so2"

[model]
hidden = [8]
time_frequencies = 2
residual_output = true

[train]
loss = "quotient"
epochs = 30
batch_size = 16
lr = 0.005
seed = 5
schedule = "linear-one-sided"

[sampler]
mode = "ode"
variant = "quotient"
steps = 20

[demo]
n_samples = 6
n_trajectories = 2
"#;

    #[test]
    fn train_then_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let train_dir = dir.path().join("train");
        let result = cmd_train(&train_dir, None, SMALL_TRAIN).unwrap();
        assert_eq!(result.losses.len(), 30);
        let losses = std::fs::read_to_string(train_dir.join("losses.csv")).unwrap();
        assert!(losses.starts_with("epoch,mean_loss\n"));
        assert_eq!(losses.lines().count(), 31);

        let sample_dir = dir.path().join("sample");
        let checkpoint = train_dir.join(CHECKPOINT_NAME);
        let n = cmd_sample(&sample_dir, Some(42), SMALL_TRAIN, &checkpoint).unwrap();
        assert_eq!(n, 6);
        let samples = std::fs::read_to_string(sample_dir.join("samples.csv")).unwrap();
        assert!(samples.starts_with("sample_index,point_index,x,y\n"));
        // planar space: one point per sample
        assert_eq!(samples.lines().count(), 7);
        let traj = std::fs::read_to_string(sample_dir.join("trajectory.csv")).unwrap();
        assert!(traj.starts_with(
            "trajectory_index,step,t,point_index,x,y,step_norm,vertical_norm,ang_mom_norm,frame_rot_angle\n"
        ));
        // 2 trajectories x 21 states x 1 point + header
        assert_eq!(traj.lines().count(), 2 * 21 + 1);
    }

    #[test]
    fn sample_rejects_missing_checkpoint_and_space_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let err = cmd_sample(&dir.path().join("out"), None, SMALL_TRAIN, &missing).unwrap_err();
        assert!(format!("{err}").contains("checkpoint not found"), "{err}");

        let train_dir = dir.path().join("train");
        cmd_train(&train_dir, None, SMALL_TRAIN).unwrap();
        let mismatched = SMALL_TRAIN.replace(
            "kind = \"planar-so2\"",
            "kind = \"shape-so3\"\nn_points = 4",
        );
        let err = cmd_sample(
            &dir.path().join("out2"),
            None,
            &mismatched,
            &train_dir.join(CHECKPOINT_NAME),
        )
        .unwrap_err();
        assert!(format!("{err}").contains("does not match"), "{err}");
    }

    #[test]
    fn sample_seed_override_changes_draws() {
        let dir = tempfile::tempdir().unwrap();
        let train_dir = dir.path().join("train");
        cmd_train(&train_dir, None, SMALL_TRAIN).unwrap();
        let checkpoint = train_dir.join(CHECKPOINT_NAME);
        cmd_sample(&dir.path().join("a"), Some(1), SMALL_TRAIN, &checkpoint).unwrap();
        cmd_sample(&dir.path().join("b"), Some(1), SMALL_TRAIN, &checkpoint).unwrap();
        cmd_sample(&dir.path().join("c"), Some(2), SMALL_TRAIN, &checkpoint).unwrap();
        let a = std::fs::read_to_string(dir.path().join("a/samples.csv")).unwrap();
        let b = std::fs::read_to_string(dir.path().join("b/samples.csv")).unwrap();
        let c = std::fs::read_to_string(dir.path().join("c/samples.csv")).unwrap();
        assert_eq!(a, b, "same seed must reproduce byte-identical samples");
        assert_ne!(a, c, "different seed must change the draws");
    }
}
