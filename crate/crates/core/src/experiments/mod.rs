//! Experiment drivers behind the CLI commands.
//!
//! Each submodule owns one command: it assembles the pieces from the library
//! modules, runs them with a fixed seed, writes its artifacts (CSV, SVG,
//! reports) through [`crate::report::RunWriter`], and returns a summary the
//! caller can inspect or test against. Nothing here is needed to use the
//! library programmatically.

pub mod gaussian;
pub mod shape;
pub mod so2;
pub mod traincmd;
pub mod verify;

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::report::{fmt_f64, write_csv};
use crate::samplers::Trajectory;

/// Column headers of samples.csv for a given spatial dimension.
pub(crate) fn sample_headers(dim: usize) -> Vec<&'static str> {
    let mut h = vec!["sample_index", "point_index", "x", "y"];
    if dim == 3 {
        h.push("z");
    }
    h
}

/// Write final states, one row per point, to `samples.csv` layout.
pub(crate) fn write_samples_csv(
    path: &std::path::Path,
    samples: &[PointCloud],
) -> Result<()> {
    let dim = samples.first().map_or(2, |s| s.dim());
    let mut rows = Vec::new();
    for (i, cloud) in samples.iter().enumerate() {
        for (j, p) in cloud.coords().chunks_exact(dim).enumerate() {
            let mut row = vec![i.to_string(), j.to_string()];
            row.extend(p.iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
    }
    write_csv(path, &sample_headers(dim), rows)
}

/// Column headers of trajectory.csv for a given spatial dimension.
pub(crate) fn trajectory_headers(dim: usize) -> Vec<&'static str> {
    let mut h = vec!["trajectory_index", "step", "t", "point_index", "x", "y"];
    if dim == 3 {
        h.push("z");
    }
    h.extend_from_slice(&["step_norm", "vertical_norm", "ang_mom_norm", "frame_rot_angle"]);
    h
}

/// Write full trajectories, one row per (step, point). Step 0 carries the
/// initial state with zeroed diagnostics; step i > 0 carries the diagnostics
/// of the move from state i-1 to state i.
pub(crate) fn write_trajectories_csv(
    path: &std::path::Path,
    trajectories: &[&Trajectory],
) -> Result<()> {
    let dim = trajectories
        .first()
        .and_then(|t| t.states.first())
        .map_or(2, |s| s.dim());
    let mut rows = Vec::new();
    for (ti, traj) in trajectories.iter().enumerate() {
        for (si, state) in traj.states.iter().enumerate() {
            let diag = si.checked_sub(1).map(|k| &traj.steps[k]);
            for (pi, p) in state.coords().chunks_exact(dim).enumerate() {
                let mut row = vec![ti.to_string(), si.to_string(), fmt_f64(traj.times[si]), pi.to_string()];
                row.extend(p.iter().map(|v| fmt_f64(*v)));
                match diag {
                    None => row.extend(std::iter::repeat_n("0".to_string(), 4)),
                    Some(d) => row.extend(
                        [d.step_norm, d.vertical_norm, d.ang_mom_norm, d.frame_rot_angle]
                            .iter()
                            .map(|v| fmt_f64(*v)),
                    ),
                }
                rows.push(row);
            }
        }
    }
    write_csv(path, &trajectory_headers(dim), rows)
}
