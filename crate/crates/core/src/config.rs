//! Run configuration: a sectioned key-value file (TOML syntax).
//!
//! Unknown keys are hard errors so a typo cannot silently fall back to a
//! default. Every section is optional; each command checks for the sections it
//! needs and fills documented defaults for the rest.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    MlpLayout, TimeFeatures, DEFAULT_HIDDEN, DEFAULT_RADIUS_SPAN, DEFAULT_TIME_FREQUENCIES,
};
use crate::error::{Error, Result};
use crate::geometry::SymmetrySpace;
use crate::objectives::{LossVariant, TrainConfig};
use crate::samplers::{
    uniform_grid, EtaSchedule, Mode, SamplerConfig, Variant, DEFAULT_NOISE_SCALE,
    DEFAULT_STOCHASTIC_CUTOFF,
};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub space: Option<SpaceSection>,
    pub target: Option<TargetSection>,
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub sampler: Option<SamplerSection>,
    pub demo: Option<DemoSection>,
    pub gaussian: Option<GaussianSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn space(&self) -> Result<SymmetrySpace> {
        self.space.clone().unwrap_or_default().build()
    }

    pub fn layout(&self, space: SymmetrySpace) -> MlpLayout {
        self.model.clone().unwrap_or_default().build(space)
    }

    pub fn train_config(&self, seed_override: Option<u64>) -> Result<TrainConfig> {
        let section = self
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("missing [train] section".into()))?;
        section.build(seed_override)
    }

    pub fn sampler_config(&self, seed_override: Option<u64>) -> Result<SamplerConfig> {
        self.sampler
            .clone()
            .unwrap_or_default()
            .build(seed_override)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match &self.train {
            Some(t) => parse_schedule(&t.schedule, t.bridge_a),
            None => Ok(Schedule::OneSidedLinear),
        }
    }

    /// Build the target sampler for this config's space.
    pub fn target(&self, space: SymmetrySpace) -> Result<TargetDraw> {
        self.target.clone().unwrap_or_default().build(space)
    }
}

fn parse_schedule(name: &str, bridge_a: Option<f64>) -> Result<Schedule> {
    match name {
        "linear-one-sided" => Ok(Schedule::OneSidedLinear),
        "general-bridge" => Ok(Schedule::GeneralBridge {
            a: bridge_a.unwrap_or(1.0),
        }),
        other => Err(Error::Config(format!(
            "unknown schedule '{other}' (expected linear-one-sided or general-bridge)"
        ))),
    }
}

/// Target-distribution spec shared by `train` and the demos.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    /// "radial-mixture" (planar), "rotated-template" (shape), "gaussian"
    /// (either), or "auto" to pick the first two by space kind.
    pub kind: String,
    /// Mode radii of the radial mixture.
    pub radii: Vec<f64>,
    /// Radial standard deviation of each mixture mode.
    pub radial_sigma: f64,
    /// Standard deviation of the isotropic Gaussian target.
    pub sigma: f64,
    /// Seed generating the fixed template cloud.
    pub template_seed: u64,
    /// Isotropic shape-noise level around the template.
    pub template_sigma: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection {
            kind: "auto".into(),
            radii: vec![1.0, 2.5],
            radial_sigma: 0.15,
            sigma: 1.0,
            template_seed: 17,
            template_sigma: 0.05,
        }
    }
}

impl TargetSection {
    pub fn build(&self, space: SymmetrySpace) -> Result<TargetDraw> {
        let kind = match self.kind.as_str() {
            "auto" => match space.kind() {
                crate::geometry::SpaceKind::PlanarRotation => "radial-mixture",
                crate::geometry::SpaceKind::ShapeSpace => "rotated-template",
            },
            other => other,
        };
        match kind {
            "radial-mixture" => {
                if space.dim() != 2 {
                    return Err(Error::Config(
                        "target.kind radial-mixture needs the planar space".into(),
                    ));
                }
                if self.radii.is_empty() || !(self.radial_sigma > 0.0) {
                    return Err(Error::Config(
                        "radial mixture needs nonempty radii and positive radial_sigma".into(),
                    ));
                }
                Ok(TargetDraw::RadialMixture {
                    space,
                    radii: self.radii.clone(),
                    sigma: self.radial_sigma,
                })
            }
            "rotated-template" => {
                if space.dim() != 3 {
                    return Err(Error::Config(
                        "target.kind rotated-template needs a shape space".into(),
                    ));
                }
                let mut rng = ChaCha12Rng::seed_from_u64(self.template_seed);
                Ok(TargetDraw::RotatedTemplate {
                    template: crate::draws::standard_normal_cloud(space, &mut rng),
                    sigma: self.template_sigma,
                })
            }
            "gaussian" => {
                if !(self.sigma > 0.0) {
                    return Err(Error::Config("target.sigma must be positive".into()));
                }
                Ok(TargetDraw::Gaussian {
                    space,
                    sigma: self.sigma,
                })
            }
            other => Err(Error::Config(format!(
                "unknown target.kind '{other}' (expected radial-mixture, rotated-template, gaussian or auto)"
            ))),
        }
    }
}

/// A concrete target distribution; `draw` is what training batches and
/// Monte-Carlo estimators consume.
#[derive(Debug, Clone)]
pub enum TargetDraw {
    RadialMixture {
        space: SymmetrySpace,
        radii: Vec<f64>,
        sigma: f64,
    },
    RotatedTemplate {
        template: crate::geometry::PointCloud,
        sigma: f64,
    },
    Gaussian {
        space: SymmetrySpace,
        sigma: f64,
    },
}

impl TargetDraw {
    pub fn space(&self) -> SymmetrySpace {
        match self {
            TargetDraw::RadialMixture { space, .. } => *space,
            TargetDraw::RotatedTemplate { template, .. } => template.space(),
            TargetDraw::Gaussian { space, .. } => *space,
        }
    }

    /// Exact CDF of the radial marginal, available for the radial mixture
    /// (the mass the folding at r = 0 moves is ~1e-11 at the default radii
    /// and is ignored).
    pub fn radial_cdf(&self, r: f64) -> Option<f64> {
        match self {
            TargetDraw::RadialMixture { radii, sigma, .. } => {
                let phi = |z: f64| 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
                let total: f64 = radii.iter().map(|ri| phi((r - ri) / sigma)).sum();
                Some(total / radii.len() as f64)
            }
            _ => None,
        }
    }

    pub fn draw(&self, rng: &mut ChaCha12Rng) -> Result<crate::geometry::PointCloud> {
        use rand::Rng;
        use rand_distr::Distribution;
        match self {
            TargetDraw::RadialMixture {
                space,
                radii,
                sigma,
            } => {
                let pick = radii[rng.random_range(0..radii.len())];
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                let r = pick + sigma * z;
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                crate::geometry::PointCloud::from_coords(
                    *space,
                    vec![r * angle.cos(), r * angle.sin()],
                )
            }
            TargetDraw::RotatedTemplate { template, sigma } => {
                let space = template.space();
                let noise = crate::draws::standard_normal_tangent(space, rng);
                let cloud = template.add_scaled(&noise, *sigma);
                let g = crate::draws::random_rotation(space, rng);
                crate::geometry::apply_group(&g, &cloud)
            }
            TargetDraw::Gaussian { space, sigma } => {
                let base = crate::draws::standard_normal_cloud(*space, rng);
                let coords = base.coords().iter().map(|c| c * sigma).collect();
                crate::geometry::PointCloud::from_coords(*space, coords)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    /// "planar-so2" or "shape-so3".
    pub kind: String,
    /// Required for shape-so3.
    pub n_points: Option<usize>,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection {
            kind: "planar-so2".into(),
            n_points: None,
        }
    }
}

impl SpaceSection {
    pub fn build(&self) -> Result<SymmetrySpace> {
        match self.kind.as_str() {
            "planar-so2" => Ok(SymmetrySpace::planar_so2()),
            "shape-so3" => {
                let n = self.n_points.ok_or_else(|| {
                    Error::Config("shape-so3 requires space.n_points".into())
                })?;
                SymmetrySpace::shape_so3(n)
            }
            other => Err(Error::Config(format!(
                "unknown space '{other}' (expected planar-so2 or shape-so3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub residual_output: bool,
    pub radius_inputs: bool,
    pub radius_bumps: usize,
    pub radius_span: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: DEFAULT_HIDDEN.to_vec(),
            time_frequencies: DEFAULT_TIME_FREQUENCIES,
            residual_output: false,
            radius_inputs: false,
            radius_bumps: 0,
            radius_span: DEFAULT_RADIUS_SPAN,
        }
    }
}

impl ModelSection {
    pub fn build(&self, space: SymmetrySpace) -> MlpLayout {
        let mut layout = MlpLayout::new(space);
        layout.hidden = self.hidden.clone();
        layout.time_features = TimeFeatures {
            frequencies: self.time_frequencies,
        };
        layout.residual_output = self.residual_output;
        layout.radius_inputs = self.radius_inputs;
        layout.radius_bumps = self.radius_bumps;
        layout.radius_span = self.radius_span;
        layout
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_schedule_name")]
    pub schedule: String,
    pub bridge_a: Option<f64>,
}

fn default_schedule_name() -> String {
    "linear-one-sided".into()
}

impl TrainSection {
    pub fn build(&self, seed_override: Option<u64>) -> Result<TrainConfig> {
        Ok(TrainConfig {
            loss: LossVariant::parse(&self.loss)?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: seed_override.unwrap_or(self.seed),
            augment: self.augment,
            schedule: parse_schedule(&self.schedule, self.bridge_a)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// "ode" or "sde".
    pub mode: String,
    /// "conventional" or "quotient".
    pub variant: String,
    pub steps: usize,
    pub noise_scale: f64,
    /// Constant noise temperature eta.
    pub eta: f64,
    pub stochastic_cutoff: f64,
    pub curvature: bool,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            mode: "ode".into(),
            variant: "quotient".into(),
            steps: 200,
            noise_scale: DEFAULT_NOISE_SCALE,
            eta: 1.0,
            stochastic_cutoff: DEFAULT_STOCHASTIC_CUTOFF,
            curvature: true,
            seed: 0,
        }
    }
}

impl SamplerSection {
    pub fn build(&self, seed_override: Option<u64>) -> Result<SamplerConfig> {
        let mode = match self.mode.as_str() {
            "ode" => Mode::Ode,
            "sde" => Mode::Sde,
            other => {
                return Err(Error::Config(format!(
                    "unknown sampler mode '{other}' (expected ode or sde)"
                )))
            }
        };
        let cfg = SamplerConfig {
            mode,
            variant: Variant::parse(&self.variant)?,
            grid: uniform_grid(self.steps),
            noise_scale: if mode == Mode::Ode {
                0.0
            } else {
                self.noise_scale
            },
            eta: EtaSchedule::Constant(self.eta),
            seed: seed_override.unwrap_or(self.seed),
            stochastic_cutoff: self.stochastic_cutoff,
            curvature_enabled: self.curvature,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    /// Final sample count per model.
    pub n_samples: usize,
    /// Number of trajectories highlighted in plots and written to CSV.
    pub n_trajectories: usize,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection {
            n_samples: 5000,
            n_trajectories: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSection {
    pub sigma: f64,
    /// Paired conventional/quotient ODE runs for the length comparison.
    pub n_pairs: usize,
    /// Sample count for each covariance estimate.
    pub n_covariance: usize,
    pub steps: usize,
}

impl Default for GaussianSection {
    fn default() -> Self {
        GaussianSection {
            sigma: 1.0,
            n_pairs: 500,
            n_covariance: 2000,
            steps: 200,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ConfigFile::parse("").unwrap();
        assert!(cfg.train.is_none());
        let space = cfg.space().unwrap();
        assert_eq!(space.coord_len(), 2);
        let sampler = cfg.sampler_config(None).unwrap();
        assert_eq!(sampler.steps(), 200);
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
[space]
kind = "shape-so3"
n_points = 5

[model]
hidden = [64, 64]
time_frequencies = 4
residual_output = true

[train]
loss = "quotient"
epochs = 100
batch_size = 32
lr = 0.005
seed = 7
augment = true
schedule = "general-bridge"
bridge_a = 0.5

[sampler]
mode = "sde"
variant = "quotient"
steps = 100
noise_scale = 0.5
eta = 0.9
stochastic_cutoff = 0.01
curvature = false
seed = 9
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        let space = cfg.space().unwrap();
        assert_eq!(space.coord_len(), 15);
        let layout = cfg.layout(space);
        assert_eq!(layout.hidden, vec![64, 64]);
        assert!(layout.residual_output);
        let train = cfg.train_config(None).unwrap();
        assert_eq!(train.seed, 7);
        assert!(matches!(train.schedule, Schedule::GeneralBridge { a } if a == 0.5));
        let train2 = cfg.train_config(Some(99)).unwrap();
        assert_eq!(train2.seed, 99);
        let sampler = cfg.sampler_config(None).unwrap();
        assert_eq!(sampler.steps(), 100);
        assert!(!sampler.curvature_enabled);
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_the_key() {
        let err = ConfigFile::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = format!("{err}");
        assert!(
            msg.contains("learning_rate"),
            "error must name the bad key: {msg}"
        );
        let err = ConfigFile::parse("[sampelr]\nmode = \"ode\"\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("sampelr"), "error must name the bad section: {msg}");
    }

    #[test]
    fn missing_required_fields_are_rejected() {
        let err = ConfigFile::parse("[space]\nkind = \"shape-so3\"\n")
            .unwrap()
            .space()
            .unwrap_err();
        assert!(format!("{err}").contains("n_points"));
        let err = ConfigFile::parse("[train]\nloss = \"quotient\"\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("epochs") || msg.contains("missing"), "{msg}");
    }

    #[test]
    fn ode_mode_forces_zero_noise_scale() {
        let cfg = ConfigFile::parse("[sampler]\nmode = \"ode\"\nnoise_scale = 0.7\n").unwrap();
        let sampler = cfg.sampler_config(None).unwrap();
        assert_eq!(sampler.noise_scale, 0.0);
    }

    #[test]
    fn target_auto_picks_kind_by_space() {
        let cfg = ConfigFile::parse("").unwrap();
        let planar = SymmetrySpace::planar_so2();
        assert!(matches!(
            cfg.target(planar).unwrap(),
            TargetDraw::RadialMixture { .. }
        ));
        let shape = SymmetrySpace::shape_so3(5).unwrap();
        assert!(matches!(
            cfg.target(shape).unwrap(),
            TargetDraw::RotatedTemplate { .. }
        ));
    }

    #[test]
    fn target_kind_space_mismatch_is_rejected() {
        let cfg = ConfigFile::parse("[target]\nkind = \"radial-mixture\"\n").unwrap();
        let shape = SymmetrySpace::shape_so3(4).unwrap();
        assert!(cfg.target(shape).is_err());
        let cfg = ConfigFile::parse("[target]\nkind = \"rotated-template\"\n").unwrap();
        assert!(cfg.target(SymmetrySpace::planar_so2()).is_err());
        let cfg = ConfigFile::parse("[target]\nkind = \"spiral\"\n").unwrap();
        assert!(cfg.target(SymmetrySpace::planar_so2()).is_err());
    }

    #[test]
    fn target_draws_match_their_description() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);

        let cfg =
            ConfigFile::parse("[target]\nkind = \"radial-mixture\"\nradii = [2.0]\nradial_sigma = 1e-9\n")
                .unwrap();
        let draw = cfg.target(SymmetrySpace::planar_so2()).unwrap();
        for _ in 0..20 {
            let x = draw.draw(&mut rng).unwrap();
            assert!((x.point2().norm() - 2.0).abs() < 1e-6);
        }

        // The template target with zero noise stays on a single orbit: every
        // draw has the same sorted pairwise distances.
        let cfg = ConfigFile::parse("[target]\nkind = \"rotated-template\"\ntemplate_sigma = 0.0\n")
            .unwrap();
        let shape = SymmetrySpace::shape_so3(5).unwrap();
        let draw = cfg.target(shape).unwrap();
        let a = crate::metrics::shape_descriptor(&draw.draw(&mut rng).unwrap()).unwrap();
        let b = crate::metrics::shape_descriptor(&draw.draw(&mut rng).unwrap()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }
}
