//! Experiment configuration: a TOML document that resolves to a complete,
//! self-describing run.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sgrgmm::datagen::{CloudSpec, Contamination, MixtureSpec};
use sgrgmm::dgmm::{DgmmOptions, EmOptions};
use sgrgmm::engine::DriverConfig;
use sgrgmm::sgr::{Restart, SgrConfig, StepSize, StopThreshold};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    ContaminationSweep,
    OuterLoop,
    EpsilonSensitivity,
    DgmmDiagnostics,
    DgmmTrials,
    BaselineComparison,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::ContaminationSweep,
        ExperimentId::OuterLoop,
        ExperimentId::EpsilonSensitivity,
        ExperimentId::DgmmDiagnostics,
        ExperimentId::DgmmTrials,
        ExperimentId::BaselineComparison,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::ContaminationSweep => "contamination-sweep",
            ExperimentId::OuterLoop => "outer-loop",
            ExperimentId::EpsilonSensitivity => "epsilon-sensitivity",
            ExperimentId::DgmmDiagnostics => "dgmm-diagnostics",
            ExperimentId::DgmmTrials => "dgmm-trials",
            ExperimentId::BaselineComparison => "baseline-comparison",
        }
    }

    fn uses_mixtures(&self) -> bool {
        matches!(self, ExperimentId::DgmmDiagnostics | ExperimentId::DgmmTrials | ExperimentId::BaselineComparison)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gradient-cloud benchmark: ten dimensions, decaying spectrum, directional outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudSettings {
    pub n: usize,
    /// Outlier offset along the smallest-variance direction.
    pub strength: f64,
    /// Outlier variance.
    pub spread: f64,
    /// Contamination level for single-level experiments.
    pub epsilon: f64,
}

impl Default for CloudSettings {
    fn default() -> Self {
        Self { n: 600, strength: 8.0, spread: 0.1, epsilon: 0.1 }
    }
}

impl CloudSettings {
    pub fn spec(&self, epsilon: f64, seed: u64, trial: u64) -> CloudSpec {
        let mut spec = CloudSpec::benchmark(epsilon, seed, trial);
        spec.n = self.n;
        spec.outlier = sgrgmm::datagen::CloudOutlier::Directional { strength: self.strength, spread: self.spread };
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartSetting {
    Warm,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgrSettings {
    pub inner_rounds: usize,
    /// `η_w ν`.
    pub eta_w: f64,
    /// `η_ρ ν`.
    pub eta_rho: f64,
    pub s_max: usize,
    /// `"disabled"`, `"auto"`, or a fixed threshold.
    pub c_stop: StopSetting,
    pub headroom: f64,
    pub restart: RestartSetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StopSetting {
    Fixed(f64),
    Named(String),
}

impl Default for SgrSettings {
    fn default() -> Self {
        Self {
            inner_rounds: 100,
            eta_w: 0.5,
            eta_rho: 0.5,
            s_max: 10,
            c_stop: StopSetting::Named("disabled".into()),
            headroom: 1.2,
            restart: RestartSetting::Warm,
        }
    }
}

impl SgrSettings {
    pub fn config(&self, epsilon: f64) -> SgrConfig {
        let c_stop = match &self.c_stop {
            StopSetting::Fixed(c) => StopThreshold::Fixed(*c),
            StopSetting::Named(s) if s == "auto" => StopThreshold::Auto { headroom: self.headroom },
            StopSetting::Named(_) => StopThreshold::Disabled,
        };
        SgrConfig {
            inner_rounds: self.inner_rounds,
            eta_w: StepSize::Scaled(self.eta_w),
            eta_rho: StepSize::Scaled(self.eta_rho),
            c_stop,
            s_max: self.s_max,
            restart: match self.restart {
                RestartSetting::Warm => Restart::WarmStart,
                RestartSetting::Uniform => Restart::Uniform,
            },
            ..SgrConfig::new(epsilon)
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.inner_rounds == 0 || self.s_max == 0 {
            return invalid("sgr.inner_rounds and sgr.s_max must be positive");
        }
        if !(self.eta_w > 0.0 && self.eta_rho > 0.0) {
            return invalid("sgr step sizes must be positive");
        }
        match &self.c_stop {
            StopSetting::Fixed(c) if !(*c >= 0.0) => invalid("sgr.c_stop must be nonnegative"),
            StopSetting::Named(s) if s != "auto" && s != "disabled" => {
                invalid(format!("sgr.c_stop must be \"auto\", \"disabled\" or a number, got {s:?}"))
            }
            _ if !(self.headroom > 0.0) => invalid("sgr.headroom must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub epsilons: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { epsilons: (0..=8).map(|i| i as f64 * 0.05).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySettings {
    pub true_epsilon: f64,
    pub assumed: Vec<f64>,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self { true_epsilon: 0.1, assumed: vec![0.05, 0.08, 0.10, 0.12, 0.15, 0.20] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSettings {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub rank: usize,
    pub orders: usize,
    pub center_radius: f64,
    pub singular_low: f64,
    pub singular_high: f64,
    /// Additive noise variance when noise is switched on.
    pub noise: f64,
    pub epsilon: f64,
    pub outlier_std: f64,
    pub box_low: f64,
    pub box_high: f64,
    pub box_jitter: f64,
}

impl Default for MixtureSettings {
    fn default() -> Self {
        Self {
            d: 5,
            k: 2,
            n: 1000,
            rank: 2,
            orders: 4,
            center_radius: 5.0,
            singular_low: 1.0,
            singular_high: 2.0,
            noise: 0.1,
            epsilon: 0.1,
            outlier_std: 4.0,
            box_low: 4.0,
            box_high: 10.0,
            box_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    GaussianReplacement,
    UniformBox,
}

impl Geometry {
    pub fn as_str(&self) -> &'static str {
        match self {
            Geometry::GaussianReplacement => "gaussian-replacement",
            Geometry::UniformBox => "uniform-box",
        }
    }
}

impl MixtureSettings {
    /// A dataset spec; `epsilon = 0` or `geometry = None` draws clean data.
    pub fn spec(&self, noisy: bool, epsilon: f64, geometry: Option<Geometry>, seed: u64, trial: u64) -> MixtureSpec {
        let contamination = match geometry {
            _ if epsilon == 0.0 => Contamination::None,
            None => Contamination::None,
            Some(Geometry::GaussianReplacement) => Contamination::GaussianReplacement { std: self.outlier_std },
            Some(Geometry::UniformBox) => {
                Contamination::UniformBox { low: self.box_low, high: self.box_high, jitter: self.box_jitter }
            }
        };
        MixtureSpec {
            d: self.d,
            k: self.k,
            n: self.n,
            rank: self.rank,
            orders: self.orders,
            center_radius: self.center_radius,
            singular_range: (self.singular_low, self.singular_high),
            noise: noisy.then_some(self.noise),
            contamination,
            epsilon: if geometry.is_some() { epsilon } else { 0.0 },
            seed,
            trial,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.k == 0 || self.n == 0 || self.rank == 0 || self.rank > self.d || self.orders == 0 {
            return invalid("mixture dimensions must be positive with rank <= d");
        }
        if self.k > 8 {
            return invalid("mixture.k above 8 makes permutation matching impractical");
        }
        if !(0.0..1.0 / 3.0).contains(&self.epsilon) {
            return invalid("mixture.epsilon must lie in [0, 1/3)");
        }
        if !(self.singular_low > 0.0 && self.singular_high >= self.singular_low) || !(self.noise >= 0.0) {
            return invalid("mixture spectrum and noise must be positive");
        }
        if !(self.box_high > self.box_low) || !(self.outlier_std > 0.0) || !(self.box_jitter >= 0.0) {
            return invalid("mixture outlier geometry is degenerate");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Uniform weights, unit-sphere means, random orthonormal factors.
    Random,
    /// As `Random` with the means replaced by k-means centers.
    KmeansCenters,
    /// k-means fractions, centers and per-cluster principal directions.
    KmeansPca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmmSettings {
    pub init: InitMode,
    pub t_gmm: usize,
    pub i_lbfgs: usize,
    pub i_interval: usize,
    pub i_min: usize,
    pub stabilization_gate: bool,
    pub stabilization_tol: f64,
    pub memory: usize,
    pub grad_tol: f64,
}

impl Default for DgmmSettings {
    fn default() -> Self {
        Self {
            init: InitMode::KmeansCenters,
            t_gmm: 5,
            i_lbfgs: 100,
            i_interval: 10,
            i_min: 3,
            stabilization_gate: false,
            stabilization_tol: 1e-6,
            memory: 10,
            grad_tol: 1e-10,
        }
    }
}

impl DgmmSettings {
    pub fn options(&self, orders: usize) -> DgmmOptions {
        DgmmOptions {
            orders,
            driver: DriverConfig {
                t_gmm: self.t_gmm,
                i_lbfgs: self.i_lbfgs,
                i_interval: self.i_interval,
                i_min: self.i_min,
                sgr: None,
                use_stabilization_gate: self.stabilization_gate,
                stabilization_tol: self.stabilization_tol,
                memory: self.memory,
                grad_tol: self.grad_tol,
            },
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.t_gmm == 0 || self.i_lbfgs == 0 || self.i_interval == 0 || self.memory == 0 {
            return invalid("dgmm step counts must be positive");
        }
        if self.i_min > self.i_interval {
            return invalid("dgmm.i_min must not exceed dgmm.i_interval");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub reg: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        let o = EmOptions::default();
        Self { max_iter: o.max_iter, tol: o.tol, reg: o.reg }
    }
}

impl EmSettings {
    pub fn options(&self) -> EmOptions {
        EmOptions { max_iter: self.max_iter, tol: self.tol, reg: self.reg }
    }
}

/// How `--fast` shrinks a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastSettings {
    pub cloud_trials: usize,
    pub mixture_trials: usize,
    pub t_gmm: usize,
}

impl Default for FastSettings {
    fn default() -> Self {
        Self { cloud_trials: 10, mixture_trials: 5, t_gmm: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub fast: bool,
    #[serde(default)]
    pub cloud: CloudSettings,
    #[serde(default)]
    pub sgr: SgrSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
    #[serde(default)]
    pub mixture: MixtureSettings,
    #[serde(default)]
    pub dgmm: DgmmSettings,
    #[serde(default)]
    pub em: EmSettings,
    #[serde(default)]
    pub fast_mode: FastSettings,
}

fn default_seed() -> u64 {
    2024
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub fast: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        Self {
            experiment,
            seed: default_seed(),
            trials: None,
            fast: false,
            cloud: CloudSettings::default(),
            sgr: SgrSettings::default(),
            sweep: SweepSettings::default(),
            sensitivity: SensitivitySettings::default(),
            mixture: MixtureSettings::default(),
            dgmm: DgmmSettings::default(),
            em: EmSettings::default(),
            fast_mode: FastSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies overrides and `--fast`, leaving a config whose every count is explicit.
    pub fn resolve(mut self, ov: &Overrides) -> Result<Self, ConfigError> {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(trials) = ov.trials {
            self.trials = Some(trials);
        }
        self.fast |= ov.fast;
        let mixtures = self.experiment.uses_mixtures();
        if self.trials.is_none() {
            self.trials = Some(match (self.fast, mixtures) {
                (true, false) => self.fast_mode.cloud_trials,
                (true, true) => self.fast_mode.mixture_trials,
                (false, false) => 50,
                (false, true) => 10,
            });
        }
        if self.fast && mixtures {
            self.dgmm.t_gmm = self.dgmm.t_gmm.min(self.fast_mode.t_gmm);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == Some(0) {
            return invalid("trials must be positive");
        }
        if self.cloud.n < 2 || !(self.cloud.spread >= 0.0) || !self.cloud.strength.is_finite() {
            return invalid("cloud settings are degenerate");
        }
        if !(0.0..1.0 / 3.0).contains(&self.cloud.epsilon) {
            return invalid("cloud.epsilon must lie in [0, 1/3)");
        }
        if self.sweep.epsilons.is_empty() || self.sweep.epsilons.iter().any(|e| !(0.0..0.5).contains(e)) {
            return invalid("sweep.epsilons must be nonempty and lie in [0, 0.5)");
        }
        let s = &self.sensitivity;
        if !(0.0..0.5).contains(&s.true_epsilon) || s.assumed.is_empty() || s.assumed.iter().any(|e| !(0.0..1.0 / 3.0).contains(e)) {
            return invalid("sensitivity levels must lie in [0, 1/3)");
        }
        if self.em.max_iter == 0 || !(self.em.reg >= 0.0) {
            return invalid("em settings are degenerate");
        }
        self.sgr.validate()?;
        self.mixture.validate()?;
        self.dgmm.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for id in ExperimentId::ALL {
            let cfg = ExperimentConfig::new(id).resolve(&Overrides::default()).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("experiment = \"outer-loop\"\n[sgr]\nc_stop = 2.5\n").unwrap();
        assert_eq!(cfg.seed, 2024);
        assert_eq!(cfg.sgr.c_stop, StopSetting::Fixed(2.5));
        assert_eq!(cfg.sgr.config(0.1).c_stop, StopThreshold::Fixed(2.5));
        assert_eq!(cfg.cloud, CloudSettings::default());
    }

    #[test]
    fn overrides_and_fast_mode() {
        let ov = Overrides { seed: Some(9), trials: None, fast: true };
        let cfg = ExperimentConfig::new(ExperimentId::DgmmTrials).resolve(&ov).unwrap();
        assert_eq!((cfg.seed, cfg.trials(), cfg.dgmm.t_gmm), (9, 5, 3));
        let sweep = ExperimentConfig::new(ExperimentId::ContaminationSweep).resolve(&ov).unwrap();
        assert_eq!(sweep.trials(), 10);
        let full = ExperimentConfig::new(ExperimentId::ContaminationSweep).resolve(&Overrides::default()).unwrap();
        assert_eq!(full.trials(), 50);
        assert_ne!(full.hash(), sweep.hash());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(ExperimentConfig::from_toml("experiment = \"nope\""), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml("experiment = \"outer-loop\"\nbogus = 1"), Err(ConfigError::Parse(_))));
        let bad = "experiment = \"dgmm-trials\"\n[dgmm]\ni_min = 50\n";
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(ConfigError::Invalid(_))));
        let bad = "experiment = \"outer-loop\"\n[sgr]\nc_stop = \"sometimes\"\n";
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(ConfigError::Invalid(_))));
        let bad = "experiment = \"outer-loop\"\ntrials = 0\n";
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(ConfigError::Invalid(_))));
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_settings_survive_toml(
            seed in proptest::prelude::any::<u64>(),
            trials in 1usize..500,
            eps in 0.0f64..0.33,
            spread in 1e-6f64..10.0,
            c_stop in proptest::option::of(0.5f64..50.0),
        ) {
            let mut cfg = ExperimentConfig::new(ExperimentId::EpsilonSensitivity);
            cfg.cloud.epsilon = eps;
            cfg.cloud.spread = spread;
            cfg.sgr.c_stop = c_stop.map_or(StopSetting::Named("disabled".into()), StopSetting::Fixed);
            let ov = Overrides { seed: Some(seed), trials: Some(trials), fast: false };
            let cfg = cfg.resolve(&ov).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            proptest::prop_assert_eq!(back.hash(), cfg.hash());
            proptest::prop_assert_eq!(back, cfg);
        }
    }
}
