//! TOML experiment configuration, `--override` handling and resolution into library objects.

use std::fmt;
use std::path::{Path, PathBuf};

use diffblend::analytic::{GaussianMixture, MixtureSpec};
use diffblend::baselines::{CodeConfig, RggConfig};
use diffblend::jensen::{RGrid, ShiftReference};
use diffblend::rewards::{PreferenceWeights, RewardConfig, RewardSpec};
use diffblend::score_fit::TrainConfig;
use diffblend::sde::{NoiseSchedule, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

/// Sampling and blending methods known to the runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MorlOracle,
    DbMpa,
    DbKla,
    RsLearned,
    Rgg,
    Code,
    BestOfN,
    Pretrained,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::MorlOracle,
        Method::DbMpa,
        Method::DbKla,
        Method::RsLearned,
        Method::Rgg,
        Method::Code,
        Method::BestOfN,
        Method::Pretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MorlOracle => "morl_oracle",
            Method::DbMpa => "db_mpa",
            Method::DbKla => "db_kla",
            Method::RsLearned => "rs_learned",
            Method::Rgg => "rgg",
            Method::Code => "code",
            Method::BestOfN => "best_of_n",
            Method::Pretrained => "pretrained",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A prior given inline or as a path to a JSON mixture file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSource {
    File { file: PathBuf },
    Inline(MixtureSpec),
}

/// A preference point: a scalar `w` means `(w, 1 - w)` for two rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightPoint {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl WeightPoint {
    pub fn resolve(&self, rewards: usize) -> diffblend::Result<PreferenceWeights> {
        match self {
            WeightPoint::Scalar(w) if rewards == 2 => PreferenceWeights::pair(*w),
            WeightPoint::Scalar(_) if rewards == 1 => PreferenceWeights::new(vec![1.0]),
            WeightPoint::Scalar(_) => Err(diffblend::Error::Config(format!(
                "scalar preference weights need exactly two rewards, got {rewards}"
            ))),
            WeightPoint::Vector(v) => {
                if v.len() != rewards {
                    return Err(diffblend::Error::LengthMismatch(format!(
                        "preference vector has {} entries for {rewards} rewards",
                        v.len()
                    )));
                }
                PreferenceWeights::new(v.clone())
            }
        }
    }

    /// Label used in CSV rows: the first coordinate.
    pub fn label(&self) -> f64 {
        match self {
            WeightPoint::Scalar(w) => *w,
            WeightPoint::Vector(v) => v.first().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridKind {
    Uniform,
    /// Geometric spacing with the first step ending at `first`.
    Geometric {
        first: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub samples: usize,
    pub grid: GridKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 1000, samples: 50_000, grid: GridKind::Uniform }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeSection {
    pub particles: usize,
    pub block: usize,
    /// Trajectories per run; defaults to the sampler size.
    pub samples: Option<usize>,
}

impl Default for CodeSection {
    fn default() -> Self {
        let c = CodeConfig::default();
        Self { particles: c.particles, block: c.block, samples: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestOfNSection {
    pub n: usize,
    pub samples: Option<usize>,
}

impl Default for BestOfNSection {
    fn default() -> Self {
        Self { n: 16, samples: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsSection {
    /// Training samples drawn from each reward's exactly tilted law.
    pub train_samples: usize,
}

impl Default for RsSection {
    fn default() -> Self {
        Self { train_samples: 20_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSection {
    /// Neighbour index of the nearest-neighbour entropy estimate.
    pub k: usize,
}

impl Default for KlSection {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JensenSection {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub draws: usize,
    pub slack_stderr: f64,
    pub shift: ShiftReference,
    pub r_grid: RGrid,
}

impl Default for JensenSection {
    fn default() -> Self {
        Self {
            xs: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            ts: vec![0.05, 0.1, 0.25, 0.5, 0.75],
            draws: 20_000,
            slack_stderr: 3.0,
            shift: ShiftReference::Fitted,
            r_grid: RGrid::default(),
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_alpha() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_methods() -> Vec<Method> {
    vec![Method::MorlOracle, Method::DbMpa, Method::Pretrained]
}
fn default_w_grid() -> Vec<WeightPoint> {
    (1..=9).map(|i| WeightPoint::Scalar(i as f64 / 10.0)).collect()
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 1.5, 2.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Everything an experiment needs, as written in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub prior: PriorSource,
    pub rewards: Vec<RewardConfig>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Blend factor used by `db_kla` in Pareto runs.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_w_grid")]
    pub w_grid: Vec<WeightPoint>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub score_fit: TrainConfig,
    #[serde(default)]
    pub rs: RsSection,
    #[serde(default)]
    pub rgg: RggConfig,
    #[serde(default)]
    pub code: CodeSection,
    #[serde(default)]
    pub best_of_n: BestOfNSection,
    #[serde(default)]
    pub kl: KlSection,
    #[serde(default)]
    pub jensen: JensenSection,
}

/// Library objects built from a validated config.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub prior: GaussianMixture,
    pub rewards: Vec<RewardSpec>,
    pub weights: Vec<PreferenceWeights>,
    pub grid: TimeGrid,
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Apply `a.b.c=value` to a TOML document, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> RunResult<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| RunError::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Read a TOML file, apply overrides, inline a file-referenced prior and validate.
    pub fn load(path: &Path, overrides: &[String]) -> RunResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base).map_err(|e| match e {
            RunError::Config(m) => RunError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parse TOML text; relative prior files are resolved against `base`.
    pub fn from_toml_str(text: &str, overrides: &[String], base: &Path) -> RunResult<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(RunError::config)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(doc).try_into().map_err(RunError::config)?;
        if let PriorSource::File { file } = &cfg.prior {
            let p = if file.is_absolute() { file.clone() } else { base.join(file) };
            let text = std::fs::read_to_string(&p)
                .map_err(|e| RunError::Config(format!("cannot read prior file {}: {e}", p.display())))?;
            let spec: MixtureSpec = serde_json::from_str(&text)
                .map_err(|e| RunError::Config(format!("prior file {}: {e}", p.display())))?;
            cfg.prior = PriorSource::Inline(spec);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check the invariants that do not need the library objects, then resolve them.
    pub fn validate(&self) -> RunResult<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(RunError::Config(format!(
                "alpha = {} is invalid: the objective E[r] - alpha * KL requires alpha > 0",
                self.alpha
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(RunError::Config(format!("lambda = {} must be finite and >= 0", self.lambda)));
        }
        if self.rewards.is_empty() {
            return Err(RunError::Config("at least one reward is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(RunError::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(RunError::Config("methods must not be empty".into()));
        }
        if self.sampler.steps == 0 || self.sampler.samples == 0 {
            return Err(RunError::Config("sampler steps and samples must be positive".into()));
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(RunError::Config("lambda_grid entries must be finite and >= 0".into()));
        }
        if self.kl.k == 0 {
            return Err(RunError::Config("kl.k must be positive".into()));
        }
        if self.methods.contains(&Method::Code) {
            if self.code.particles == 0 || self.code.block == 0 {
                return Err(RunError::Config("code.particles and code.block must be positive".into()));
            }
            if !self.sampler.steps.is_multiple_of(self.code.block) {
                return Err(RunError::Config(format!(
                    "code.block = {} does not divide sampler.steps = {}",
                    self.code.block, self.sampler.steps
                )));
            }
        }
        if self.methods.contains(&Method::BestOfN) && self.best_of_n.n == 0 {
            return Err(RunError::Config("best_of_n.n must be positive".into()));
        }
        self.rgg.validate().map_err(RunError::config)?;
        self.score_fit.validate().map_err(RunError::config)?;
        self.resolve()?;
        Ok(())
    }

    pub fn resolve(&self) -> RunResult<Resolved> {
        let spec = match &self.prior {
            PriorSource::Inline(s) => s,
            PriorSource::File { file } => {
                return Err(RunError::Config(format!("prior file {} was not loaded", file.display())))
            }
        };
        let prior = GaussianMixture::from_spec(spec).map_err(|e| RunError::Config(format!("prior: {e}")))?;
        let rewards = self
            .rewards
            .iter()
            .enumerate()
            .map(|(i, r)| r.build(prior.dim()).map_err(|e| RunError::Config(format!("reward {}: {e}", i + 1))))
            .collect::<RunResult<Vec<_>>>()?;
        let weights = self
            .w_grid
            .iter()
            .map(|w| w.resolve(rewards.len()).map_err(|e| RunError::Config(format!("w_grid: {e}"))))
            .collect::<RunResult<Vec<_>>>()?;
        let h = self.schedule.horizon();
        let grid = match self.sampler.grid {
            GridKind::Uniform => TimeGrid::uniform(self.sampler.steps, h),
            GridKind::Geometric { first } => TimeGrid::geometric(self.sampler.steps, h, first),
        }
        .map_err(|e| RunError::Config(format!("sampler grid: {e}")))?;
        Ok(Resolved { prior, rewards, weights, grid })
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring output location and worker count.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.out_dir = None;
        c.workers = 0;
        let json = serde_json::to_string(&c).expect("configs always serialise");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn code_config(&self) -> CodeConfig {
        CodeConfig { particles: self.code.particles, block: self.code.block }
    }
}
