use std::path::{Path, PathBuf};

use cola::data::{build_toy, load_dataset, subsample_spc, DatasetSpec, LabeledImageSet};
use cola::generation::LossKind;
use cola::metrics::{ClassifierConfig, DEFAULT_TAU_CONC, DEFAULT_TAU_SPARSE};
use cola::pipeline::{Method, PosteriorConfig, Step1Config, Step2Config};
use cola::theory::Prop1Grid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Everything a command needs, read from TOML and then patched by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// `toy:<K>x<spc>@<H>[:family]` or a class-per-directory image folder.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Held-out set for evaluation. Toy datasets default to a fresh draw.
    #[serde(default)]
    pub test_dataset: Option<String>,
    #[serde(default = "default_mode")]
    pub mode: Method,
    /// Expected cluster count; checked against the dataset when given.
    #[serde(default)]
    pub clusters: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Seeds of the multi-sample classification protocol.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub spc: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Classifier checkpoint used as the perceptual feature network.
    #[serde(default)]
    pub extractor: Option<PathBuf>,
    /// Artifact root; falls back to `COLA_RUNS_DIR`, then `runs`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "Step1Config::toy")]
    pub step1: Step1Config,
    #[serde(default = "default_step2")]
    pub step2: Step2Config,
    #[serde(default)]
    pub posterior: PosteriorConfig,
    #[serde(default = "ClassifierConfig::toy")]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn default_name() -> String {
    "default".into()
}

fn default_dataset() -> String {
    "toy:4x100@32".into()
}

fn default_mode() -> Method {
    Method::Cola
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_tau() -> f64 {
    1.0
}

fn default_loss() -> LossKind {
    LossKind::Lap
}

fn default_step2() -> Step2Config {
    Step2Config::toy(200)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            dataset: default_dataset(),
            test_dataset: None,
            mode: default_mode(),
            clusters: None,
            seed: 0,
            seeds: default_seeds(),
            spc: None,
            tau: default_tau(),
            loss: default_loss(),
            extractor: None,
            output_dir: None,
            step1: Step1Config::toy(),
            step2: default_step2(),
            posterior: PosteriorConfig::default(),
            classifier: ClassifierConfig::toy(),
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Penultimate layer of a classifier trained on the real training set.
    Classifier,
    Pca,
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_features")]
    pub features: FeatureKind,
    #[serde(default = "default_components")]
    pub pca_components: usize,
    #[serde(default = "one")]
    pub fid_repeats: usize,
    /// Synthetic set size; defaults to the training set size.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f64,
    #[serde(default = "default_tau_conc")]
    pub tau_conc: f64,
    #[serde(default = "default_tau_sparse")]
    pub tau_sparse: f64,
}

fn default_features() -> FeatureKind {
    FeatureKind::Classifier
}

fn default_components() -> usize {
    32
}

fn one() -> usize {
    1
}

fn default_mix_ratio() -> f64 {
    0.5
}

fn default_tau_conc() -> f64 {
    DEFAULT_TAU_CONC
}

fn default_tau_sparse() -> f64 {
    DEFAULT_TAU_SPARSE
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            features: default_features(),
            pca_components: default_components(),
            fid_repeats: 1,
            samples: None,
            mix_ratio: default_mix_ratio(),
            tau_conc: DEFAULT_TAU_CONC,
            tau_sparse: DEFAULT_TAU_SPARSE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default)]
    pub prop1: Prop1Grid,
    #[serde(default)]
    pub prop2: Prop2Grid,
}

/// `ms × epsilons × {ε·k/delta_steps : k < delta_steps}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop2Grid {
    pub ms: Vec<u64>,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_delta_steps")]
    pub delta_steps: u32,
}

fn default_delta_steps() -> u32 {
    10
}

impl Default for Prop2Grid {
    fn default() -> Self {
        Self {
            ms: vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000],
            epsilons: vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 0.9],
            delta_steps: default_delta_steps(),
        }
    }
}

impl Prop2Grid {
    pub fn points(&self) -> Vec<(u64, f64, f64)> {
        let mut out = Vec::new();
        for &m in &self.ms {
            for &e in &self.epsilons {
                for k in 0..self.delta_steps {
                    out.push((m, e, e * k as f64 / self.delta_steps as f64));
                }
            }
        }
        out
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub name: Option<String>,
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub spc: Option<usize>,
    pub mode: Option<Method>,
    pub tau: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Toml { source, .. } => CliError::Toml {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|source| CliError::Toml {
            path: PathBuf::from("<config>"),
            source,
        })
    }

    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(v) = &flags.name {
            self.name = v.clone();
        }
        if let Some(v) = &flags.dataset {
            self.dataset = v.clone();
        }
        if let Some(v) = flags.seed {
            self.seed = v;
            self.theory.prop1.seed = v;
        }
        if let Some(v) = flags.spc {
            self.spc = Some(v);
        }
        if let Some(v) = flags.mode {
            self.mode = v;
        }
        if let Some(v) = flags.tau {
            self.tau = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.name.is_empty() || self.name == "." || self.name == ".." || self.name.contains(['/', '\\']) {
            return bad(format!("run name {:?} must be a single path component", self.name));
        }
        self.dataset.parse::<DatasetSpec>()?;
        if let Some(t) = &self.test_dataset {
            t.parse::<DatasetSpec>()?;
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return bad(format!("tau must be finite and >= 0, got {}", self.tau));
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.spc == Some(0) {
            return bad("spc must be positive".into());
        }
        if self.clusters == Some(0) {
            return bad("clusters must be positive".into());
        }
        if self.loss == LossKind::Perceptual && self.extractor.is_none() {
            return bad("loss = \"perceptual\" needs `extractor`, the path of a classifier checkpoint (see `cola eval`)".into());
        }
        let e = &self.eval;
        if !(e.mix_ratio > 0.0 && e.mix_ratio <= 1.0) {
            return bad(format!("eval.mix_ratio must lie in (0, 1], got {}", e.mix_ratio));
        }
        if e.fid_repeats == 0 || e.samples == Some(0) {
            return bad("eval.fid_repeats and eval.samples must be positive".into());
        }
        for t in [e.tau_conc, e.tau_sparse] {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("sampling temperatures must be finite and >= 0, got {t}"));
            }
        }
        self.step1.clustering.optim.validate()?;
        self.step2.optim.validate()?;
        self.classifier.optim.validate()?;
        Ok(())
    }

    pub fn runs_root(&self) -> PathBuf {
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        match std::env::var_os("COLA_RUNS_DIR") {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => PathBuf::from("runs"),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_root().join(&self.name)
    }

    /// Training set, subsampled to `spc` per class when set.
    pub fn train_set(&self) -> Result<LabeledImageSet> {
        let full = self.full_train_set()?;
        match self.spc {
            Some(spc) => Ok(subsample_spc(&full, spc, self.seed)?),
            None => Ok(full),
        }
    }

    pub fn full_train_set(&self) -> Result<LabeledImageSet> {
        let set = load_spec(&self.dataset.parse()?, self.seed)?;
        if let Some(k) = self.clusters {
            if k != set.class_count() {
                return Err(CliError::Config(format!(
                    "clusters = {k} but dataset {} has {} classes",
                    self.dataset,
                    set.class_count()
                )));
            }
        }
        Ok(set)
    }

    pub fn test_set(&self) -> Result<LabeledImageSet> {
        match (&self.test_dataset, self.dataset.parse()?) {
            (Some(t), _) => load_spec(&t.parse()?, self.seed),
            (None, DatasetSpec::Toy(t)) => Ok(build_toy(&t, self.seed.wrapping_add(1000))?),
            (None, DatasetSpec::Directory(_)) => Err(CliError::Config(
                "directory datasets need `test_dataset` for evaluation".into(),
            )),
        }
    }

    pub fn is_toy(&self) -> bool {
        matches!(self.dataset.parse(), Ok(DatasetSpec::Toy(_)))
    }

    fn data_key(&self) -> serde_json::Value {
        serde_json::json!({ "dataset": self.dataset, "spc": self.spc, "seed": self.seed, "clusters": self.clusters })
    }

    /// Epoch budgets are left out of the stage hashes, so a run can be
    /// extended with `--epochs` and `--resume`.
    pub fn step1_hash(&self) -> String {
        let mut step1 = self.step1.clone();
        step1.clustering.optim.epochs = 0;
        digest(&serde_json::json!({ "stage": "step1", "data": self.data_key(), "step1": step1 }))
    }

    pub fn step2_hash(&self) -> String {
        let mut step2 = self.step2.clone();
        step2.optim.epochs = 0;
        let upstream = match self.mode {
            Method::Cola => Some(self.step1_hash()),
            _ => None,
        };
        digest(&serde_json::json!({
            "stage": "step2",
            "data": self.data_key(),
            "mode": self.mode,
            "loss": self.loss,
            "extractor": self.extractor,
            "step2": step2,
            "upstream": upstream,
        }))
    }

    pub fn posterior_hash(&self) -> String {
        digest(&serde_json::json!({ "stage": "posterior", "upstream": self.step2_hash(), "posterior": self.posterior }))
    }

    pub fn full_hash(&self) -> String {
        digest(&serde_json::to_value(self).unwrap_or_default())
    }
}

fn load_spec(spec: &DatasetSpec, seed: u64) -> Result<LabeledImageSet> {
    Ok(match spec {
        DatasetSpec::Toy(t) => build_toy(t, seed)?,
        DatasetSpec::Directory(p) => load_dataset(p)?,
    })
}

pub fn digest(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("nmae = \"x\"").is_err());
        assert!(RunConfig::parse("[eval]\nsample = 3").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut cfg = RunConfig::parse("seed = 4\ntau = 0.5\nmode = \"glo\"").unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            mode: Some(Method::Scola),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.tau, cfg.mode), (9, 0.5, Method::Scola));
    }

    #[test]
    fn default_prop2_grid_matches_library() {
        assert_eq!(Prop2Grid::default().points(), cola::theory::default_prop2_grid());
    }

    #[test]
    fn perceptual_loss_needs_extractor() {
        let cfg = RunConfig::parse("loss = \"perceptual\"").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn step2_hash_tracks_upstream_but_not_budget() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.step2.optim.epochs += 10;
        assert_eq!(a.step2_hash(), b.step2_hash());
        b.step1.target_sigma *= 2.0;
        assert_ne!(a.step2_hash(), b.step2_hash());
        b.mode = Method::Scola;
        let mut c = b.clone();
        c.step1 = a.step1.clone();
        assert_eq!(b.step2_hash(), c.step2_hash());
    }
}
