//! Run configuration: a flat text file of `section.key = value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`RunConfig::default`]); values from the file replace the
//! defaults, and command-line flags replace file values. Unknown keys are
//! errors. [`RunConfig::to_text`] prints every key with its current value.

use std::path::{Path, PathBuf};

use crate::boundary::{BandMode, CovarianceMode, GateConfig};
use crate::dataset::{read_text, Scheme, SplitRatios, SynthSpec};
use crate::error::{Error, Result};
use crate::fusion::DecisionPolicy;
use crate::nn::{LrSchedule, MlpConfig, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Generate families from `synth.*`.
    Synthetic,
    /// Featurize files under `data.dir` (one subdirectory per family).
    Directory,
    /// Use an existing manifest and feature file.
    Features,
}

impl DataSource {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(Self::Synthetic),
            "directory" => Some(Self::Directory),
            "features" => Some(Self::Features),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Directory => "directory",
            Self::Features => "features",
        }
    }
}

/// Which score ranks samples for AUROC/AP/operating points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    /// `1 − ood_score` of the fusion output.
    Fusion,
    /// `−min_k |z_k|` from the gate.
    Gate,
}

impl Scorer {
    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Fusion => "fusion",
            Scorer::Gate => "gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub scheme: Scheme,
    pub ood_families: Vec<String>,
    pub proxy_families: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batchnorm: bool,
    /// Seed is filled in per stage from the run seed.
    pub train: TrainConfig,
    /// Step decay when true, constant rate otherwise.
    pub step_decay: bool,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl NetworkConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_schedule: if self.step_decay {
                LrSchedule::StepDecay {
                    factor: self.decay_factor,
                    every: self.decay_every,
                }
            } else {
                LrSchedule::Constant
            },
            seed,
            ..self.train.clone()
        }
    }

    pub fn mlp(&self, input_dim: usize, outputs: usize) -> MlpConfig {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(outputs);
        MlpConfig {
            layer_dims: dims,
            dropout_rate: self.dropout,
            use_batchnorm: self.batchnorm,
            ..MlpConfig::new(vec![])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConfig {
    pub gate: GateConfig,
    pub covariance: CovarianceMode,
    /// Neighbours per point in the diagnostic kNN graph.
    pub knn: usize,
    /// Cap on points fed to the spectral diagnostic; 0 disables it.
    pub diagnostic_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsConfig {
    pub scorer: Scorer,
    pub tpr_target: f64,
    pub fpr_target: f64,
    pub curves: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitRatios,
    pub synth: SynthSpec,
    pub stage1: NetworkConfig,
    pub boundary: BoundaryConfig,
    pub fusion: NetworkConfig,
    /// Interpolated OOD rows added to fusion training when the data has no
    /// proxy families.
    pub fusion_proxy_count: usize,
    pub policy: DecisionPolicy,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 7,
            work_dir: PathBuf::from("work"),
            data: DataConfig {
                source: DataSource::Synthetic,
                dir: PathBuf::from("data"),
                manifest: PathBuf::from("manifest.tsv"),
                features: PathBuf::from("features.tsv"),
                scheme: Scheme::ByteImage32,
                ood_families: Vec::new(),
                proxy_families: Vec::new(),
            },
            split: SplitRatios::default(),
            synth: SynthSpec {
                n_families: 9,
                dim: 32,
                samples_per_family: 200,
                centroid_separation: 10.0,
                intra_family_sigma: 1.0,
                n_ood_families: 2,
                n_proxy_families: 2,
            },
            stage1: NetworkConfig {
                hidden: vec![128, 64],
                dropout: 0.1,
                batchnorm: true,
                train: train.clone(),
                step_decay: true,
                decay_factor: 0.5,
                decay_every: 10,
            },
            boundary: BoundaryConfig {
                gate: GateConfig::default(),
                covariance: CovarianceMode::PerClass,
                knn: 10,
                diagnostic_points: 400,
            },
            fusion: NetworkConfig {
                hidden: vec![64],
                dropout: 0.0,
                batchnorm: true,
                train,
                step_decay: true,
                decay_factor: 0.5,
                decay_every: 10,
            },
            fusion_proxy_count: 200,
            policy: DecisionPolicy::FusionPriority,
            metrics: MetricsConfig {
                scorer: Scorer::Fusion,
                tpr_target: 0.95,
                fpr_target: 0.05,
                curves: true,
            },
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::invalid(format!("invalid value `{value}` for `{key}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn dims(key: &str, value: &str) -> Result<Vec<usize>> {
    list(value).iter().map(|v| num(key, v)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn set_network(n: &mut NetworkConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    let t = &mut n.train;
    match field {
        "hidden" => n.hidden = dims(key, value)?,
        "dropout" => n.dropout = num(key, value)?,
        "batchnorm" => n.batchnorm = flag(key, value)?,
        "optimizer" => {
            t.optimizer = match value {
                "adam" => Optimizer::Adam,
                "sgd" => Optimizer::Sgd,
                _ => return Err(bad(key, value)),
            }
        }
        "lr" => t.base_lr = num(key, value)?,
        "schedule" => {
            n.step_decay = match value {
                "step" => true,
                "constant" => false,
                _ => return Err(bad(key, value)),
            }
        }
        "decay_factor" => n.decay_factor = num(key, value)?,
        "decay_every" => n.decay_every = num(key, value)?,
        "epochs" => t.epochs = num(key, value)?,
        "batch_size" => t.batch_size = num(key, value)?,
        "beta1" => t.beta1 = num(key, value)?,
        "beta2" => t.beta2 = num(key, value)?,
        "adam_eps" => t.adam_eps = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn network_lines(prefix: &str, n: &NetworkConfig) -> Vec<(String, String)> {
    let t = &n.train;
    let optimizer = match t.optimizer {
        Optimizer::Adam => "adam",
        Optimizer::Sgd => "sgd",
    };
    [
        ("hidden", join(&n.hidden)),
        ("dropout", n.dropout.to_string()),
        ("batchnorm", n.batchnorm.to_string()),
        ("optimizer", optimizer.to_string()),
        ("lr", t.base_lr.to_string()),
        ("schedule", if n.step_decay { "step" } else { "constant" }.to_string()),
        ("decay_factor", n.decay_factor.to_string()),
        ("decay_every", n.decay_every.to_string()),
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("adam_eps", t.adam_eps.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{prefix}.{k}"), v))
    .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or((key, ""));
        let known = match (section, field) {
            ("seed", "") => {
                self.seed = num(key, value)?;
                true
            }
            ("work_dir", "") => {
                self.work_dir = PathBuf::from(value);
                true
            }
            ("data", f) => {
                let d = &mut self.data;
                match f {
                    "source" => d.source = DataSource::parse(value).ok_or_else(|| bad(key, value))?,
                    "dir" => d.dir = PathBuf::from(value),
                    "manifest" => d.manifest = PathBuf::from(value),
                    "features" => d.features = PathBuf::from(value),
                    "scheme" => {
                        d.scheme = match value {
                            "byte_image_32x32" => Scheme::ByteImage32,
                            "byte_histogram_256" => Scheme::ByteHistogram256,
                            _ => return Err(bad(key, value)),
                        }
                    }
                    "ood_families" => d.ood_families = list(value),
                    "proxy_families" => d.proxy_families = list(value),
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("split", f) => {
                match f {
                    "train" => self.split.train = num(key, value)?,
                    "val" => self.split.val = num(key, value)?,
                    "test" => self.split.test = num(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("synth", f) => {
                let s = &mut self.synth;
                match f {
                    "n_families" => s.n_families = num(key, value)?,
                    "dim" => s.dim = num(key, value)?,
                    "samples_per_family" => s.samples_per_family = num(key, value)?,
                    "centroid_separation" => s.centroid_separation = num(key, value)?,
                    "intra_family_sigma" => s.intra_family_sigma = num(key, value)?,
                    "n_ood_families" => s.n_ood_families = num(key, value)?,
                    "n_proxy_families" => s.n_proxy_families = num(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("stage1", f) => set_network(&mut self.stage1, key, f, value)?,
            ("fusion", "proxy_count") => {
                self.fusion_proxy_count = num(key, value)?;
                true
            }
            ("fusion", f) => set_network(&mut self.fusion, key, f, value)?,
            ("boundary", f) => {
                let b = &mut self.boundary;
                match f {
                    "band" => b.gate.band = num(key, value)?,
                    "one_sided" => {
                        b.gate.mode = if flag(key, value)? {
                            BandMode::OneSided
                        } else {
                            BandMode::Symmetric
                        }
                    }
                    "covariance" => {
                        b.covariance = match value {
                            "per_class" => CovarianceMode::PerClass,
                            "shared" => CovarianceMode::Shared,
                            _ => return Err(bad(key, value)),
                        }
                    }
                    "knn" => b.knn = num(key, value)?,
                    "diagnostic_points" => b.diagnostic_points = num(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            ("decision", "policy") => {
                self.policy = DecisionPolicy::parse(value).ok_or_else(|| bad(key, value))?;
                true
            }
            ("metrics", f) => {
                let m = &mut self.metrics;
                match f {
                    "scorer" => {
                        m.scorer = match value {
                            "fusion" => Scorer::Fusion,
                            "gate" => Scorer::Gate,
                            _ => return Err(bad(key, value)),
                        }
                    }
                    "tpr_target" => m.tpr_target = num(key, value)?,
                    "fpr_target" => m.fpr_target = num(key, value)?,
                    "curves" => m.curves = flag(key, value)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            _ => false,
        };
        if !known {
            return Err(unknown(key));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&read_text(path)?, path)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.boundary.gate.validate()?;
        for (name, n) in [("stage1", &self.stage1), ("fusion", &self.fusion)] {
            if n.train.epochs == 0 && name == "stage1" {
                return Err(Error::invalid("stage1.epochs must be at least 1"));
            }
            if !(0.0..1.0).contains(&n.dropout) {
                return Err(Error::invalid(format!("{name}.dropout must be in [0, 1)")));
            }
            if n.step_decay && (n.decay_every == 0 || !(n.decay_factor > 0.0)) {
                return Err(Error::invalid(format!("{name} decay settings must be positive")));
            }
            if n.train.batch_size == 0 || !(n.train.base_lr >= 0.0) {
                return Err(Error::invalid(format!("{name} batch size and learning rate must be positive")));
            }
            if n.hidden.contains(&0) {
                return Err(Error::invalid(format!("{name}.hidden widths must be positive")));
            }
        }
        if self.stage1.hidden.is_empty() {
            return Err(Error::invalid("stage1.hidden needs at least one layer to provide embeddings"));
        }
        for t in [self.metrics.tpr_target, self.metrics.fpr_target] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid("metric targets must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Every key with its value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let s = &self.synth;
        let b = &self.boundary;
        let m = &self.metrics;
        let mut lines: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("work_dir".into(), self.work_dir.display().to_string()),
            ("data.source".into(), d.source.as_str().into()),
            ("data.dir".into(), d.dir.display().to_string()),
            ("data.manifest".into(), d.manifest.display().to_string()),
            ("data.features".into(), d.features.display().to_string()),
            ("data.scheme".into(), d.scheme.name().into()),
            ("data.ood_families".into(), d.ood_families.join(",")),
            ("data.proxy_families".into(), d.proxy_families.join(",")),
            ("split.train".into(), self.split.train.to_string()),
            ("split.val".into(), self.split.val.to_string()),
            ("split.test".into(), self.split.test.to_string()),
            ("synth.n_families".into(), s.n_families.to_string()),
            ("synth.dim".into(), s.dim.to_string()),
            ("synth.samples_per_family".into(), s.samples_per_family.to_string()),
            ("synth.centroid_separation".into(), s.centroid_separation.to_string()),
            ("synth.intra_family_sigma".into(), s.intra_family_sigma.to_string()),
            ("synth.n_ood_families".into(), s.n_ood_families.to_string()),
            ("synth.n_proxy_families".into(), s.n_proxy_families.to_string()),
        ];
        lines.extend(network_lines("stage1", &self.stage1));
        lines.extend([
            ("boundary.band".into(), b.gate.band.to_string()),
            ("boundary.one_sided".into(), (b.gate.mode == BandMode::OneSided).to_string()),
            (
                "boundary.covariance".into(),
                match b.covariance {
                    CovarianceMode::PerClass => "per_class",
                    CovarianceMode::Shared => "shared",
                }
                .into(),
            ),
            ("boundary.knn".into(), b.knn.to_string()),
            ("boundary.diagnostic_points".into(), b.diagnostic_points.to_string()),
        ]);
        lines.extend(network_lines("fusion", &self.fusion));
        lines.extend([
            ("fusion.proxy_count".into(), self.fusion_proxy_count.to_string()),
            ("decision.policy".into(), self.policy.as_str().into()),
            ("metrics.scorer".into(), m.scorer.as_str().into()),
            ("metrics.tpr_target".into(), m.tpr_target.to_string()),
            ("metrics.fpr_target".into(), m.fpr_target.to_string()),
            ("metrics.curves".into(), m.curves.to_string()),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn unknown(key: &str) -> Error {
    Error::invalid(format!("unknown configuration key `{key}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = RunConfig::default();
        c.seed = 99;
        c.stage1.hidden = vec![10, 5];
        c.fusion.step_decay = false;
        c.boundary.gate.mode = BandMode::OneSided;
        c.data.ood_families = vec!["a".into(), "b".into()];
        let text = c.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text, Path::new("cfg")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn file_values_override_defaults() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\n\nseed = 3\nstage1.epochs=4\nboundary.band = 1.5\ndecision.policy = gate_priority\n",
            Path::new("cfg"),
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.stage1.train.epochs, 4);
        assert_eq!(c.boundary.gate.band, 1.5);
        assert_eq!(c.policy, DecisionPolicy::GatePriority);
        c.validate().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 1\nstage1.nonsense = 2\n", Path::new("cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = c.apply_text("seed = x\n", Path::new("cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = c.apply_text("no equals sign\n", Path::new("cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(err.is_user_error());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.split.test = 0.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.stage1.hidden.clear();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.boundary.gate.band = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_networks() {
        let c = RunConfig::default();
        assert_eq!(c.stage1.mlp(32, 5).layer_dims, vec![32, 128, 64, 5]);
        assert_eq!(c.fusion.mlp(48, 6).layer_dims, vec![48, 64, 6]);
    }
}
