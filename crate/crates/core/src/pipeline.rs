//! Stage runners behind the command-line tool.
//!
//! Every stage reads its inputs from the work directory and writes its
//! outputs there, so stages can be rerun one at a time. Artifacts are first
//! written as `<name>.partial` and renamed once complete.
//!
//! ```text
//! <work_dir>/
//!   run_config.txt          resolved configuration
//!   data/manifest.tsv       samples with splits (synthetic / directory sources)
//!   data/features.tsv
//!   stage1.ckpt, stage1_log.tsv
//!   boundaries.txt, diagnostics.txt
//!   fusion.ckpt, fusion_log.tsv
//!   report/metrics.txt, confusion.tsv, predictions.tsv, roc.tsv, pr_id.tsv, pr_ood.tsv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::boundary::{
    boundaries_to_string, fit_boundaries, read_boundaries, spectral_diagnostics, BoundarySet, Decision, OodVerdict,
};
use crate::config::{DataSource, RunConfig, Scorer};
use crate::dataset::{
    featurize_manifest, features_to_string, generate_synthetic, ingest_directory, manifest_to_string, parse_feature_line,
    parse_values, read_features, read_manifest, split_dataset, DatasetManifest, FamilyRole, FeatureTable,
    FeatureVector, Scheme, Split,
};
use crate::error::{Error, Result};
use crate::fusion::{
    assemble_batch, decide, inputs_to_matrix, interpolated_proxies, predict_final_batch, train_fusion, ClassLabel,
    FinalPrediction, FusionInput, FusionLayout,
};
use crate::matrix::{argmax, Matrix};
use crate::metrics::{
    auroc, ar_ood, compute_report, confusion_to_string, pr_curve, report_to_string, roc_curve, write_curve,
    MetricsReport, Positive, ScoredSample, OOD_CLASS_NAME,
};
use crate::nn::{init_model, read_checkpoint, write_checkpoint, Checkpoint, MlpModel, TrainReport};
use crate::seed;

/// Artifact locations under a work directory.
#[derive(Debug, Clone)]
pub struct WorkPaths {
    pub root: PathBuf,
}

impl WorkPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_config(&self) -> PathBuf {
        self.root.join("run_config.txt")
    }
    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.tsv")
    }
    pub fn data_features(&self) -> PathBuf {
        self.root.join("data").join("features.tsv")
    }
    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1.ckpt")
    }
    pub fn stage1_log(&self) -> PathBuf {
        self.root.join("stage1_log.tsv")
    }
    pub fn boundaries(&self) -> PathBuf {
        self.root.join("boundaries.txt")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.txt")
    }
    pub fn fusion(&self) -> PathBuf {
        self.root.join("fusion.ckpt")
    }
    pub fn fusion_log(&self) -> PathBuf {
        self.root.join("fusion_log.tsv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn metrics(&self) -> PathBuf {
        self.report_dir().join("metrics.txt")
    }
    pub fn confusion(&self) -> PathBuf {
        self.report_dir().join("confusion.tsv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.report_dir().join("predictions.tsv")
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes `<path>.partial`, then renames it onto `path`.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = partial_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn paths(cfg: &RunConfig) -> WorkPaths {
    WorkPaths::new(&cfg.work_dir)
}

/// Manifest and feature file consumed by the training stages.
pub fn data_files(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    match cfg.data.source {
        DataSource::Features => (cfg.data.manifest.clone(), cfg.data.features.clone()),
        _ => {
            let p = paths(cfg);
            (p.data_manifest(), p.data_features())
        }
    }
}

/// Manifest plus features aligned with its samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: Vec<FeatureVector>,
    pub scheme: Scheme,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.scheme.dim()
    }

    /// Indices of samples in `split` whose family has a role accepted by `keep`.
    fn select(&self, split: Split, keep: impl Fn(FamilyRole) -> bool) -> Vec<usize> {
        (0..self.manifest.samples.len())
            .filter(|&i| {
                let s = &self.manifest.samples[i];
                s.split == split && self.manifest.role(&s.family).is_some_and(&keep)
            })
            .collect()
    }

    fn matrix(&self, idx: &[usize]) -> Result<Matrix> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.features[i].values()).collect();
        Matrix::from_rows(&rows, self.dim())
    }

    /// Class index, or `K` for OOD and proxy families.
    fn class_of(&self, i: usize) -> usize {
        match self.manifest.role(&self.manifest.samples[i].family) {
            Some(FamilyRole::InDistribution(k)) => k,
            _ => self.manifest.num_classes(),
        }
    }

    fn known(&self, split: Split) -> Result<(Matrix, Vec<usize>)> {
        let idx = self.select(split, |r| matches!(r, FamilyRole::InDistribution(_)));
        Ok((self.matrix(&idx)?, idx.iter().map(|&i| self.class_of(i)).collect()))
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (mp, fp) = data_files(cfg);
    let manifest = read_manifest(&mp)?;
    manifest.validate()?;
    let table = read_features(&fp)?;
    let map = table.to_map();
    let features = manifest
        .samples
        .iter()
        .map(|s| {
            map.get(s.id.as_str()).map(|f| (*f).clone()).ok_or_else(|| Error::ArtifactMismatch {
                artifact: fp.display().to_string(),
                expected: format!("features for sample `{}`", s.id),
                found: "no row".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if manifest.num_classes() < 2 {
        return Err(Error::invalid("need at least two in-distribution families"));
    }
    Ok(Dataset {
        manifest,
        features,
        scheme: table.scheme,
    })
}

fn write_dataset(cfg: &RunConfig, manifest: &DatasetManifest, rows: Vec<(String, FeatureVector)>, scheme: Scheme) -> Result<()> {
    let p = paths(cfg);
    write_artifact(&p.data_manifest(), manifest_to_string(manifest).as_bytes())?;
    let table = FeatureTable { scheme, rows };
    write_artifact(&p.data_features(), features_to_string(&table).as_bytes())
}

fn split_summary(m: &DatasetManifest) -> String {
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for s in &m.samples {
        let e = counts.entry(s.family.as_str()).or_default();
        e[s.split as usize] += 1;
    }
    let mut out = String::new();
    for (f, c) in counts {
        let role = match m.role(f) {
            Some(FamilyRole::InDistribution(k)) => format!("class {k}"),
            Some(FamilyRole::Ood) => "ood".into(),
            Some(FamilyRole::Proxy) => "proxy".into(),
            None => "unlisted".into(),
        };
        let _ = writeln!(out, "  {f} ({role}): train={} val={} test={}", c[0], c[1], c[2]);
    }
    out
}

/// Generates the synthetic family dataset and its split.
pub fn run_synth(cfg: &RunConfig) -> Result<String> {
    let set = generate_synthetic(&cfg.synth, seed::derive(cfg.seed, seed::SYNTH))?;
    let mut manifest = split_dataset(&set.manifest, cfg.split, seed::derive(cfg.seed, seed::SPLIT))?;
    manifest.seed = cfg.seed;
    let rows = manifest
        .samples
        .iter()
        .zip(&set.features)
        .map(|(s, f)| (s.id.clone(), f.clone()))
        .collect();
    write_dataset(cfg, &manifest, rows, Scheme::Synthetic { dim: cfg.synth.dim })?;
    let s = &cfg.synth;
    Ok(format!(
        "synthetic data: {} families ({} in-distribution, {} proxy, {} ood), {} samples each, dim {}, separation {}\n{}",
        s.n_families,
        manifest.num_classes(),
        s.n_proxy_families,
        s.n_ood_families,
        s.samples_per_family,
        s.dim,
        s.centroid_separation,
        split_summary(&manifest)
    ))
}

/// Featurizes `data.dir` (one subdirectory per family) and splits it.
pub fn run_featurize(cfg: &RunConfig) -> Result<String> {
    let outcome = ingest_directory(&cfg.data.dir, &BTreeMap::new())?;
    let mut manifest = outcome.manifest;
    manifest.designate(&cfg.data.ood_families, &cfg.data.proxy_families)?;
    let (features, errors) = featurize_manifest(&manifest, cfg.data.scheme);
    let mut kept = DatasetManifest {
        samples: Vec::new(),
        ..manifest.clone()
    };
    let mut rows = Vec::new();
    for (s, f) in manifest.samples.iter().zip(features) {
        if let Some(f) = f {
            kept.samples.push(s.clone());
            rows.push((s.id.clone(), f));
        }
    }
    let mut split = split_dataset(&kept, cfg.split, seed::derive(cfg.seed, seed::SPLIT))?;
    split.seed = cfg.seed;
    let by_id: BTreeMap<String, FeatureVector> = rows.into_iter().collect();
    let rows = split
        .samples
        .iter()
        .map(|s| (s.id.clone(), by_id[&s.id].clone()))
        .collect();
    write_dataset(cfg, &split, rows, cfg.data.scheme)?;
    let mut out = format!(
        "featurized {} samples with {} ({} unreadable or empty, {} ingest errors)\n",
        split.samples.len(),
        cfg.data.scheme.name(),
        errors.len(),
        outcome.errors.len()
    );
    for e in outcome.errors.iter().chain(&errors) {
        let _ = writeln!(out, "  skipped {}: {}", e.id, e.message);
    }
    out.push_str(&split_summary(&split));
    Ok(out)
}

fn meta_families(meta: &BTreeMap<String, String>) -> Vec<String> {
    meta.get("families")
        .map(|f| f.split(',').map(String::from).collect())
        .unwrap_or_default()
}

fn load_model(path: &Path, kind: &str) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let ckpt = read_checkpoint(&bytes)?;
    let found = ckpt.meta.get("kind").cloned().unwrap_or_default();
    if found != kind {
        return Err(Error::ArtifactMismatch {
            artifact: path.display().to_string(),
            expected: format!("kind={kind}"),
            found: format!("kind={found}"),
        });
    }
    Ok(ckpt)
}

fn check_families(artifact: &Path, expected: &[String], found: &[String]) -> Result<()> {
    if expected != found {
        return Err(Error::ArtifactMismatch {
            artifact: artifact.display().to_string(),
            expected: format!("families={}", expected.join(",")),
            found: format!("families={}", found.join(",")),
        });
    }
    Ok(())
}

fn train_log(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\n");
    for e in &report.epochs {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy);
    }
    out
}

fn best_line(report: &TrainReport) -> String {
    match report.epochs.get(report.best_epoch.wrapping_sub(1)) {
        Some(e) => format!("best epoch {} of {}: val accuracy {}, val loss {}", e.epoch, report.epochs.len(), e.val_accuracy, e.val_loss),
        None => "no epochs run".into(),
    }
}

/// Trains the stage-one classifier on in-distribution train rows.
pub fn run_train(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let k = data.manifest.num_classes();
    let (x, y) = data.known(Split::Train)?;
    let (vx, vy) = data.known(Split::Val)?;
    let init = init_model(&cfg.stage1.mlp(data.dim(), k), seed::derive(cfg.seed, seed::STAGE1_INIT))?;
    let (model, report) = crate::nn::train(&init, &x, &y, &vx, &vy, &cfg.stage1.train_config(seed::derive(cfg.seed, seed::STAGE1_TRAIN)))?;
    let meta = BTreeMap::from([
        ("kind".to_string(), "stage1".to_string()),
        ("families".to_string(), data.manifest.families.join(",")),
        ("scheme".to_string(), data.scheme.name().to_string()),
        ("feature_dim".to_string(), data.dim().to_string()),
    ]);
    let p = paths(cfg);
    write_artifact(&p.stage1(), &write_checkpoint(&Checkpoint { model, meta })?)?;
    write_artifact(&p.stage1_log(), train_log(&report).as_bytes())?;
    Ok(format!("stage 1: {} classes, {} train / {} val rows; {}\n", k, x.rows(), vx.rows(), best_line(&report)))
}

struct Stage1 {
    model: MlpModel,
    families: Vec<String>,
    scheme: Scheme,
}

fn load_stage1(cfg: &RunConfig) -> Result<Stage1> {
    let path = paths(cfg).stage1();
    let ckpt = load_model(&path, "stage1")?;
    let dim = ckpt.model.config.input_dim();
    let name = ckpt.meta.get("scheme").cloned().unwrap_or_default();
    let scheme = Scheme::parse(&name, dim).ok_or_else(|| Error::ArtifactMismatch {
        artifact: path.display().to_string(),
        expected: "a feature scheme".into(),
        found: format!("scheme={name}"),
    })?;
    Ok(Stage1 {
        families: meta_families(&ckpt.meta),
        model: ckpt.model,
        scheme,
    })
}

fn rename_family(err: Error, families: &[String]) -> Error {
    let name = |f: &str| {
        f.strip_prefix("class ")
            .and_then(|k| k.parse::<usize>().ok())
            .and_then(|k| families.get(k).cloned())
            .unwrap_or_else(|| f.to_string())
    };
    match err {
        Error::DegenerateFamily { family } => Error::DegenerateFamily { family: name(&family) },
        Error::TooFewSamples { family, count, required } => Error::TooFewSamples {
            family: name(&family),
            count,
            required,
        },
        e => e,
    }
}

fn diagnostics_text(cfg: &RunConfig, emb: &Matrix, labels: &[usize], families: &[String]) -> String {
    let n = emb.rows();
    let m = n.min(cfg.boundary.diagnostic_points);
    if m < 3 {
        return "status=disabled\n".into();
    }
    let idx: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    let sub = emb.select_rows(&idx);
    let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let knn = cfg.boundary.knn.clamp(1, m - 1);
    match spectral_diagnostics(&sub, &sub_labels, families.len(), knn) {
        Ok(r) => {
            let mut out = format!(
                "status=ok\npoints={m}\nk_neighbors={}\nedges={}\nnear_zero_eigenvalues={}\nfamilies={}\n",
                r.k_neighbors,
                r.n_edges,
                r.near_zero,
                families.len()
            );
            let low: Vec<String> = r.eigenvalues.iter().take(families.len() + 5).map(f64::to_string).collect();
            let _ = writeln!(out, "lowest_eigenvalues={}", low.join(","));
            for (f, c) in families.iter().zip(&r.conductance) {
                let v = c.map_or("undefined".to_string(), |c| c.to_string());
                let _ = writeln!(out, "conductance.{f}={v}");
            }
            out
        }
        Err(e) => format!("status=unavailable\nreason={e}\n"),
    }
}

/// Fits per-family boundaries on stage-one train embeddings and records the
/// spectral cluster diagnostic.
pub fn run_fit_boundaries(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let s1 = load_stage1(cfg)?;
    let p = paths(cfg);
    check_families(&p.stage1(), &data.manifest.families, &s1.families)?;
    let (x, y) = data.known(Split::Train)?;
    let emb = s1.model.embed_batch(&x)?;
    let mut set = fit_boundaries(&emb, &y, s1.families.len()).map_err(|e| rename_family(e, &s1.families))?;
    set.covariance = cfg.boundary.covariance;
    set.gate = cfg.boundary.gate;
    write_artifact(&p.boundaries(), boundaries_to_string(&set).as_bytes())?;
    let diag = diagnostics_text(cfg, &emb, &y, &s1.families);
    write_artifact(&p.diagnostics(), diag.as_bytes())?;
    let mut out = format!("boundaries: {} families in {} dimensions\n", set.num_classes(), set.embedding_dim);
    for (f, b) in s1.families.iter().zip(&set.boundaries) {
        let _ = writeln!(
            out,
            "  {f}: n={} sigma={:.4} dist_mean={:.4} dist_std={:.4}",
            b.n_samples, b.sigma_iso, b.dist_mean, b.dist_std
        );
    }
    if let Some(line) = diag.lines().find(|l| l.starts_with("near_zero_eigenvalues")) {
        let _ = writeln!(out, "  diagnostic {line}");
    }
    Ok(out)
}

fn load_boundaries(cfg: &RunConfig, embedding_dim: usize, k: usize) -> Result<BoundarySet> {
    let path = paths(cfg).boundaries();
    let mut set = read_boundaries(&path)?;
    if set.embedding_dim != embedding_dim || set.num_classes() != k {
        return Err(Error::ArtifactMismatch {
            artifact: path.display().to_string(),
            expected: format!("K={k} dim={embedding_dim}"),
            found: format!("K={} dim={}", set.num_classes(), set.embedding_dim),
        });
    }
    // the run configuration decides the gate at scoring time
    set.gate = cfg.boundary.gate;
    set.covariance = cfg.boundary.covariance;
    Ok(set)
}

fn fusion_rows(x: &Matrix, stage1: &MlpModel, boundaries: &BoundarySet) -> Result<Vec<FusionInput>> {
    Ok(assemble_batch(x, stage1, boundaries)?.into_iter().map(|(i, _)| i).collect())
}

/// Trains the fusion network on in-distribution rows plus proxy OOD rows.
pub fn run_train_fusion(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let s1 = load_stage1(cfg)?;
    let p = paths(cfg);
    check_families(&p.stage1(), &data.manifest.families, &s1.families)?;
    let k = s1.families.len();
    let boundaries = load_boundaries(cfg, s1.model.config.embedding_dim(), k)?;

    let proxy_seed = seed::derive(cfg.seed, seed::PROXY);
    let mut sets = Vec::new();
    let mut proxy_note = String::new();
    for (n, split) in [Split::Train, Split::Val].into_iter().enumerate() {
        let (x, mut y) = data.known(split)?;
        let proxy_idx = data.select(split, |r| r == FamilyRole::Proxy);
        let proxies = if !data.manifest.proxy_families.is_empty() {
            data.matrix(&proxy_idx)?
        } else {
            let count = if n == 0 {
                cfg.fusion_proxy_count
            } else {
                let train_rows = data.known(Split::Train)?.0.rows().max(1);
                (cfg.fusion_proxy_count * x.rows()).div_ceil(train_rows)
            };
            interpolated_proxies(&x, &y, count, seed::derive_indexed(proxy_seed, n as u64))?
        };
        let _ = write!(proxy_note, "{}{} {} proxy rows", if n == 0 { "" } else { ", " }, proxies.rows(), split.as_str());
        let mut inputs = fusion_rows(&x, &s1.model, &boundaries)?;
        inputs.extend(fusion_rows(&proxies, &s1.model, &boundaries)?);
        y.extend(std::iter::repeat_n(k, proxies.rows()));
        sets.push((inputs_to_matrix(&inputs)?, y));
    }
    let layout = FusionLayout {
        n_classes: k,
        feature_dim: data.dim(),
    };
    let init = init_model(&cfg.fusion.mlp(layout.input_dim(), k + 1), seed::derive(cfg.seed, seed::FUSION_INIT))?;
    let tc = cfg.fusion.train_config(seed::derive(cfg.seed, seed::FUSION_TRAIN));
    let (model, report) = train_fusion(&init, &sets[0].0, &sets[0].1, &sets[1].0, &sets[1].1, &tc)?;
    let mut meta = layout.to_meta();
    meta.insert("kind".into(), "fusion".into());
    meta.insert("families".into(), s1.families.join(","));
    write_artifact(&p.fusion(), &write_checkpoint(&Checkpoint { model, meta })?)?;
    write_artifact(&p.fusion_log(), train_log(&report).as_bytes())?;
    Ok(format!(
        "fusion: input {} -> {} classes; {}; {}\n",
        layout.input_dim(),
        k + 1,
        proxy_note,
        best_line(&report)
    ))
}

struct Stack {
    stage1: Stage1,
    boundaries: BoundarySet,
    fusion: MlpModel,
}

fn load_stack(cfg: &RunConfig) -> Result<Stack> {
    let stage1 = load_stage1(cfg)?;
    let k = stage1.families.len();
    let boundaries = load_boundaries(cfg, stage1.model.config.embedding_dim(), k)?;
    let path = paths(cfg).fusion();
    let ckpt = load_model(&path, "fusion")?;
    check_families(&path, &stage1.families, &meta_families(&ckpt.meta))?;
    let layout = FusionLayout::from_meta(&ckpt.meta)?;
    let expected = FusionLayout {
        n_classes: k,
        feature_dim: stage1.model.config.input_dim(),
    };
    if layout != expected || ckpt.model.config.input_dim() != layout.input_dim() {
        return Err(Error::ArtifactMismatch {
            artifact: path.display().to_string(),
            expected: format!("K={} d_in={}", expected.n_classes, expected.feature_dim),
            found: format!("K={} d_in={}", layout.n_classes, layout.feature_dim),
        });
    }
    Ok(Stack {
        stage1,
        boundaries,
        fusion: ckpt.model,
    })
}

/// Everything the stack says about one sample.
struct Scored {
    stage1_probs: Vec<f64>,
    verdict: OodVerdict,
    fusion: FinalPrediction,
    final_label: ClassLabel,
}

fn score_rows(cfg: &RunConfig, stack: &Stack, x: &Matrix) -> Result<Vec<Scored>> {
    let assembled = assemble_batch(x, &stack.stage1.model, &stack.boundaries)?;
    let inputs: Vec<FusionInput> = assembled.iter().map(|(i, _)| i.clone()).collect();
    let finals = predict_final_batch(&inputs, &stack.fusion)?;
    Ok(assembled
        .into_iter()
        .zip(finals)
        .map(|((input, verdict), fusion)| Scored {
            final_label: decide(&verdict, &fusion, cfg.policy),
            stage1_probs: input.stage1_probs,
            verdict,
            fusion,
        })
        .collect())
}

fn label_name(label: ClassLabel, families: &[String]) -> String {
    match label {
        ClassLabel::Known(k) => families[k].clone(),
        ClassLabel::Ood => OOD_CLASS_NAME.to_string(),
    }
}

/// Scores the test split and writes the metrics report, confusion grid,
/// per-sample predictions and curves.
pub fn run_evaluate(cfg: &RunConfig) -> Result<(MetricsReport, String)> {
    let data = load_dataset(cfg)?;
    let stack = load_stack(cfg)?;
    let families = &stack.stage1.families;
    check_families(&paths(cfg).stage1(), &data.manifest.families, families)?;
    let k = families.len();
    let idx = data.select(Split::Test, |r| r != FamilyRole::Proxy);
    let x = data.matrix(&idx)?;
    let scored = score_rows(cfg, &stack, &x)?;

    let mut samples = Vec::with_capacity(idx.len());
    let mut gate_samples = Vec::with_capacity(idx.len());
    let mut stage1_gate_correct = 0usize;
    let mut predictions = String::from(
        "id\tfamily\ttrue\tstage1\tstage1_prob\tmin_abs_z\tgate\tnearest\tfusion\tood_score\tfinal\n",
    );
    for (&i, s) in idx.iter().zip(&scored) {
        let rec = &data.manifest.samples[i];
        let true_class = data.class_of(i);
        let is_id = true_class < k;
        let score = match cfg.metrics.scorer {
            Scorer::Fusion => 1.0 - s.fusion.ood_score,
            Scorer::Gate => -s.verdict.min_abs_z,
        };
        let sample = ScoredSample {
            id: rec.id.clone(),
            score,
            is_id,
            predicted: s.final_label.index(k),
            true_class,
            true_family: rec.family.clone(),
            class_probs: s.fusion.class_probs.clone(),
        };
        let top = argmax(&s.stage1_probs);
        let gate_label = match s.verdict.decision {
            Decision::InDistribution => top,
            Decision::OutOfDistribution => k,
        };
        stage1_gate_correct += usize::from(gate_label == true_class);
        gate_samples.push(ScoredSample {
            score: -s.verdict.min_abs_z,
            predicted: gate_label,
            class_probs: Vec::new(),
            ..sample.clone()
        });
        let _ = writeln!(
            predictions,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            rec.id,
            rec.family,
            label_name(ClassLabel::from_index(true_class, k), families),
            families[top],
            s.stage1_probs[top],
            s.verdict.min_abs_z,
            s.verdict.decision.as_str(),
            families[s.verdict.nearest_class],
            label_name(s.fusion.predicted, families),
            s.fusion.ood_score,
            label_name(s.final_label, families)
        );
        samples.push(sample);
    }

    let mut report = compute_report(
        &samples,
        families,
        cfg.metrics.scorer.as_str(),
        (cfg.metrics.tpr_target, cfg.metrics.fpr_target),
    )?;
    let n = samples.len() as f64;
    report.extras.insert("policy".into(), cfg.policy.as_str().into());
    report.extras.insert("gate.auroc".into(), auroc(&gate_samples)?.to_string());
    report.extras.insert("gate.ar_ood".into(), ar_ood(&gate_samples, k)?.to_string());
    report
        .extras
        .insert("gate.stage1_acc".into(), (stage1_gate_correct as f64 / n).to_string());
    let fusion_only = samples
        .iter()
        .zip(&scored)
        .filter(|(s, sc)| sc.fusion.predicted.index(k) == s.true_class)
        .count();
    report.extras.insert("fusion.acc".into(), (fusion_only as f64 / n).to_string());

    let p = paths(cfg);
    write_artifact(&p.metrics(), report_to_string(&report).as_bytes())?;
    write_artifact(&p.confusion(), confusion_to_string(&report).as_bytes())?;
    write_artifact(&p.predictions(), predictions.as_bytes())?;
    if cfg.metrics.curves {
        let dir = p.report_dir();
        write_curve(&dir.join("roc.tsv"), ("fpr", "tpr"), &roc_curve(&samples))?;
        write_curve(&dir.join("pr_id.tsv"), ("recall", "precision"), &pr_curve(&samples, Positive::Id))?;
        write_curve(&dir.join("pr_ood.tsv"), ("recall", "precision"), &pr_curve(&samples, Positive::Ood))?;
    }
    let summary = format!(
        "evaluation on {} test samples ({} policy, {} scorer):\n  auroc={} ap_id={} ap_ood={} fpr_at_tpr95={} tpr_at_fpr05={} ar_ood={} acc={}\n{}",
        samples.len(),
        cfg.policy.as_str(),
        cfg.metrics.scorer.as_str(),
        report.auroc,
        report.ap_id,
        report.ap_ood,
        report.fpr_at_tpr95,
        report.tpr_at_fpr05,
        report.ar_ood,
        report.acc,
        confusion_to_string(&report)
    );
    Ok((report, summary))
}

/// Samples handed to `score`.
#[derive(Debug, Clone)]
pub enum ScoreInput {
    /// A feature file with a `dim=… scheme=…` header.
    File(PathBuf),
    /// One `id<TAB>v1,…,vd` line, or bare comma-separated values.
    Line(String),
}

/// Scores samples against the trained stack; one output line per sample.
pub fn run_score(cfg: &RunConfig, input: &ScoreInput) -> Result<String> {
    let stack = load_stack(cfg)?;
    let scheme = stack.stage1.scheme;
    let rows: Vec<(String, FeatureVector)> = match input {
        ScoreInput::File(path) => {
            let table = read_features(path)?;
            if table.dim() != scheme.dim() {
                return Err(Error::DimensionMismatch {
                    stage: "score input",
                    expected: scheme.dim(),
                    found: table.dim(),
                });
            }
            table.rows
        }
        ScoreInput::Line(line) => {
            let origin = Path::new("<line>");
            let line = line.trim_end_matches(['\n', '\r']);
            if line.contains('\t') {
                vec![parse_feature_line(origin, 1, line, scheme)?]
            } else {
                let values = parse_values(line).map_err(|m| Error::Parse {
                    path: origin.into(),
                    line: 1,
                    message: m,
                })?;
                let fv = FeatureVector::new(values, scheme).map_err(|e| Error::Parse {
                    path: origin.into(),
                    line: 1,
                    message: e.to_string(),
                })?;
                vec![("input".to_string(), fv)]
            }
        }
    };
    if rows.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let dim = scheme.dim();
    let x = Matrix::from_rows(&rows.iter().map(|(_, f)| f.values()).collect::<Vec<_>>(), dim)?;
    let scored = score_rows(cfg, &stack, &x)?;
    let families = &stack.stage1.families;
    let mut out = String::new();
    for ((id, _), s) in rows.iter().zip(&scored) {
        let top = argmax(&s.stage1_probs);
        let z: Vec<String> = s.verdict.z_scores.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "id={id}\tstage1={}\tstage1_prob={}\tz={}\tgate={}\tnearest={}\tsuspicion={}\tfusion={}\tood_score={}\tfinal={}",
            families[top],
            s.stage1_probs[top],
            z.join(","),
            s.verdict.decision.as_str(),
            families[s.verdict.nearest_class],
            s.verdict.suspicion.as_str(),
            label_name(s.fusion.predicted, families),
            s.fusion.ood_score,
            label_name(s.final_label, families)
        );
    }
    Ok(out)
}

/// Runs every stage in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(MetricsReport, String)> {
    cfg.validate()?;
    write_artifact(&paths(cfg).run_config(), cfg.to_text().as_bytes())?;
    let mut out = String::new();
    match cfg.data.source {
        DataSource::Synthetic => out.push_str(&run_synth(cfg).map_err(|e| e.in_stage("synth"))?),
        DataSource::Directory => out.push_str(&run_featurize(cfg).map_err(|e| e.in_stage("featurize"))?),
        DataSource::Features => {
            let (m, f) = data_files(cfg);
            for p in [m, f] {
                if !p.is_file() {
                    return Err(Error::MissingFile(p).in_stage("load data"));
                }
            }
        }
    }
    out.push_str(&run_train(cfg).map_err(|e| e.in_stage("train"))?);
    out.push_str(&run_fit_boundaries(cfg).map_err(|e| e.in_stage("fit-boundaries"))?);
    out.push_str(&run_train_fusion(cfg).map_err(|e| e.in_stage("train-fusion"))?);
    let (report, summary) = run_evaluate(cfg).map_err(|e| e.in_stage("evaluate"))?;
    out.push_str(&summary);
    Ok((report, out))
}
