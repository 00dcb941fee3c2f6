//! Second-stage network over the gate output, the stage-one probabilities
//! and the raw features, predicting K known families plus an OOD class.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary::{classify_sample, BoundarySet, Decision, OodVerdict};
use crate::dataset::FeatureVector;
use crate::error::{Error, Result};
use crate::matrix::{argmax, softmax, Matrix};
use crate::nn::{self, MlpConfig, MlpModel, TrainConfig, TrainReport};

/// Bound applied to every z-score before it enters the fusion input.
pub const Z_CLAMP: f64 = 10.0;

pub const FIELD_ORDER: &str = "stage1_probs,zscore_vector,verdict_onehot,raw_features";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClassLabel {
    Known(usize),
    Ood,
}

impl ClassLabel {
    /// Column index among K+1 outputs.
    pub fn index(self, n_classes: usize) -> usize {
        match self {
            ClassLabel::Known(k) => k,
            ClassLabel::Ood => n_classes,
        }
    }

    pub fn from_index(i: usize, n_classes: usize) -> Self {
        if i >= n_classes {
            ClassLabel::Ood
        } else {
            ClassLabel::Known(i)
        }
    }
}

/// Fusion input dimensions; stored in fusion checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionLayout {
    pub n_classes: usize,
    pub feature_dim: usize,
}

impl FusionLayout {
    pub fn input_dim(&self) -> usize {
        3 * self.n_classes + 1 + self.feature_dim
    }

    /// `[2K+(K+1)+d_in, hidden..., K+1]`.
    pub fn model_config(&self, hidden: &[usize]) -> MlpConfig {
        let mut dims = vec![self.input_dim()];
        dims.extend_from_slice(hidden);
        dims.push(self.n_classes + 1);
        MlpConfig::new(dims)
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("fusion.n_classes".to_string(), self.n_classes.to_string()),
            ("fusion.feature_dim".to_string(), self.feature_dim.to_string()),
            ("fusion.field_order".to_string(), FIELD_ORDER.to_string()),
        ])
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k).ok_or_else(|| Error::ArtifactMismatch {
                artifact: "fusion checkpoint".into(),
                expected: format!("header key {k}"),
                found: "nothing".into(),
            })
        };
        let order = get("fusion.field_order")?;
        if order != FIELD_ORDER {
            return Err(Error::ArtifactMismatch {
                artifact: "fusion checkpoint".into(),
                expected: FIELD_ORDER.into(),
                found: order.clone(),
            });
        }
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("fusion checkpoint key {k} is not a count")))
        };
        Ok(Self {
            n_classes: num("fusion.n_classes")?,
            feature_dim: num("fusion.feature_dim")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub stage1_probs: Vec<f64>,
    /// Clamped to ±[`Z_CLAMP`].
    pub zscore_vector: Vec<f64>,
    /// One-hot over K+1; index K when the gate rejects.
    pub verdict_onehot: Vec<f64>,
    pub raw_features: Vec<f64>,
}

impl FusionInput {
    pub fn from_parts(stage1_probs: Vec<f64>, verdict: &OodVerdict, raw_features: Vec<f64>) -> Result<Self> {
        let k = stage1_probs.len();
        if verdict.z_scores.len() != k {
            return Err(Error::DimensionMismatch {
                stage: "fusion z-scores",
                expected: k,
                found: verdict.z_scores.len(),
            });
        }
        let sum: f64 = stage1_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("stage-one probabilities sum to {sum}")));
        }
        let mut verdict_onehot = vec![0.0; k + 1];
        let hot = match verdict.decision {
            Decision::InDistribution => verdict.nearest_class,
            Decision::OutOfDistribution => k,
        };
        verdict_onehot[hot] = 1.0;
        Ok(Self {
            stage1_probs,
            zscore_vector: verdict.z_scores.iter().map(|z| z.clamp(-Z_CLAMP, Z_CLAMP)).collect(),
            verdict_onehot,
            raw_features,
        })
    }

    pub fn layout(&self) -> FusionLayout {
        FusionLayout {
            n_classes: self.stage1_probs.len(),
            feature_dim: self.raw_features.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.layout().input_dim()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Concatenation in [`FIELD_ORDER`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.stage1_probs);
        v.extend_from_slice(&self.zscore_vector);
        v.extend_from_slice(&self.verdict_onehot);
        v.extend_from_slice(&self.raw_features);
        v
    }
}

fn check_stack(input_dim: usize, stage1: &MlpModel, boundaries: &BoundarySet) -> Result<()> {
    if input_dim != stage1.config.input_dim() {
        return Err(Error::DimensionMismatch {
            stage: "stage-1 input",
            expected: stage1.config.input_dim(),
            found: input_dim,
        });
    }
    if stage1.config.embedding_dim() != boundaries.embedding_dim {
        return Err(Error::DimensionMismatch {
            stage: "boundary embedding",
            expected: boundaries.embedding_dim,
            found: stage1.config.embedding_dim(),
        });
    }
    if stage1.config.num_outputs() != boundaries.num_classes() {
        return Err(Error::DimensionMismatch {
            stage: "stage-1 classes",
            expected: boundaries.num_classes(),
            found: stage1.config.num_outputs(),
        });
    }
    Ok(())
}

/// Runs stage one and the gate on one sample and packs the fusion input.
pub fn assemble_fusion_input(
    feature: &FeatureVector,
    stage1: &MlpModel,
    boundaries: &BoundarySet,
) -> Result<(FusionInput, OodVerdict)> {
    let batch = Matrix::from_rows(&[feature.values()], feature.len())?;
    Ok(assemble_batch(&batch, stage1, boundaries)?.remove(0))
}

/// Row-wise [`assemble_fusion_input`]; each row's result is independent of
/// the rest of the batch.
pub fn assemble_batch(
    features: &Matrix,
    stage1: &MlpModel,
    boundaries: &BoundarySet,
) -> Result<Vec<(FusionInput, OodVerdict)>> {
    check_stack(features.cols(), stage1, boundaries)?;
    let (logits, cache) = stage1.forward(features, nn::Mode::Eval, 0)?;
    let embeddings = cache.penultimate;
    (0..features.rows())
        .map(|r| {
            let verdict = classify_sample(embeddings.row(r), boundaries, boundaries.gate)?;
            let input = FusionInput::from_parts(softmax(logits.row(r)), &verdict, features.row(r).to_vec())?;
            Ok((input, verdict))
        })
        .collect()
}

pub fn inputs_to_matrix(inputs: &[FusionInput]) -> Result<Matrix> {
    let dim = inputs.first().map_or(0, FusionInput::len);
    let rows: Vec<Vec<f64>> = inputs.iter().map(FusionInput::to_vec).collect();
    Matrix::from_rows(&rows, dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalPrediction {
    /// Softmax over K+1 logits; index K is OOD.
    pub class_probs: Vec<f64>,
    pub predicted: ClassLabel,
    pub ood_score: f64,
}

fn final_from_logits(logits: &[f64]) -> FinalPrediction {
    let class_probs = softmax(logits);
    let k = class_probs.len() - 1;
    FinalPrediction {
        predicted: ClassLabel::from_index(argmax(&class_probs), k),
        ood_score: class_probs[k],
        class_probs,
    }
}

pub fn predict_final(input: &FusionInput, fusion: &MlpModel) -> Result<FinalPrediction> {
    Ok(predict_final_batch(std::slice::from_ref(input), fusion)?.remove(0))
}

pub fn predict_final_batch(inputs: &[FusionInput], fusion: &MlpModel) -> Result<Vec<FinalPrediction>> {
    let x = inputs_to_matrix(inputs)?;
    if x.cols() != fusion.config.input_dim() {
        return Err(Error::DimensionMismatch {
            stage: "fusion input",
            expected: fusion.config.input_dim(),
            found: x.cols(),
        });
    }
    let logits = fusion.logits(&x)?;
    Ok((0..logits.rows()).map(|r| final_from_logits(logits.row(r))).collect())
}

/// Trains the fusion network on K+1-way labels. Zero epochs returns the
/// initial model untouched.
pub fn train_fusion(
    init: &MlpModel,
    train_x: &Matrix,
    train_y: &[usize],
    val_x: &Matrix,
    val_y: &[usize],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    let distinct: std::collections::BTreeSet<usize> = train_y.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("fusion training needs at least two label classes"));
    }
    if config.epochs == 0 {
        return Ok((init.clone(), TrainReport::default()));
    }
    nn::train(init, train_x, train_y, val_x, val_y, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionPolicy {
    /// A gate rejection is final; otherwise the fusion prediction stands.
    GatePriority,
    /// The fusion prediction is final.
    FusionPriority,
}

impl DecisionPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gate_priority" => Some(Self::GatePriority),
            "fusion_priority" => Some(Self::FusionPriority),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GatePriority => "gate_priority",
            Self::FusionPriority => "fusion_priority",
        }
    }
}

pub fn decide(verdict: &OodVerdict, prediction: &FinalPrediction, policy: DecisionPolicy) -> ClassLabel {
    match (policy, verdict.decision) {
        (DecisionPolicy::GatePriority, Decision::OutOfDistribution) => ClassLabel::Ood,
        _ => prediction.predicted,
    }
}

/// Synthetic OOD rows for fusion training: convex mixes `λx_i + (1−λ)x_j`
/// of samples from two different families, λ ∈ [0.3, 0.7].
pub fn interpolated_proxies(features: &Matrix, labels: &[usize], count: usize, seed: u64) -> Result<Matrix> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            stage: "proxy labels",
            expected: n,
            found: labels.len(),
        });
    }
    if labels.iter().all(|&l| Some(&l) == labels.first()) {
        return Err(Error::invalid("proxy interpolation needs two families"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(count, features.cols());
    for r in 0..count {
        let i = rng.random_range(0..n);
        let j = loop {
            let j = rng.random_range(0..n);
            if labels[j] != labels[i] {
                break j;
            }
        };
        let lambda = rng.random_range(0.3..=0.7);
        let (a, b) = (features.row(i), features.row(j));
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = lambda * a[c] + (1.0 - lambda) * b[c];
        }
    }
    Ok(out)
}
