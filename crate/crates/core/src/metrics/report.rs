use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{
    accuracy, ap_ranking, ar_ood, auroc, average_precision, confusion_matrix, fpr_at_tpr, ood_recall_by_family,
    per_family_auc, tpr_at_fpr, Positive, ScoredSample,
};
use crate::error::{Error, Result};

/// Row/column label of the OOD class in the confusion grid.
pub const OOD_CLASS_NAME: &str = "OOD";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scorer: String,
    pub n_samples: usize,
    /// In-distribution family names, in class-index order.
    pub class_names: Vec<String>,
    pub auroc: f64,
    pub ap_id: f64,
    pub ap_ood: f64,
    pub fpr_at_tpr95: f64,
    pub tpr_at_fpr05: f64,
    /// Configured operating points and the rates they yield.
    pub tpr_target: f64,
    pub fpr_at_tpr_target: f64,
    pub fpr_target: f64,
    pub tpr_at_fpr_target: f64,
    pub ar_ood: f64,
    pub acc: f64,
    /// (K+1)×(K+1); rows are true classes.
    pub confusion: Vec<Vec<u64>>,
    /// One-vs-rest AUC per test family, scored by that family's probability
    /// column (the OOD column for OOD families).
    pub per_family_auc: BTreeMap<String, f64>,
    pub ood_recall: BTreeMap<String, f64>,
    /// Additional named values appended verbatim to the text form.
    pub extras: BTreeMap<String, String>,
}

/// `targets` is the (TPR, FPR) operating point pair reported next to the
/// fixed 95 % / 5 % points.
pub fn compute_report(
    samples: &[ScoredSample],
    class_names: &[String],
    scorer: &str,
    targets: (f64, f64),
) -> Result<MetricsReport> {
    let k = class_names.len();
    let pairs: Vec<(usize, usize)> = samples.iter().map(|s| (s.predicted, s.true_class)).collect();
    let confusion = confusion_matrix(&pairs, k)?;

    let mut per_family = BTreeMap::new();
    if samples.iter().all(|s| s.class_probs.len() == k + 1) {
        let families: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.true_family.as_str()).collect();
        for fam in families {
            let column = class_names.iter().position(|c| c == fam).unwrap_or(k);
            // one-vs-rest needs at least one other sample
            if samples.iter().any(|s| s.true_family != fam) {
                per_family.insert(fam.to_string(), per_family_auc(samples, fam, column)?);
            }
        }
    }

    Ok(MetricsReport {
        scorer: scorer.to_string(),
        n_samples: samples.len(),
        class_names: class_names.to_vec(),
        auroc: auroc(samples)?,
        ap_id: average_precision(samples, Positive::Id)?,
        ap_ood: average_precision(samples, Positive::Ood)?,
        fpr_at_tpr95: fpr_at_tpr(samples, 0.95)?,
        tpr_at_fpr05: tpr_at_fpr(samples, 0.05)?,
        tpr_target: targets.0,
        fpr_at_tpr_target: fpr_at_tpr(samples, targets.0)?,
        fpr_target: targets.1,
        tpr_at_fpr_target: tpr_at_fpr(samples, targets.1)?,
        ar_ood: ar_ood(samples, k)?,
        acc: accuracy(samples)?,
        confusion,
        per_family_auc: per_family,
        ood_recall: ood_recall_by_family(samples, k),
        extras: BTreeMap::new(),
    })
}

pub fn report_to_string(r: &MetricsReport) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("scorer", &r.scorer);
    kv("n_samples", &r.n_samples);
    kv("n_classes", &r.class_names.len());
    kv("auroc", &r.auroc);
    kv("ap_id", &r.ap_id);
    kv("ap_ood", &r.ap_ood);
    kv("fpr_at_tpr95", &r.fpr_at_tpr95);
    kv("tpr_at_fpr05", &r.tpr_at_fpr05);
    kv("operating.tpr_target", &r.tpr_target);
    kv("operating.fpr_at_tpr_target", &r.fpr_at_tpr_target);
    kv("operating.fpr_target", &r.fpr_target);
    kv("operating.tpr_at_fpr_target", &r.tpr_at_fpr_target);
    kv("ar_ood", &r.ar_ood);
    kv("ar_ood.definition", &"macro_average_of_per_family_ood_recall");
    kv("acc", &r.acc);
    for (f, v) in &r.per_family_auc {
        kv(&format!("auc.{f}"), v);
    }
    for (f, v) in &r.ood_recall {
        kv(&format!("ood_recall.{f}"), v);
    }
    for (k, v) in &r.extras {
        kv(k, v);
    }
    out
}

/// Labelled grid: header `true\pred` plus class names, one row per true class.
pub fn confusion_to_string(r: &MetricsReport) -> String {
    let names: Vec<&str> = r
        .class_names
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(OOD_CLASS_NAME))
        .collect();
    let mut out = String::from("true\\pred");
    for n in &names {
        out.push('\t');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(&r.confusion) {
        out.push_str(name);
        for c in row {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
    }
    out
}

/// `(fpr, tpr)` points from the strictest threshold down, starting at (0, 0).
pub fn roc_curve(samples: &[ScoredSample]) -> Vec<(f64, f64)> {
    let n_id = samples.iter().filter(|s| s.is_id).count().max(1) as f64;
    let n_ood = samples.iter().filter(|s| !s.is_id).count().max(1) as f64;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| super::cmp_score(b.score, a.score));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, s) in sorted.iter().enumerate() {
        if s.is_id {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].score != s.score {
            pts.push((fp as f64 / n_ood, tp as f64 / n_id));
        }
    }
    pts
}

/// `(recall, precision)` at every rank of the AP ordering.
pub fn pr_curve(samples: &[ScoredSample], positive: Positive) -> Vec<(f64, f64)> {
    let ranked = ap_ranking(samples, positive);
    let total = ranked.iter().filter(|r| r.2).count().max(1) as f64;
    let mut hits = 0usize;
    ranked
        .iter()
        .enumerate()
        .map(|(n, r)| {
            hits += usize::from(r.2);
            (hits as f64 / total, hits as f64 / (n + 1) as f64)
        })
        .collect()
}

pub fn write_curve(path: &Path, header: (&str, &str), points: &[(f64, f64)]) -> Result<()> {
    let mut out = format!("{}\t{}\n", header.0, header.1);
    for (x, y) in points {
        let _ = writeln!(out, "{x}\t{y}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
