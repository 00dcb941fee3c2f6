//! Specimen records, featurization, splitting and synthetic family data.

mod featurize;
mod io;
mod synth;

pub use featurize::{featurize_bytes, featurize_manifest, FeatureVector, Scheme};
pub use io::{
    features_to_string, format_values, manifest_to_string, parse_feature_header, parse_feature_line, parse_values,
    read_features, read_manifest, write_features, write_manifest, FeatureTable,
};
pub(crate) use io::{parse_err, read_text};
pub use synth::{generate_synthetic, SynthSpec, SyntheticSet};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Family label for specimens whose family is not known at all.
pub const OOD_UNKNOWN: &str = "OOD-unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Where a specimen's content lives. Exactly one form per record.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Raw binary on disk, read lazily at featurization time.
    Path(PathBuf),
    Bytes(Vec<u8>),
    Features(FeatureVector),
    /// Features live in the companion feature file under the sample id.
    Inline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub family: String,
    pub split: Split,
    pub payload: Payload,
}

/// How a family participates in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyRole {
    /// Known family with its class index.
    InDistribution(usize),
    /// Held out entirely; only ever appears in the test split.
    Ood,
    /// Held-aside outlier-exposure family: never a class, only used as
    /// OOD-labelled rows when training the fusion stage.
    Proxy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
    /// In-distribution families; position is the class index.
    pub families: Vec<String>,
    pub ood_families: Vec<String>,
    pub proxy_families: Vec<String>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.families.len()
    }

    pub fn role(&self, family: &str) -> Option<FamilyRole> {
        if let Some(k) = self.families.iter().position(|f| f == family) {
            Some(FamilyRole::InDistribution(k))
        } else if family == OOD_UNKNOWN || self.ood_families.iter().any(|f| f == family) {
            Some(FamilyRole::Ood)
        } else if self.proxy_families.iter().any(|f| f == family) {
            Some(FamilyRole::Proxy)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in self
            .families
            .iter()
            .chain(&self.ood_families)
            .chain(&self.proxy_families)
        {
            if f.is_empty() {
                return Err(Error::invalid("empty family name"));
            }
            if !seen.insert(f.as_str()) {
                return Err(Error::invalid(format!("family `{f}` listed twice")));
            }
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id `{}`", s.id)));
            }
            if s.family.is_empty() {
                return Err(Error::invalid(format!("sample `{}` has no family", s.id)));
            }
            match self.role(&s.family) {
                None => {
                    return Err(Error::invalid(format!(
                        "sample `{}` has unlisted family `{}`",
                        s.id, s.family
                    )))
                }
                Some(FamilyRole::Ood) if s.split != Split::Test => {
                    return Err(Error::invalid(format!(
                        "OOD sample `{}` assigned to {}",
                        s.id,
                        s.split.as_str()
                    )))
                }
                Some(FamilyRole::Proxy) if s.split == Split::Test => {
                    return Err(Error::invalid(format!(
                        "proxy sample `{}` assigned to test",
                        s.id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Moves the named families out of the class list into the OOD and
    /// proxy roles. OOD samples are forced into the test split.
    pub fn designate(&mut self, ood: &[String], proxy: &[String]) -> Result<()> {
        for f in ood.iter().chain(proxy) {
            let pos = self
                .families
                .iter()
                .position(|x| x == f)
                .ok_or_else(|| Error::invalid(format!("unknown family `{f}`")))?;
            self.families.remove(pos);
        }
        self.ood_families.extend(ood.iter().cloned());
        self.proxy_families.extend(proxy.iter().cloned());
        for s in &mut self.samples {
            if ood.contains(&s.family) {
                s.split = Split::Test;
            }
        }
        Ok(())
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }
}

/// A file that could not be ingested or featurized. Collected rather than
/// aborting the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: DatasetManifest,
    pub errors: Vec<RecordError>,
}

/// Builds a manifest from `root/<subdir>/**/<file>`; each file's family is
/// `label_rule[subdir]`, or the subdirectory name when the rule has no entry.
/// Files directly under `root` are ignored. All families start out
/// in-distribution and in the train split.
pub fn ingest_directory(root: &Path, label_rule: &BTreeMap<String, String>) -> Result<IngestOutcome> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(root).min_depth(2).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                let p = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
                paths.push(Err((p, e.to_string())));
                continue;
            }
        };
        if entry.file_type().is_file() {
            paths.push(Ok(entry.into_path()));
        }
    }
    paths.sort_by(|a, b| {
        let pa = match a {
            Ok(p) | Err((p, _)) => p,
        };
        let pb = match b {
            Ok(p) | Err((p, _)) => p,
        };
        pa.cmp(pb)
    });

    let mut samples = Vec::new();
    let mut errors = Vec::new();
    let mut families = BTreeSet::new();
    for p in paths {
        let path = match p {
            Ok(p) => p,
            Err((p, msg)) => {
                errors.push(RecordError {
                    id: p.display().to_string(),
                    message: msg,
                });
                continue;
            }
        };
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let subdir = rel
            .components()
            .next()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Err(e) = std::fs::File::open(&path) {
            errors.push(RecordError {
                id,
                message: e.to_string(),
            });
            continue;
        }
        let family = label_rule.get(&subdir).cloned().unwrap_or(subdir);
        families.insert(family.clone());
        samples.push(SampleRecord {
            id,
            family,
            split: Split::Train,
            payload: Payload::Path(path),
        });
    }
    if samples.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    Ok(IngestOutcome {
        manifest: DatasetManifest {
            samples,
            families: families.into_iter().collect(),
            ood_families: Vec::new(),
            proxy_families: Vec::new(),
            seed: 0,
        },
        errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid("split ratios must be positive"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Stratified, seeded split. Each in-distribution family is shuffled and cut
/// into train/val/test by `ratios` (val and test get at least one sample).
/// OOD families go entirely to test; proxy families are cut into train/val
/// only, in proportion to the train and val ratios.
pub fn split_dataset(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut by_family: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_family.entry(s.family.as_str()).or_default().push(i);
    }

    let mut out = manifest.clone();
    out.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ordered = manifest
        .families
        .iter()
        .chain(&manifest.proxy_families)
        .map(String::as_str);
    for family in ordered {
        let Some(idx) = by_family.get(family) else {
            continue;
        };
        let proxy = manifest.proxy_families.iter().any(|f| f == family);
        let required = if proxy { 2 } else { 3 };
        if idx.len() < required {
            return Err(Error::TooFewSamples {
                family: family.to_string(),
                count: idx.len(),
                required,
            });
        }
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let (n_val, n_test) = if proxy {
            let frac = ratios.val / (ratios.train + ratios.val);
            (((frac * n as f64).round() as usize).clamp(1, n - 1), 0)
        } else {
            let v = ((ratios.val * n as f64).round() as usize).max(1);
            let t = ((ratios.test * n as f64).round() as usize).max(1);
            // keep at least one training sample
            let v = v.min(n - 2);
            let t = t.min(n - 1 - v);
            (v, t)
        };
        let n_train = n - n_val - n_test;
        for (pos, &i) in idx.iter().enumerate() {
            out.samples[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    for s in &mut out.samples {
        if matches!(manifest.role(&s.family), Some(FamilyRole::Ood)) {
            s.split = Split::Test;
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(per_family: &[(&str, usize)], ood: &[&str]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (f, n) in per_family {
            for i in 0..*n {
                samples.push(SampleRecord {
                    id: format!("{f}/{i:04}"),
                    family: f.to_string(),
                    split: if ood.contains(f) { Split::Test } else { Split::Train },
                    payload: Payload::Bytes(vec![i as u8]),
                });
            }
        }
        DatasetManifest {
            samples,
            families: per_family
                .iter()
                .map(|(f, _)| f.to_string())
                .filter(|f| !ood.contains(&f.as_str()))
                .collect(),
            ood_families: ood.iter().map(|s| s.to_string()).collect(),
            proxy_families: vec![],
            seed: 0,
        }
    }

    fn counts(m: &DatasetManifest, family: &str) -> [usize; 3] {
        let mut c = [0; 3];
        for s in m.samples.iter().filter(|s| s.family == family) {
            c[s.split as usize] += 1;
        }
        c
    }

    #[test]
    fn exact_ratio_split_per_family() {
        let m = manifest(&[("a", 100), ("b", 100)], &[]);
        let s = split_dataset(&m, SplitRatios::default(), 1).unwrap();
        assert_eq!(counts(&s, "a"), [70, 10, 20]);
        assert_eq!(counts(&s, "b"), [70, 10, 20]);
    }

    #[test]
    fn ood_family_lands_in_test() {
        let m = manifest(&[("a", 30), ("x", 50)], &["x"]);
        let s = split_dataset(&m, SplitRatios::default(), 3).unwrap();
        assert_eq!(counts(&s, "x"), [0, 0, 50]);
    }

    #[test]
    fn same_seed_same_assignment() {
        let m = manifest(&[("a", 40), ("b", 17)], &[]);
        let r = SplitRatios::default();
        assert_eq!(split_dataset(&m, r, 9).unwrap(), split_dataset(&m, r, 9).unwrap());
        assert_ne!(split_dataset(&m, r, 9).unwrap(), split_dataset(&m, r, 10).unwrap());
    }

    #[test]
    fn tiny_family_cannot_be_stratified() {
        let m = manifest(&[("a", 2)], &[]);
        let err = split_dataset(&m, SplitRatios::default(), 0).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { count: 2, .. }));
        let m = manifest(&[("a", 3)], &[]);
        assert_eq!(counts(&split_dataset(&m, SplitRatios::default(), 0).unwrap(), "a"), [1, 1, 1]);
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let m = manifest(&[("a", 10)], &[]);
        let r = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split_dataset(&m, r, 0).is_err());
    }

    #[test]
    fn proxy_families_never_reach_test() {
        let mut m = manifest(&[("a", 20), ("p", 20)], &[]);
        m.designate(&[], &["p".into()]).unwrap();
        let s = split_dataset(&m, SplitRatios::default(), 4).unwrap();
        let c = counts(&s, "p");
        assert_eq!(c[2], 0);
        assert!(c[0] > 0 && c[1] > 0);
        assert_eq!(s.role("p"), Some(FamilyRole::Proxy));
        assert_eq!(s.role("a"), Some(FamilyRole::InDistribution(0)));
    }

    #[test]
    fn validate_catches_bad_manifests() {
        let mut m = manifest(&[("a", 3)], &[]);
        m.samples[1].id = m.samples[0].id.clone();
        assert!(m.validate().is_err());
        let mut m = manifest(&[("a", 3), ("x", 3)], &["x"]);
        m.samples[4].split = Split::Train;
        assert!(m.validate().is_err());
        let mut m = manifest(&[("a", 3)], &[]);
        m.samples[0].family = "zzz".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn ingest_reads_family_subdirectories() {
        let dir = tempfile::tempdir().unwrap();
        for (fam, n) in [("Adposhel", 3), ("Agent", 2)] {
            std::fs::create_dir(dir.path().join(fam)).unwrap();
            for i in 0..n {
                std::fs::write(dir.path().join(fam).join(format!("s{i}.bin")), [1u8, 2, 3]).unwrap();
            }
        }
        std::fs::write(dir.path().join("stray.bin"), [0u8]).unwrap();
        let out = ingest_directory(dir.path(), &BTreeMap::new()).unwrap();
        assert!(out.errors.is_empty());
        assert_eq!(out.manifest.samples.len(), 5);
        assert_eq!(out.manifest.families, vec!["Adposhel", "Agent"]);
        assert_eq!(out.manifest.samples[0].id, "Adposhel/s0.bin");
        assert!(out.manifest.samples[..3].iter().all(|s| s.family == "Adposhel"));

        let mut rule = BTreeMap::new();
        rule.insert("Agent".to_string(), "Renamed".to_string());
        let out = ingest_directory(dir.path(), &rule).unwrap();
        assert_eq!(out.manifest.families, vec!["Adposhel", "Renamed"]);
    }

    #[test]
    fn ingest_of_empty_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_directory(dir.path(), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("no samples"));
    }
}
