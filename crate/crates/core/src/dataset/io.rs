//! Line-oriented manifest and feature files.
//!
//! Manifest: optional `# key=value` header lines (`families`, `ood_families`,
//! `proxy_families` as comma lists, `seed`), then one record per line:
//! `id<TAB>family<TAB>split<TAB>source`, where `source` is a file path or
//! the literal `inline`.
//!
//! Features: a header `dim=<d> scheme=<name>`, then `id<TAB>v1,v2,...,vd`.
//! Values are written in shortest round-trip decimal form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{DatasetManifest, FeatureVector, Payload, SampleRecord, Scheme, Split};
use crate::error::{Error, Result};

const INLINE: &str = "inline";

pub(crate) fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# families={}", m.families.join(","));
    let _ = writeln!(out, "# ood_families={}", m.ood_families.join(","));
    let _ = writeln!(out, "# proxy_families={}", m.proxy_families.join(","));
    let _ = writeln!(out, "# seed={}", m.seed);
    for s in &m.samples {
        let source = match &s.payload {
            Payload::Path(p) => p.display().to_string(),
            _ => INLINE.to_string(),
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.id, s.family, s.split.as_str(), source);
    }
    out
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    std::fs::write(path, manifest_to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_text(path)?;
    let mut header: BTreeMap<String, String> = BTreeMap::new();
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let split = Split::parse(fields[2])
            .ok_or_else(|| parse_err(path, lineno, format!("unknown split `{}`", fields[2])))?;
        let payload = if fields[3] == INLINE {
            Payload::Inline
        } else {
            Payload::Path(PathBuf::from(fields[3]))
        };
        samples.push(SampleRecord {
            id: fields[0].to_string(),
            family: fields[1].to_string(),
            split,
            payload,
        });
    }
    let list = |key: &str| -> Vec<String> {
        header
            .get(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    };
    let mut families = list("families");
    let ood_families = list("ood_families");
    let proxy_families = list("proxy_families");
    if families.is_empty() {
        // No header: every family seen is in-distribution, sorted by name.
        let mut seen: Vec<String> = samples.iter().map(|s| s.family.clone()).collect();
        seen.sort();
        seen.dedup();
        families = seen
            .into_iter()
            .filter(|f| !ood_families.contains(f) && !proxy_families.contains(f))
            .collect();
    }
    let seed = match header.get("seed") {
        Some(s) => s
            .parse()
            .map_err(|_| parse_err(path, 0, format!("bad seed `{s}`")))?,
        None => 0,
    };
    let m = DatasetManifest {
        samples,
        families,
        ood_families,
        proxy_families,
        seed,
    };
    m.validate()?;
    Ok(m)
}

/// Feature vectors keyed by sample id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub scheme: Scheme,
    pub rows: Vec<(String, FeatureVector)>,
}

impl FeatureTable {
    pub fn dim(&self) -> usize {
        self.scheme.dim()
    }

    pub fn to_map(&self) -> BTreeMap<&str, &FeatureVector> {
        self.rows.iter().map(|(id, f)| (id.as_str(), f)).collect()
    }
}

pub fn format_values(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 8);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn parse_values(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad number `{t}`"))
        })
        .collect()
}

pub fn features_to_string(table: &FeatureTable) -> String {
    let mut out = format!("dim={} scheme={}\n", table.dim(), table.scheme.name());
    for (id, f) in &table.rows {
        out.push_str(id);
        out.push('\t');
        out.push_str(&format_values(f.values()));
        out.push('\n');
    }
    out
}

pub fn write_features(path: &Path, table: &FeatureTable) -> Result<()> {
    std::fs::write(path, features_to_string(table)).map_err(|e| Error::io(path, e))
}

pub fn parse_feature_header(path: &Path, line: &str) -> Result<Scheme> {
    let mut dim = None;
    let mut name = None;
    for tok in line.split_whitespace() {
        match tok.split_once('=') {
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            Some(("scheme", v)) => name = Some(v),
            _ => return Err(parse_err(path, 1, format!("unexpected header token `{tok}`"))),
        }
    }
    let (Some(dim), Some(name)) = (dim, name) else {
        return Err(parse_err(path, 1, "header must be `dim=<d> scheme=<name>`"));
    };
    let scheme = Scheme::parse(name, dim)
        .ok_or_else(|| parse_err(path, 1, format!("unknown scheme `{name}`")))?;
    if scheme.dim() != dim {
        return Err(parse_err(
            path,
            1,
            format!("scheme {} has dim {}, header says {dim}", scheme.name(), scheme.dim()),
        ));
    }
    Ok(scheme)
}

/// Parses one `id<TAB>values` line against a known scheme.
pub fn parse_feature_line(path: &Path, lineno: usize, line: &str, scheme: Scheme) -> Result<(String, FeatureVector)> {
    let (id, vals) = line
        .split_once('\t')
        .ok_or_else(|| parse_err(path, lineno, "expected `id<TAB>values`"))?;
    let values = parse_values(vals).map_err(|m| parse_err(path, lineno, m))?;
    let fv = FeatureVector::new(values, scheme).map_err(|e| parse_err(path, lineno, e.to_string()))?;
    Ok((id.to_string(), fv))
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty feature file"))?;
    let scheme = parse_feature_header(path, header)?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        rows.push(parse_feature_line(path, n + 2, line, scheme)?);
    }
    Ok(FeatureTable { scheme, rows })
}
