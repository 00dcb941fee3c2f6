//! Boundary file: a header `K=<k> dim=<d> band=<b> mode=<m> covariance=<c>`
//! followed by one line per family,
//! `class_id<TAB>sigma_iso<TAB>dist_mean<TAB>dist_std<TAB>n<TAB>mu_1,...,mu_d`.
//! `mode` and `covariance` are optional on read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{BandMode, BoundarySet, ClassBoundary, CovarianceMode, GateConfig};
use crate::dataset::{format_values, parse_err, parse_values, read_text};
use crate::error::{Error, Result};

fn mode_name(m: BandMode) -> &'static str {
    match m {
        BandMode::Symmetric => "symmetric",
        BandMode::OneSided => "one_sided",
    }
}

fn covariance_name(c: CovarianceMode) -> &'static str {
    match c {
        CovarianceMode::PerClass => "per_class",
        CovarianceMode::Shared => "shared",
    }
}

pub fn boundaries_to_string(set: &BoundarySet) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "K={} dim={} band={} mode={} covariance={}",
        set.num_classes(),
        set.embedding_dim,
        set.gate.band,
        mode_name(set.gate.mode),
        covariance_name(set.covariance)
    );
    for b in &set.boundaries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            b.class_id,
            b.sigma_iso,
            b.dist_mean,
            b.dist_std,
            b.n_samples,
            format_values(&b.centroid)
        );
    }
    out
}

pub fn write_boundaries(path: &Path, set: &BoundarySet) -> Result<()> {
    std::fs::write(path, boundaries_to_string(set)).map_err(|e| Error::io(path, e))
}

pub fn read_boundaries(path: &Path) -> Result<BoundarySet> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty boundary file"))?;
    let mut fields = BTreeMap::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("bad header token `{tok}`")))?;
        fields.insert(k, v);
    }
    let get = |key: &str| fields.get(key).copied().ok_or_else(|| parse_err(path, 1, format!("header lacks `{key}`")));
    let k: usize = get("K")?.parse().map_err(|_| parse_err(path, 1, "bad K"))?;
    let dim: usize = get("dim")?.parse().map_err(|_| parse_err(path, 1, "bad dim"))?;
    let band: f64 = get("band")?.parse().map_err(|_| parse_err(path, 1, "bad band"))?;
    let mode = match fields.get("mode").copied().unwrap_or("symmetric") {
        "symmetric" => BandMode::Symmetric,
        "one_sided" => BandMode::OneSided,
        other => return Err(parse_err(path, 1, format!("unknown mode `{other}`"))),
    };
    let covariance = match fields.get("covariance").copied().unwrap_or("per_class") {
        "per_class" => CovarianceMode::PerClass,
        "shared" => CovarianceMode::Shared,
        other => return Err(parse_err(path, 1, format!("unknown covariance `{other}`"))),
    };

    let mut boundaries = Vec::with_capacity(k);
    for (n, line) in lines {
        let lineno = n + 1;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(parse_err(path, lineno, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(path, lineno, format!("bad number `{s}`")));
        let class_id = f[0].parse().map_err(|_| parse_err(path, lineno, "bad class id"))?;
        let n_samples = f[4].parse().map_err(|_| parse_err(path, lineno, "bad sample count"))?;
        let centroid = parse_values(f[5]).map_err(|m| parse_err(path, lineno, m))?;
        boundaries.push(ClassBoundary {
            class_id,
            sigma_iso: num(f[1])?,
            dist_mean: num(f[2])?,
            dist_std: num(f[3])?,
            n_samples,
            centroid,
        });
    }
    if boundaries.len() != k {
        return Err(Error::ArtifactMismatch {
            artifact: path.display().to_string(),
            expected: format!("{k} boundaries"),
            found: format!("{} boundaries", boundaries.len()),
        });
    }
    let set = BoundarySet {
        boundaries,
        embedding_dim: dim,
        covariance,
        gate: GateConfig { band, mode },
    };
    set.gate.validate()?;
    set.validate()?;
    Ok(set)
}
