//! On-disk dataset layout: a TOML `manifest` plus `samples.csv` with header
//! `identity,view,f0,...,f{D-1}`. Scalars are written with 17 significant
//! digits so a save/load round trip is exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, GeneratorParams, Sample, View};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";
pub const SAMPLES_FILE: &str = "samples.csv";
const FORMAT: &str = "xview-dataset/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    num_identities: usize,
    feature_dim: usize,
    num_samples: usize,
    generator: Option<GeneratorParams>,
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        num_identities: ds.num_identities(),
        feature_dim: ds.feature_dim(),
        num_samples: ds.len(),
        generator: ds.generator().cloned(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: dir.join(MANIFEST_FILE),
        detail: e.to_string(),
    })?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    let spath = dir.join(SAMPLES_FILE);
    let csv_err = |e: csv::Error| Error::Format {
        path: spath.clone(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&spath).map_err(csv_err)?;
    let mut header = vec!["identity".to_string(), "view".to_string()];
    header.extend((0..ds.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in ds.samples() {
        let mut row = vec![s.identity.to_string(), s.view.code().to_string()];
        row.extend(s.features.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&spath, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            path: mpath,
            detail: format!("unsupported format {:?}", manifest.format),
        });
    }
    let spath = dir.join(SAMPLES_FILE);
    let samples = read_samples(&spath, manifest.feature_dim)?;
    if samples.len() != manifest.num_samples {
        return Err(Error::Format {
            path: spath,
            detail: format!(
                "manifest declares {} samples, file has {}",
                manifest.num_samples,
                samples.len()
            ),
        });
    }
    let ds = Dataset::new(samples, manifest.num_identities, manifest.feature_dim)?;
    Ok(match manifest.generator {
        Some(g) => ds.with_generator(g),
        None => ds,
    })
}

fn read_samples(path: &Path, feature_dim: usize) -> Result<Vec<Sample>> {
    let parse_err = |line: u64, detail: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.into(),
            detail: e.to_string(),
        })?;
    let mut records = rdr.records();
    let header = match records.next() {
        None => {
            return Err(Error::Format {
                path: path.into(),
                detail: "empty file, expected a header row".into(),
            })
        }
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let width = 2 + feature_dim;
    if header.len() != width {
        return Err(parse_err(
            1,
            format!("header has {} columns, expected {width}", header.len()),
        ));
    }
    let expected = ["identity", "view"]
        .into_iter()
        .map(String::from)
        .chain((0..feature_dim).map(|i| format!("f{i}")));
    for (got, want) in header.iter().zip(expected) {
        if got != want {
            return Err(parse_err(1, format!("header column {got:?}, expected {want:?}")));
        }
    }

    let mut samples = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::Format {
                path: path.into(),
                detail: format!(
                    "line {line}: inconsistent feature length {} (expected {feature_dim})",
                    rec.len().saturating_sub(2)
                ),
            });
        }
        let identity = rec[0]
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("identity {:?}: {e}", &rec[0])))?;
        let view = View::from_code(&rec[1])
            .ok_or_else(|| parse_err(line, format!("view {:?} is not 's' or 't'", &rec[1])))?;
        let features = rec
            .iter()
            .skip(2)
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { identity, view, features });
    }
    Ok(samples)
}
