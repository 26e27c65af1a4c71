use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pearson_fc, CommunityMap, ConnectomeDataset, Subject, COMMUNITY_NAMES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Largest |M - Mᵀ| entry that is silently averaged away on load.
const ASYMMETRY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub n_rois: usize,
    /// Relative to the manifest's directory.
    pub community_file: String,
    pub subjects: Vec<ManifestSubject>,
}

/// Exactly one of `fc_csv` and `ts_csv` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fc_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_csv: Option<String>,
}

fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::Data(format!(
                "{}: row {rows} has {} columns",
                path.display(),
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number {field:?} at ({rows},{j})", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}

fn write_matrix(path: &Path, cols: usize, data: &[f64]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    for row in data.chunks(cols) {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn load_fc(id: &str, path: &Path, n: usize) -> Result<Tensor> {
    let (rows, cols, mut data) = read_matrix(path)?;
    if rows != n || cols != n {
        return Err(Error::subject(id, format!("FC is {rows}x{cols}, manifest says N={n}")));
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((data[i * n + j] - data[j * n + i]).abs());
        }
    }
    if worst > ASYMMETRY_TOL {
        return Err(Error::subject(
            id,
            format!("FC asymmetry {worst:e} exceeds {ASYMMETRY_TOL:e}"),
        ));
    }
    if worst > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                let m = 0.5 * (data[i * n + j] + data[j * n + i]);
                data[i * n + j] = m;
                data[j * n + i] = m;
            }
        }
    }
    Tensor::new(vec![n, n], data)
}

fn load_ts(id: &str, path: &Path, n: usize) -> Result<Tensor> {
    let (rows, cols, data) = read_matrix(path)?;
    if cols != n {
        return Err(Error::subject(
            id,
            format!("time series has {cols} ROIs, manifest says N={n}"),
        ));
    }
    let ts = Tensor::new(vec![rows, cols], data).map_err(|e| Error::subject(id, e.to_string()))?;
    pearson_fc(&ts).map_err(|e| Error::subject(id, e.to_string()))
}

fn load_communities(path: &Path, n: usize) -> Result<CommunityMap> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut assignment = vec![None; n];
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let bad = || Error::Data(format!("{}: bad line {:?}", path.display(), record));
        if record.len() != 2 {
            return Err(bad());
        }
        let roi: usize = record[0].parse().map_err(|_| bad())?;
        let community = COMMUNITY_NAMES
            .iter()
            .position(|c| *c == &record[1])
            .ok_or_else(|| Error::Data(format!("{}: unknown community {:?}", path.display(), &record[1])))?;
        match assignment.get_mut(roi) {
            Some(slot @ None) => *slot = Some(community),
            Some(Some(_)) => return Err(Error::Data(format!("ROI {roi} assigned twice"))),
            None => return Err(Error::Data(format!("ROI {roi} out of range for N={n}"))),
        }
    }
    let assignment = assignment
        .into_iter()
        .enumerate()
        .map(|(roi, c)| c.ok_or_else(|| Error::Data(format!("ROI {roi} has no community"))))
        .collect::<Result<Vec<_>>>()?;
    CommunityMap::canonical(assignment)
}

/// Loads a manifest and every file it references. Paths in the manifest are
/// resolved against its directory.
pub fn load_dataset(manifest_path: &Path) -> Result<ConnectomeDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "manifest format {} (expected {MANIFEST_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.subjects.is_empty() {
        return Err(Error::Data("manifest lists no subjects".into()));
    }
    let n = manifest.n_rois;
    if n == 0 {
        return Err(Error::Data("n_rois must be positive".into()));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let communities = load_communities(&root.join(&manifest.community_file), n)?;

    let subjects = manifest
        .subjects
        .iter()
        .map(|s| {
            let fc = match (&s.fc_csv, &s.ts_csv) {
                (Some(f), None) => load_fc(&s.id, &root.join(f), n),
                (None, Some(t)) => load_ts(&s.id, &root.join(t), n),
                _ => Err(Error::subject(&s.id, "exactly one of fc_csv, ts_csv is required")),
            }
            .map_err(|e| match e {
                Error::Subject { .. } => e,
                other => Error::subject(&s.id, other.to_string()),
            })?;
            Subject::new(s.id.clone(), usize::from(s.label), fc)
        })
        .collect::<Result<Vec<_>>>()?;
    ConnectomeDataset::new(subjects, communities)
}

fn subject_file(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("fc/{safe}.csv")
}

/// Writes `manifest.json`, `communities.csv` and `fc/<id>.csv` under `dir`
/// and returns the manifest path.
pub fn save_dataset(dataset: &ConnectomeDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("fc")).map_err(|e| Error::io(dir, e))?;
    let n = dataset.n_rois;

    let community_path = dir.join("communities.csv");
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&community_path)
        .map_err(|e| Error::csv(&community_path, e))?;
    for roi in 0..n {
        let name = dataset.community_map.name_of(roi).expect("map covers N");
        writer
            .write_record([roi.to_string().as_str(), name])
            .map_err(|e| Error::csv(&community_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&community_path, e))?;

    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.subjects {
        let file = subject_file(&s.id);
        if entries
            .iter()
            .any(|e: &ManifestSubject| e.fc_csv.as_deref() == Some(&file))
        {
            return Err(Error::subject(&s.id, "id collides with another after sanitising"));
        }
        write_matrix(&dir.join(&file), n, s.fc.data())?;
        entries.push(ManifestSubject {
            id: s.id.clone(),
            label: s.label as u8,
            fc_csv: Some(file),
            ts_csv: None,
        });
    }

    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        n_rois: n,
        community_file: "communities.csv".into(),
        subjects: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
