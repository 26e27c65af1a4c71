//! Connectome ingestion, ROI community maps, stratified splitting and a
//! synthetic planted-signal generator.

mod io;
mod split;
mod synth;

pub use io::{load_dataset, save_dataset, Manifest, ManifestSubject, MANIFEST_FORMAT_VERSION};
pub use split::{stratified_split, Split, DEFAULT_FRACTIONS};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The eight functional communities, in canonical order.
pub const COMMUNITY_NAMES: [&str; 8] = ["CS & SB", "V", "SMN", "DAN", "VAN", "L", "FPN", "DMN"];

pub const HC: usize = 0;
pub const ASD: usize = 1;

const SYMMETRY_TOL: f64 = 1e-9;

/// Pearson correlation between the columns of `timeseries[T, N]`.
pub fn pearson_fc(timeseries: &Tensor) -> Result<Tensor> {
    let s = timeseries.shape();
    if s.len() != 2 {
        return Err(Error::Argument(format!("time series must be [T, N], got {s:?}")));
    }
    let (t, n) = (s[0], s[1]);
    if t < 3 {
        return Err(Error::Data(format!("need at least 3 time points, got {t}")));
    }
    let x = timeseries.data();
    let mut centered = vec![0.0; t * n];
    let mut norms = vec![0.0; n];
    for j in 0..n {
        let mean = (0..t).map(|r| x[r * n + j]).sum::<f64>() / t as f64;
        let mut ss = 0.0;
        for r in 0..t {
            let c = x[r * n + j] - mean;
            centered[j * t + r] = c;
            ss += c * c;
        }
        if ss == 0.0 || !ss.is_finite() {
            return Err(Error::Data(format!("ROI {j} has zero variance")));
        }
        norms[j] = ss.sqrt();
    }
    let mut fc = vec![0.0; n * n];
    for i in 0..n {
        fc[i * n + i] = 1.0;
        let ci = &centered[i * t..(i + 1) * t];
        for j in i + 1..n {
            let cj = &centered[j * t..(j + 1) * t];
            let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            fc[i * n + j] = r;
            fc[j * n + i] = r;
        }
    }
    Tensor::new(vec![n, n], fc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// 0 = HC, 1 = ASD.
    pub label: usize,
    pub fc: Tensor,
}

impl Subject {
    /// Checks the FC invariants: square, symmetric and unit diagonal within
    /// 1e-9, entries in [-1, 1].
    pub fn new(id: impl Into<String>, label: usize, fc: Tensor) -> Result<Self> {
        let id = id.into();
        if label > 1 {
            return Err(Error::subject(id, format!("label must be 0 or 1, got {label}")));
        }
        let s = fc.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::subject(id, format!("FC must be square, got {s:?}")));
        }
        let n = s[0];
        let m = fc.data();
        for i in 0..n {
            for j in 0..n {
                let v = m[i * n + j];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::subject(id, format!("FC[{i},{j}] = {v} outside [-1, 1]")));
                }
                if (v - m[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::subject(id, format!("FC not symmetric at ({i},{j})")));
                }
            }
            if (m[i * n + i] - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::subject(id, format!("FC diagonal at {i} is {}", m[i * n + i])));
            }
        }
        Ok(Self { id, label, fc })
    }

    pub fn n_rois(&self) -> usize {
        self.fc.shape()[0]
    }
}

/// ROI to community assignment over [`COMMUNITY_NAMES`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommunityMap {
    names: Vec<String>,
    assignment: Vec<usize>,
}

impl CommunityMap {
    pub fn new(names: Vec<String>, assignment: Vec<usize>) -> Result<Self> {
        if names.len() != COMMUNITY_NAMES.len() {
            return Err(Error::Data(format!("expected 8 communities, got {}", names.len())));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Data(format!("duplicate community name {a:?}")));
            }
        }
        if assignment.is_empty() {
            return Err(Error::Data("community map has no ROIs".into()));
        }
        if let Some((roi, c)) = assignment.iter().enumerate().find(|(_, &c)| c >= names.len()) {
            return Err(Error::Data(format!("ROI {roi} assigned to unknown community {c}")));
        }
        Ok(Self { names, assignment })
    }

    pub fn canonical(assignment: Vec<usize>) -> Result<Self> {
        Self::new(COMMUNITY_NAMES.iter().map(|s| s.to_string()).collect(), assignment)
    }

    /// Contiguous blocks of near-equal size (the first `n % 8` blocks get one
    /// extra ROI). Needs at least one ROI per community.
    pub fn contiguous(n_rois: usize) -> Result<Self> {
        let c = COMMUNITY_NAMES.len();
        if n_rois < c {
            return Err(Error::Argument(format!("{n_rois} ROIs cannot cover {c} communities")));
        }
        let (base, extra) = (n_rois / c, n_rois % c);
        let assignment = (0..c)
            .flat_map(|k| std::iter::repeat_n(k, base + usize::from(k < extra)))
            .collect();
        Self::canonical(assignment)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_rois(&self) -> usize {
        self.assignment.len()
    }

    pub fn community_of(&self, roi: usize) -> Option<usize> {
        self.assignment.get(roi).copied()
    }

    pub fn name_of(&self, roi: usize) -> Option<&str> {
        self.community_of(roi).map(|c| self.names[c].as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn members(&self, community: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&r| self.assignment[r] == community)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectomeDataset {
    pub subjects: Vec<Subject>,
    pub n_rois: usize,
    pub community_map: CommunityMap,
}

impl ConnectomeDataset {
    pub fn new(subjects: Vec<Subject>, community_map: CommunityMap) -> Result<Self> {
        let n_rois = community_map.n_rois();
        for s in &subjects {
            if s.n_rois() != n_rois {
                return Err(Error::subject(
                    &s.id,
                    format!("{} ROIs, community map has {n_rois}", s.n_rois()),
                ));
            }
        }
        for (i, s) in subjects.iter().enumerate() {
            if subjects[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::subject(&s.id, "duplicate subject id"));
            }
        }
        Ok(Self {
            subjects,
            n_rois,
            community_map,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// Subjects per class, `[HC, ASD]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let asd = self.subjects.iter().filter(|s| s.label == ASD).count();
        [self.len() - asd, asd]
    }

    pub fn has_both_classes(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }

    pub fn find(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// New dataset holding the subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            n_rois: self.n_rois,
            community_map: self.community_map.clone(),
        }
    }

    /// FC matrices of the subjects at `indices` stacked into `[B, N, N]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.n_rois;
        let mut data = Vec::with_capacity(indices.len() * n * n);
        for &i in indices {
            data.extend_from_slice(self.subjects[i].fc.data());
        }
        Tensor::new(vec![indices.len(), n, n], data)
    }
}
