use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CommunityMap, ConnectomeDataset, Subject};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_rois: usize,
    /// Shift δ added to correlations between the two signal communities for
    /// label-1 subjects.
    pub effect: f64,
    /// Standard deviation σ_n of independent noise on each correlation.
    pub noise: f64,
    /// Latent factors per ROI; defaults to `n_rois`.
    pub factors: Option<usize>,
    /// Scale of each subject's own factor loadings relative to the shared ones.
    pub subject_scale: f64,
    pub signal_communities: [String; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_rois: 20,
            effect: 0.4,
            noise: 0.05,
            factors: None,
            subject_scale: 0.5,
            signal_communities: ["SMN".into(), "DMN".into()],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Checks the parameters and returns the community map they imply.
    pub fn validate(&self) -> Result<CommunityMap> {
        if !(self.effect >= 0.0 && self.effect.is_finite()) {
            return Err(Error::Argument(format!("effect must be >= 0, got {}", self.effect)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Argument(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.subject_scale >= 0.0 && self.subject_scale.is_finite()) {
            return Err(Error::Argument("subject_scale must be >= 0".into()));
        }
        if self.n_subjects < 2 {
            return Err(Error::Argument("need at least 2 subjects".into()));
        }
        if self.factors == Some(0) {
            return Err(Error::Argument("factors must be positive".into()));
        }
        let map = CommunityMap::contiguous(self.n_rois)?;
        let [a, b] = self.signal_indices(&map)?;
        if a == b {
            return Err(Error::Argument("signal communities must differ".into()));
        }
        Ok(map)
    }

    fn signal_indices(&self, map: &CommunityMap) -> Result<[usize; 2]> {
        let find = |name: &str| {
            map.index_of(name)
                .ok_or_else(|| Error::Argument(format!("unknown community {name:?}")))
        };
        Ok([find(&self.signal_communities[0])?, find(&self.signal_communities[1])?])
    }

    /// ROIs belonging to either signal community.
    pub fn signal_rois(&self, map: &CommunityMap) -> Result<Vec<usize>> {
        let [a, b] = self.signal_indices(map)?;
        let mut rois = map.members(a);
        rois.extend(map.members(b));
        rois.sort_unstable();
        Ok(rois)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Builds `n_subjects` connectomes over a contiguous 8-community map. Every
/// subject's base correlation is the unit-diagonal normalisation of `R Rᵀ`
/// with `R = L + s·E`, where `L` is shared and `E` is the subject's own
/// Gaussian factor matrix. Labels alternate 0, 1, 0, ...
pub fn synth_generate(config: &SynthConfig) -> Result<ConnectomeDataset> {
    let map = config.validate()?;
    let n = config.n_rois;
    let f = config.factors.unwrap_or(n);
    let [ca, cb] = config.signal_indices(&map)?;
    let assign = map.assignment();
    let linked = |i: usize, j: usize| (assign[i] == ca && assign[j] == cb) || (assign[i] == cb && assign[j] == ca);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shared: Vec<f64> = (0..n * f).map(|_| normal(&mut rng)).collect();
    let width = config.n_subjects.saturating_sub(1).to_string().len().max(4);

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut r = vec![0.0; n * f];
    for s in 0..config.n_subjects {
        let label = s % 2;
        for (ri, li) in r.iter_mut().zip(&shared) {
            *ri = li + config.subject_scale * normal(&mut rng);
        }
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = (0..f).map(|k| r[i * f + k] * r[j * f + k]).sum();
                gram[i * n + j] = dot;
                gram[j * n + i] = dot;
            }
        }
        let mut fc = vec![0.0; n * n];
        for i in 0..n {
            fc[i * n + i] = 1.0;
            for j in i + 1..n {
                let mut v = gram[i * n + j] / (gram[i * n + i] * gram[j * n + j]).sqrt();
                v += config.noise * normal(&mut rng);
                if label == 1 && linked(i, j) {
                    v += config.effect;
                }
                let v = v.clamp(-1.0, 1.0);
                fc[i * n + j] = v;
                fc[j * n + i] = v;
            }
        }
        let fc = Tensor::new(vec![n, n], fc)?;
        subjects.push(Subject::new(format!("sub-{s:0width$}"), label, fc)?);
    }
    ConnectomeDataset::new(subjects, map)
}
