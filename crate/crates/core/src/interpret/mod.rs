//! Gate-weighted ROI scores, attention-row extraction and community rollups
//! for single subjects, plus their JSON and CSV serialisations.

mod report;

pub use report::{
    build_report, emit_report, parse_report_json, report_csvs, report_json, AttentionEntry, AttentionSummary,
    ExpertReport, InterpretOptions, InterpretReport, OrderedMap, Prediction, ReportFormat, RoiEntry,
};

use serde::{Deserialize, Serialize};

use crate::data::CommunityMap;
use crate::error::{Error, Result};
use crate::model::ForwardTrace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Mean,
    PerHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiScore {
    pub roi: usize,
    /// Pooling weight w.
    pub weight: f64,
    /// π · w.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertScores {
    pub expert: usize,
    pub gate_prob: f64,
    /// Selected ROIs in ascending index order; all other ROIs score 0.
    pub rois: Vec<RoiScore>,
}

/// Per-expert `π_e · w_e,i` over each expert's selected ROIs for subject `b`.
pub fn roi_scores(trace: &ForwardTrace, b: usize) -> Result<Vec<ExpertScores>> {
    let moe = trace
        .moe
        .as_ref()
        .ok_or_else(|| Error::Contract("ROI scores need a mixture-of-experts trace".into()))?;
    if b >= trace.batch_size() {
        return Err(Error::Argument(format!(
            "subject {b} out of range for batch of {}",
            trace.batch_size()
        )));
    }
    moe.experts
        .iter()
        .enumerate()
        .map(|(e, ex)| {
            let pi = moe.gate_probs.at(&[b, e]);
            let selected = &ex.selected[b];
            if selected.is_empty() {
                return Err(Error::Contract(format!("expert {e} selected no ROIs")));
            }
            let rois = selected
                .iter()
                .map(|&roi| {
                    let weight = ex.weights.at(&[b, roi]);
                    RoiScore {
                        roi,
                        weight,
                        score: pi * weight,
                    }
                })
                .collect();
            Ok(ExpertScores {
                expert: e,
                gate_prob: pi,
                rois,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub roi: usize,
    /// `None` for the head average.
    pub head: Option<usize>,
    pub values: Vec<f64>,
}

/// Rows of subject `b`'s attention matrix for `rois`, from `layer` (the last
/// one when `None`), averaged over heads or one row per head.
pub fn attention_rows(
    trace: &ForwardTrace,
    b: usize,
    rois: &[usize],
    layer: Option<usize>,
    mode: HeadMode,
) -> Result<Vec<AttentionRow>> {
    let layers = trace.attention.len();
    let layer = layer.unwrap_or(layers.saturating_sub(1));
    let attn = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("layer {layer} out of range ({layers} layers)")))?;
    let s = attn.shape();
    let (batch, heads, t) = (s[0], s[1], s[2]);
    if b >= batch {
        return Err(Error::Argument(format!(
            "subject {b} out of range for batch of {batch}"
        )));
    }
    let row = |h: usize, i: usize| {
        let start = ((b * heads + h) * t + i) * t;
        &attn.data()[start..start + t]
    };
    let mut out = Vec::new();
    for &roi in rois {
        if roi >= t {
            return Err(Error::Argument(format!("ROI {roi} out of range ({t} tokens)")));
        }
        match mode {
            HeadMode::Mean => {
                let mut values = vec![0.0; t];
                for h in 0..heads {
                    for (v, a) in values.iter_mut().zip(row(h, roi)) {
                        *v += a;
                    }
                }
                values.iter_mut().for_each(|v| *v /= heads as f64);
                out.push(AttentionRow {
                    roi,
                    head: None,
                    values,
                });
            }
            HeadMode::PerHead => out.extend((0..heads).map(|h| AttentionRow {
                roi,
                head: Some(h),
                values: row(h, roi).to_vec(),
            })),
        }
    }
    Ok(out)
}

/// Mean of `row` over each community's member ROIs, in community order.
/// Communities without members are left out.
pub fn by_community(row: &[f64], map: &CommunityMap) -> Result<Vec<(usize, f64)>> {
    if row.len() != map.n_rois() {
        return Err(Error::Data(format!(
            "attention row has {} entries, community map covers {} ROIs",
            row.len(),
            map.n_rois()
        )));
    }
    let mut sums = vec![(0.0, 0usize); map.names().len()];
    for (roi, v) in row.iter().enumerate() {
        let c = map.assignment()[roi];
        sums[c].0 += v;
        sums[c].1 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect())
}

/// Source community × target community mean attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollup {
    /// `(source community, [(target community, mean attention)])`, both in
    /// community order.
    pub rows: Vec<(usize, Vec<(usize, f64)>)>,
}

/// Averages the rows of selected ROIs within their source community, then
/// pools each averaged row over every target community's members.
pub fn community_aggregate(rows: &[(usize, Vec<f64>)], map: &CommunityMap) -> Result<Rollup> {
    let c = map.names().len();
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; c];
    for (roi, row) in rows {
        let source = map
            .community_of(*roi)
            .ok_or_else(|| Error::Data(format!("ROI {roi} has no community")))?;
        if row.len() != map.n_rois() {
            return Err(Error::Data(format!(
                "attention row for ROI {roi} has {} entries",
                row.len()
            )));
        }
        let slot = sums[source].get_or_insert_with(|| (vec![0.0; row.len()], 0));
        for (s, v) in slot.0.iter_mut().zip(row) {
            *s += v;
        }
        slot.1 += 1;
    }
    let rows = sums
        .into_iter()
        .enumerate()
        .filter_map(|(source, acc)| acc.map(|(s, n)| (source, s, n)))
        .map(|(source, s, n)| {
            let mean: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
            Ok((source, by_community(&mean, map)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollup { rows })
}
