use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{attention_rows, by_community, community_aggregate, roi_scores, HeadMode};
use crate::data::{CommunityMap, ASD, HC};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;

const ROW_SUM_TOL: f64 = 1e-6;

/// String-keyed map that keeps insertion order when serialised.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrderedMap<V>(pub Vec<(String, V)>);

impl<V> OrderedMap<V> {
    pub fn get(&self, key: &str) -> Option<&V> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

impl<V: Serialize> Serialize for OrderedMap<V> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for OrderedMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct OrderedVisitor<V>(std::marker::PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for OrderedVisitor<V> {
            type Value = OrderedMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = access.next_entry()? {
                    entries.push(entry);
                }
                Ok(OrderedMap(entries))
            }
        }

        deserializer.deserialize_map(OrderedVisitor(std::marker::PhantomData))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub label: usize,
    pub prob_asd: f64,
    pub prob_hc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiEntry {
    pub roi: usize,
    pub community: String,
    pub weight: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertReport {
    pub index: usize,
    pub k: usize,
    pub rois: Vec<RoiEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionEntry {
    pub roi: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub by_community: OrderedMap<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSummary {
    pub mode: HeadMode,
    pub layer: usize,
    pub rows: Vec<AttentionEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretReport {
    pub subject_id: String,
    pub prediction: Prediction,
    pub gate_probs: Vec<f64>,
    pub experts: Vec<ExpertReport>,
    pub attention: AttentionSummary,
    pub rollup: OrderedMap<OrderedMap<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InterpretOptions {
    /// Encoder layer to read attention from; the last when `None`.
    pub layer: Option<usize>,
    pub head_mode: HeadMode,
}

fn softmax2(logits: &[f64]) -> (f64, f64) {
    let m = logits[HC].max(logits[ASD]);
    let (h, a) = ((logits[HC] - m).exp(), (logits[ASD] - m).exp());
    (h / (h + a), a / (h + a))
}

/// Assembles the report for subject `b` of a traced batch. The attention
/// summary covers the union of all experts' selected ROIs.
pub fn build_report(
    trace: &ForwardTrace,
    b: usize,
    subject_id: &str,
    map: &CommunityMap,
    options: InterpretOptions,
) -> Result<InterpretReport> {
    let scores = roi_scores(trace, b)?;
    let moe = trace.moe.as_ref().expect("roi_scores checked the decoder");
    let n = map.n_rois();
    if trace.attention.first().map(|a| a.shape()[2]) != Some(n) {
        return Err(Error::Data(format!(
            "trace tokens do not match the {n}-ROI community map"
        )));
    }
    let name = |roi: usize| {
        map.name_of(roi)
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("ROI {roi} has no community")))
    };

    let logits = trace.logits.row(b);
    if logits.len() != 2 {
        return Err(Error::Contract("reports assume two classes".into()));
    }
    let (prob_hc, prob_asd) = softmax2(logits);
    let prediction = Prediction {
        label: if logits[ASD] > logits[HC] { ASD } else { HC },
        prob_asd,
        prob_hc,
    };

    let experts = scores
        .iter()
        .zip(&moe.experts)
        .map(|(s, ex)| {
            let rois = s
                .rois
                .iter()
                .map(|r| {
                    Ok(RoiEntry {
                        roi: r.roi,
                        community: name(r.roi)?,
                        weight: r.weight,
                        score: r.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExpertReport {
                index: s.expert,
                k: ex.k,
                rois,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut selected: Vec<usize> = scores.iter().flat_map(|s| s.rois.iter().map(|r| r.roi)).collect();
    selected.sort_unstable();
    selected.dedup();
    let layer = options.layer.unwrap_or(trace.attention.len().saturating_sub(1));
    let rows = attention_rows(trace, b, &selected, Some(layer), options.head_mode)?;
    let community_names = map.names();
    let mut entries = Vec::with_capacity(rows.len());
    for row in &rows {
        let total: f64 = row.values.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Contract(format!(
                "attention row for ROI {} sums to {total}",
                row.roi
            )));
        }
        let pooled = by_community(&row.values, map)?;
        entries.push(AttentionEntry {
            roi: row.roi,
            head: row.head,
            by_community: OrderedMap(
                pooled
                    .into_iter()
                    .map(|(c, v)| (community_names[c].clone(), v))
                    .collect(),
            ),
        });
    }

    // the rollup always uses head-averaged rows
    let mean_rows: Vec<(usize, Vec<f64>)> = match options.head_mode {
        HeadMode::Mean => rows.into_iter().map(|r| (r.roi, r.values)).collect(),
        HeadMode::PerHead => attention_rows(trace, b, &selected, Some(layer), HeadMode::Mean)?
            .into_iter()
            .map(|r| (r.roi, r.values))
            .collect(),
    };
    let rollup = community_aggregate(&mean_rows, map)?;
    let rollup = OrderedMap(
        rollup
            .rows
            .into_iter()
            .map(|(source, targets)| {
                let targets = targets
                    .into_iter()
                    .map(|(t, v)| (community_names[t].clone(), v))
                    .collect();
                (community_names[source].clone(), OrderedMap(targets))
            })
            .collect(),
    );

    Ok(InterpretReport {
        subject_id: subject_id.to_string(),
        prediction,
        gate_probs: scores.iter().map(|s| s.gate_prob).collect(),
        experts,
        attention: AttentionSummary {
            mode: options.head_mode,
            layer,
            rows: entries,
        },
        rollup,
    })
}

/// `v` rounded to 6 decimal places, with negative zero folded to zero.
fn dp6(v: f64) -> f64 {
    format!("{v:.6}").parse::<f64>().expect("formatted float parses") + 0.0
}

impl InterpretReport {
    /// Copy with every float rounded to 6 decimal places.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        r.prediction.prob_asd = dp6(r.prediction.prob_asd);
        r.prediction.prob_hc = dp6(r.prediction.prob_hc);
        r.gate_probs.iter_mut().for_each(|p| *p = dp6(*p));
        for e in &mut r.experts {
            for roi in &mut e.rois {
                roi.weight = dp6(roi.weight);
                roi.score = dp6(roi.score);
            }
        }
        for row in &mut r.attention.rows {
            row.by_community.0.iter_mut().for_each(|(_, v)| *v = dp6(*v));
        }
        for (_, targets) in &mut r.rollup.0 {
            targets.0.iter_mut().for_each(|(_, v)| *v = dp6(*v));
        }
        r
    }

    fn check_complete(&self) -> Result<()> {
        if self.experts.is_empty() || self.experts.iter().any(|e| e.rois.is_empty()) {
            return Err(Error::Contract("report has an expert with no selected ROIs".into()));
        }
        Ok(())
    }
}

/// Pretty JSON with floats at 6 decimal places.
pub fn report_json(report: &InterpretReport) -> Result<String> {
    report.check_complete()?;
    Ok(serde_json::to_string_pretty(&report.rounded())? + "\n")
}

pub fn parse_report_json(text: &str) -> Result<InterpretReport> {
    Ok(serde_json::from_str(text)?)
}

/// `(roi_scores.csv, attention.csv)` contents. Per-head reports add a
/// `head` column to the attention table.
pub fn report_csvs(report: &InterpretReport) -> Result<(String, String)> {
    report.check_complete()?;
    let mut scores = String::from("expert,roi_index,community,weight,score\n");
    for e in &report.experts {
        for r in &e.rois {
            scores += &format!(
                "{},{},{},{:.6},{:.6}\n",
                e.index,
                r.roi,
                csv_field(&r.community),
                r.weight,
                r.score
            );
        }
    }
    let per_head = report.attention.mode == HeadMode::PerHead;
    let mut attention = String::from(if per_head {
        "roi_index,head,target_community,mean_attention\n"
    } else {
        "roi_index,target_community,mean_attention\n"
    });
    for row in &report.attention.rows {
        for (community, v) in &row.by_community.0 {
            let v = dp6(*v);
            match row.head {
                Some(h) if per_head => attention += &format!("{},{h},{},{v:.6}\n", row.roi, csv_field(community)),
                _ => attention += &format!("{},{},{v:.6}\n", row.roi, csv_field(community)),
            }
        }
    }
    Ok((scores, attention))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

/// Writes `<id>.json`, or `<id>.roi_scores.csv` and `<id>.attention.csv`,
/// into `dir`. Returns the written paths.
pub fn emit_report(report: &InterpretReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    let stem: String = report
        .subject_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let write = |name: String, text: String| -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    match format {
        ReportFormat::Json => Ok(vec![write(format!("{stem}.json"), report_json(report)?)?]),
        ReportFormat::Csv => {
            let (scores, attention) = report_csvs(report)?;
            Ok(vec![
                write(format!("{stem}.roi_scores.csv"), scores)?,
                write(format!("{stem}.attention.csv"), attention)?,
            ])
        }
    }
}
