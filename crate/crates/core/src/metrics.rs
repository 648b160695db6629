//! Area under the ROC curve, overall accuracy at threshold 0.5, and
//! per-subset reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::classifier::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub label: Label,
    pub p_fake: f64,
    pub subset: String,
}

fn check_scores(scores: &[f64]) -> Result<()> {
    match scores
        .iter()
        .find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s)))
    {
        Some(bad) => Err(Error::Contract(format!("score {bad} is not a probability"))),
        None => Ok(()),
    }
}

/// Mann-Whitney AUC of `scores` with fake as the positive class; tied
/// positive/negative pairs earn half credit.
pub fn auc_scores(labels: &[Label], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let mut pairs: Vec<(f64, Label)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let positives = labels.iter().filter(|l| l.is_fake()).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (got {positives} fake, {negatives} real)"
        )));
    }

    // counts are in half-pair units so ties stay integral
    let mut credit: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1.is_fake() {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        credit += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(credit as f64 / (2 * positives * negatives) as f64)
}

pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.p_fake).collect();
    check_scores(&scores)?;
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    auc_scores(&labels, &scores)
}

/// Fraction of records whose thresholded prediction (`p_fake >= 0.5` is fake)
/// matches the label.
pub fn overall_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("accuracy of an empty record set".into()));
    }
    let correct = records
        .iter()
        .filter(|r| (r.p_fake >= 0.5) == r.label.is_fake())
        .count();
    Ok(correct as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetMetrics {
    pub subset: String,
    pub count: usize,
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the subset holds a single class.
    pub auc: Option<f64>,
    pub oa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub subsets: Vec<SubsetMetrics>,
    /// Unweighted mean over subsets with a defined AUC.
    pub macro_auc: Option<f64>,
    pub macro_oa: f64,
    pub diagnostics: Vec<String>,
    pub config: Vec<(String, String)>,
    pub records: Vec<EvalRecord>,
}

/// Per-subset AUC and OA plus unweighted macro averages, subsets in
/// lexicographic order.
pub fn report(records: &[EvalRecord], config: Vec<(String, String)>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Contract("report over no records".into()));
    }
    let mut groups: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        if r.subset.is_empty() {
            return Err(Error::Contract(format!(
                "record `{}` has no subset tag",
                r.sample_id
            )));
        }
        groups.entry(r.subset.as_str()).or_default().push(r.clone());
    }
    let mut subsets = Vec::with_capacity(groups.len());
    let mut diagnostics = Vec::new();
    for (tag, group) in &groups {
        let auc = match auc(group) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(msg)) => {
                diagnostics.push(format!("subset `{tag}`: {msg}; excluded from macro AUC"));
                None
            }
            Err(e) => return Err(e),
        };
        let positives = group.iter().filter(|r| r.label.is_fake()).count();
        subsets.push(SubsetMetrics {
            subset: tag.to_string(),
            count: group.len(),
            positives,
            negatives: group.len() - positives,
            auc,
            oa: overall_accuracy(group)?,
        });
    }
    let defined: Vec<f64> = subsets.iter().filter_map(|s| s.auc).collect();
    let macro_auc =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let macro_oa = subsets.iter().map(|s| s.oa).sum::<f64>() / subsets.len() as f64;
    let mut records = records.to_vec();
    records.sort_by(|a, b| {
        a.subset
            .cmp(&b.subset)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(MetricsReport {
        subsets,
        macro_auc,
        macro_oa,
        diagnostics,
        config,
        records,
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.16e}"))
}

impl MetricsReport {
    /// `key = value` lines in a fixed order, then one tab-separated line per record.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# metrics report\n");
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        for m in &self.subsets {
            let p = format!("subset.{}", m.subset);
            s.push_str(&format!("{p}.count = {}\n", m.count));
            s.push_str(&format!("{p}.positives = {}\n", m.positives));
            s.push_str(&format!("{p}.negatives = {}\n", m.negatives));
            s.push_str(&format!("{p}.auc = {}\n", fmt_metric(m.auc)));
            s.push_str(&format!("{p}.oa = {}\n", fmt_metric(Some(m.oa))));
        }
        s.push_str(&format!("macro.auc = {}\n", fmt_metric(self.macro_auc)));
        s.push_str(&format!("macro.oa = {}\n", fmt_metric(Some(self.macro_oa))));
        for d in &self.diagnostics {
            s.push_str(&format!("# diagnostic: {d}\n"));
        }
        s.push_str("# records: sample_id\tsubset\tlabel\tp_fake\n");
        for r in &self.records {
            s.push_str(&format!(
                "record\t{}\t{}\t{}\t{:.16e}\n",
                r.sample_id, r.subset, r.label, r.p_fake
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}
