//! Tab-separated score and rank tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};

use super::rank::{DatasetScores, RankSummary, ScoreTable};

pub const SCORE_HEADER: &str = "method\tdataset\tcase\tmetric\tvalue";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub method: String,
    pub dataset: String,
    pub case: String,
    pub metric: String,
    pub value: f64,
}

pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut s = format!("{SCORE_HEADER}\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{}\t{}", r.method, r.dataset, r.case, r.metric, r.value).expect("string write");
    }
    s
}

fn parse_rows(text: &str) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') || line == SCORE_HEADER {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 5 {
            return Err(Error::Config(format!("score table line {}: expected 5 columns, got {}", i + 1, c.len())));
        }
        let value = c[4]
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("score table line {}: bad value `{}`", i + 1, c[4])))?;
        rows.push(ScoreRow {
            method: c[0].into(),
            dataset: c[1].into(),
            case: c[2].into(),
            metric: c[3].into(),
            value,
        });
    }
    Ok(rows)
}

/// Builds the score table of `metric` from concatenated TSV files. Methods,
/// datasets and cases are ordered by first appearance.
pub fn parse_scores(texts: &[&str], metric: &str) -> Result<ScoreTable> {
    let mut methods: Vec<String> = Vec::new();
    let mut datasets: Vec<(String, Vec<String>)> = Vec::new();
    let mut values: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for text in texts {
        for r in parse_rows(text)?.into_iter().filter(|r| r.metric == metric) {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            let pos = match datasets.iter().position(|(d, _)| *d == r.dataset) {
                Some(p) => p,
                None => {
                    datasets.push((r.dataset.clone(), Vec::new()));
                    datasets.len() - 1
                }
            };
            if !datasets[pos].1.contains(&r.case) {
                datasets[pos].1.push(r.case.clone());
            }
            let key = (r.method, r.dataset, r.case);
            if values.insert(key.clone(), r.value).is_some() {
                return Err(Error::Config(format!("duplicate score for {key:?} ({metric})")));
            }
        }
    }
    if methods.is_empty() {
        return Err(Error::Config(format!("no rows for metric `{metric}`")));
    }
    let mut out = Vec::new();
    for (name, cases) in datasets {
        let mut scores = Vec::new();
        for m in &methods {
            let mut row = Vec::new();
            for c in &cases {
                let v = values.get(&(m.clone(), name.clone(), c.clone())).ok_or_else(|| {
                    Error::Config(format!("missing {metric} score for method {m}, dataset {name}, case {c}"))
                })?;
                row.push(*v);
            }
            scores.push(row);
        }
        out.push(DatasetScores { name, cases, scores });
    }
    let table = ScoreTable {
        metric: metric.into(),
        methods,
        datasets: out,
    };
    Ok(table)
}

pub fn format_rank_summary(s: &RankSummary) -> String {
    let mut out = String::from("method\tpoint_rank\tmean_rank\tp_first\tq05\tq95\n");
    for (k, m) in s.methods.iter().enumerate() {
        writeln!(
            out,
            "{m}\t{}\t{:.6}\t{:.6}\t{}\t{}",
            s.point_ranks[k],
            s.mean_rank[k],
            s.p_first(k),
            s.quantile(k, 0.05),
            s.quantile(k, 0.95)
        )
        .expect("string write");
    }
    out
}
