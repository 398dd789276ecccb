use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentReport};
use crate::error::{Error, Result};
use crate::vocab::LanguageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Base,
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub language: LanguageId,
    pub group: Group,
    pub error_rate: f64,
    /// Base-model error on the same test set (base languages only).
    pub error_before: Option<f64>,
    pub forgetting: Option<f64>,
    pub inc_params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    TextTable,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text" | "text-table" => Ok(ReportFormat::TextTable),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::TextTable => "txt",
        }
    }
}

/// Flat CSV record. Summary lines use `group = "summary"` and carry their
/// value in `error_rate` (or `inc_params`).
#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    method: String,
    seed: u64,
    language: String,
    group: String,
    error_rate: Option<f64>,
    error_before: Option<f64>,
    forgetting: Option<f64>,
    inc_params: Option<f64>,
}

const SUMMARIES: [&str; 5] = ["base_average", "new_average", "overall_average", "forgetting_delta", "inc_params_avg"];

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let rec = |language: String, group: &str| CsvRecord {
            method: self.method.clone(),
            seed: self.seed,
            language,
            group: group.into(),
            error_rate: None,
            error_before: None,
            forgetting: None,
            inc_params: None,
        };
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        for l in &self.languages {
            let group = match l.group {
                Group::Base => "base",
                Group::New => "new",
            };
            w.serialize(CsvRecord {
                error_rate: Some(l.error_rate),
                error_before: l.error_before,
                forgetting: l.forgetting,
                inc_params: Some(l.inc_params as f64),
                ..rec(l.language.to_string(), group)
            })
            .map_err(io)?;
        }
        let values = [Some(self.base_average), Some(self.new_average), Some(self.overall_average), self.forgetting_delta, Some(self.inc_params_avg)];
        for (name, v) in SUMMARIES.iter().zip(values) {
            w.serialize(CsvRecord { error_rate: v, ..rec(name.to_string(), "summary") }).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// Rebuilds a report from its CSV form; the config is not part of the
    /// CSV and is supplied by the caller.
    pub fn from_csv(text: &str, config: &ExperimentConfig) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let bad = |m: String| Error::Data(format!("csv report: {m}"));
        let mut languages = Vec::new();
        let mut summary = [None; 5];
        let (mut method, mut seed) = (None, 0);
        for rec in rd.deserialize::<CsvRecord>() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            method.get_or_insert_with(|| rec.method.clone());
            seed = rec.seed;
            let group = match rec.group.as_str() {
                "base" => Group::Base,
                "new" => Group::New,
                "summary" => {
                    let i = SUMMARIES.iter().position(|s| *s == rec.language).ok_or_else(|| bad(format!("unknown summary {}", rec.language)))?;
                    summary[i] = rec.error_rate;
                    continue;
                }
                g => return Err(bad(format!("unknown group {g}"))),
            };
            let id = rec.language.strip_prefix('L').and_then(|n| n.parse().ok()).ok_or_else(|| bad(format!("bad language {}", rec.language)))?;
            languages.push(LanguageRow {
                language: LanguageId(id),
                group,
                error_rate: rec.error_rate.ok_or_else(|| bad("missing error rate".into()))?,
                error_before: rec.error_before,
                forgetting: rec.forgetting,
                inc_params: rec.inc_params.unwrap_or(0.0) as usize,
            });
        }
        let need = |i: usize| summary[i].ok_or_else(|| bad(format!("missing {}", SUMMARIES[i])));
        Ok(Self {
            method: method.ok_or_else(|| bad("empty".into()))?,
            seed,
            languages,
            base_average: need(0)?,
            new_average: need(1)?,
            overall_average: need(2)?,
            forgetting_delta: summary[3],
            inc_params_avg: need(4)?,
            config: config.clone(),
            wall_time_s: 0.0,
        })
    }
}

fn pct(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{:.2}", 100.0 * x)
    }
}

/// Table with columns method, inc. params, base-avg, one per new language,
/// avg. Error rates are percentages.
pub fn text_table(reports: &[&ExperimentReport]) -> String {
    let mut new_langs: Vec<LanguageId> = Vec::new();
    for r in reports {
        for l in r.languages.iter().filter(|l| l.group == Group::New) {
            if !new_langs.contains(&l.language) {
                new_langs.push(l.language);
            }
        }
    }
    let mut header = vec!["method".to_string(), "inc. params".into(), "base-avg".into()];
    header.extend(new_langs.iter().map(|l| l.to_string()));
    header.push("avg".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.method.clone(), format!("{:.0}", r.inc_params_avg), pct(r.base_average)];
        row.extend(new_langs.iter().map(|&id| r.row(id).map_or("-".into(), |l| pct(l.error_rate))));
        row.push(pct(r.overall_average));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
        }
    }
    out
}

/// Writes `report` to `path` in the given format.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::TextTable => text_table(&[report]),
    };
    std::fs::write(path, text)?;
    Ok(())
}
