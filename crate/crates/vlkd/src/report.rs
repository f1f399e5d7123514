//! Report rendering: aligned markdown tables and JSON-lines records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vlkd_core::ablation::{AblationReport, AblationRow, Stat};
use vlkd_core::eval::EvalReport;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Table,
    Records,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Table => "md",
            Format::Records => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header { eval_samples: usize, teacher_accuracy: f64 },
    Row(AblationRow),
}

pub const COLUMNS: [&str; 6] = ["config", "accuracy", "agreement", "held-out loss", "avg", "distillation"];

fn stat(s: &Stat) -> String {
    format!("{:.2} ± {:.2}", s.mean, s.std)
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let mut s = String::from("|");
        for (i, c) in cells.iter().enumerate() {
            let pad = w[i] - c.chars().count();
            let _ = write!(s, " {c}{} |", " ".repeat(pad));
        }
        s.push('\n');
        s
    };
    let mut out = line(header.iter().map(|h| h.to_string()).collect());
    out.push_str(&line(w.iter().map(|&n| "-".repeat(n)).collect()));
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

/// Markdown table, one row per configuration in matrix order.
pub fn ablation_table(r: &AblationReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                row.name.clone(),
                stat(&row.accuracy),
                stat(&row.agreement),
                format!("{:.4} ± {:.4}", row.heldout_loss.mean, row.heldout_loss.std),
                stat(&row.avg),
                row.summary.clone(),
            ]
        })
        .collect();
    let seeds = r.rows.first().map(|x| x.seeds.len()).unwrap_or(0);
    format!(
        "{}\n{} eval samples, {seeds} seed(s), teacher accuracy {:.2}\n",
        table(&COLUMNS, &rows),
        r.eval_samples,
        r.teacher_accuracy
    )
}

pub fn ablation_records(r: &AblationReport) -> String {
    let mut out = String::new();
    let head = Line::Header {
        eval_samples: r.eval_samples,
        teacher_accuracy: r.teacher_accuracy,
    };
    out.push_str(&serde_json::to_string(&head).expect("serializes"));
    out.push('\n');
    for row in &r.rows {
        out.push_str(&serde_json::to_string(&Line::Row(row.clone())).expect("serializes"));
        out.push('\n');
    }
    out
}

pub fn render_ablation(r: &AblationReport, format: Format) -> String {
    match format {
        Format::Table => ablation_table(r),
        Format::Records => ablation_records(r),
    }
}

/// Inverse of [`ablation_records`].
pub fn parse_ablation_records(text: &str, path: &Path) -> Result<AblationReport> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Error::format(path, "empty report"))?;
    let Line::Header {
        eval_samples,
        teacher_accuracy,
    } = serde_json::from_str(first).map_err(|e| Error::format(path, e))?
    else {
        return Err(Error::format(path, "report does not start with a header record"));
    };
    let mut rows = Vec::new();
    for l in lines {
        match serde_json::from_str(l).map_err(|e| Error::format(path, e))? {
            Line::Row(r) => rows.push(r),
            Line::Header { .. } => return Err(Error::format(path, "second header record")),
        }
    }
    Ok(AblationReport {
        eval_samples,
        teacher_accuracy,
        rows,
    })
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

/// One evaluated model.
pub fn render_eval(name: &str, r: &EvalReport, format: Format) -> String {
    match format {
        Format::Table => {
            let mut header: Vec<String> = ["config", "accuracy", "agreement", "held-out loss"].map(String::from).to_vec();
            let mut row = vec![
                name.to_string(),
                format!("{:.2}", r.accuracy),
                opt_pct(r.agreement),
                format!("{:.4}", r.heldout_loss),
            ];
            for f in &r.per_family {
                header.push(f.family.name().to_string());
                row.push(format!("{:.2}", f.accuracy));
            }
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            format!("{}\n{} eval samples\n", table(&h, &[row]), r.samples)
        }
        Format::Records => {
            let mut s = serde_json::to_string(r).expect("serializes");
            s.push('\n');
            s
        }
    }
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlkd_core::ablation::DataSource;
    use vlkd_core::data::QuestionFamily;
    use vlkd_core::eval::FamilyAccuracy;

    fn eval(acc: f64) -> EvalReport {
        EvalReport {
            accuracy: acc,
            per_family: vec![FamilyAccuracy {
                family: QuestionFamily::Count,
                correct: 1,
                total: 3,
                accuracy: 100.0 / 3.0,
            }],
            agreement: Some(acc / 2.0),
            heldout_loss: 0.1 + acc / 7.0,
            samples: 3,
        }
    }

    fn row(name: &str, accs: &[f64]) -> AblationRow {
        let runs: Vec<EvalReport> = accs.iter().map(|&a| eval(a)).collect();
        let acc: Vec<f64> = accs.to_vec();
        let agr: Vec<f64> = runs.iter().map(|r| r.agreement.unwrap()).collect();
        AblationRow {
            name: name.into(),
            summary: "ce only".into(),
            data: DataSource::Original,
            seeds: (0..accs.len() as u64).collect(),
            accuracy: Stat::of(&acc),
            agreement: Stat::of(&agr),
            heldout_loss: Stat::of(&runs.iter().map(|r| r.heldout_loss).collect::<Vec<_>>()),
            avg: Stat::of(&acc.iter().zip(&agr).map(|(a, b)| (a + b) / 2.0).collect::<Vec<_>>()),
            runs,
        }
    }

    fn report(rows: Vec<AblationRow>) -> AblationReport {
        AblationReport {
            eval_samples: 3,
            teacher_accuracy: 91.25,
            rows,
        }
    }

    #[test]
    fn one_row_table_is_header_plus_baseline() {
        let t = ablation_table(&report(vec![row("baseline", &[33.3])]));
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("| config"));
        assert!(lines[1].starts_with("| ---"));
        assert!(lines[2].starts_with("| baseline"));
        assert!(lines[3].is_empty());
    }

    #[test]
    fn column_order() {
        let t = ablation_table(&report(vec![row("baseline", &[1.0])]));
        let head: Vec<&str> = t.lines().next().unwrap().split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(&head[..4], &["config", "accuracy", "agreement", "held-out loss"]);
    }

    #[test]
    fn records_round_trip() {
        let r = report(vec![row("baseline", &[1.0, 2.0, 1.0 / 3.0]), row("forward_kl", &[0.1, 0.7, 99.9])]);
        let text = ablation_records(&r);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_ablation_records(&text, Path::new("r")).unwrap(), r);
    }

    #[test]
    fn table_columns_align() {
        let t = ablation_table(&report(vec![row("baseline", &[1.0]), row("a much longer name", &[100.0])]));
        let widths: Vec<usize> = t.lines().take(4).map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn eval_render() {
        let t = render_eval("m", &eval(50.0), Format::Table);
        assert!(t.contains("count"));
        let r = render_eval("m", &eval(50.0), Format::Records);
        let back: EvalReport = serde_json::from_str(r.trim()).unwrap();
        assert_eq!(back, eval(50.0));
    }
}
