//! Report files: `{stem}.json` holds the full report and `{stem}.tsv` a
//! header comment block with the provenance fields followed by the table.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use catlab_core::experiment::{Report, Value};

fn cell(v: &Value) -> String {
    match v {
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Num(x) => format!("{x:.4}"),
        Value::Text(s) => s.clone(),
    }
}

pub fn to_tsv(report: &Report) -> String {
    let mut out = format!(
        "# kind: {}\n# experiment: {}\n# config_hash: {}\n# metric: {}\n",
        report.kind, report.experiment, report.config_hash, report.metric_signature
    );
    let seeds: Vec<String> = report.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
    out += &format!("# seeds: {}\n", seeds.join(" "));
    out += &report.columns.join("\t");
    out.push('\n');
    for row in &report.rows {
        let cells: Vec<String> = row.iter().map(cell).collect();
        out += &cells.join("\t");
        out.push('\n');
    }
    out
}

/// Writes `{dir}/{stem}.json` and `{dir}/{stem}.tsv`.
pub fn write_report(dir: &Path, stem: &str, report: &Report) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(format!("{stem}.tsv")), to_tsv(report))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
