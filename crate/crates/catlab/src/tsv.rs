//! Parallel-corpus TSV files (`source \t target [\t url]`) and JSON-lines
//! record files, which keep each record's corpus id.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use catlab_core::corpus::{parse_tsv_line, CorpusRecord, TsvLine};
use serde::Serialize;

/// Line counts from one ingest pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub records: usize,
    pub malformed: usize,
    pub blank: usize,
}

/// Reads a TSV corpus, skipping blank lines and counting malformed ones.
pub fn read_tsv(path: &Path, corpus_id: &str) -> Result<(Vec<CorpusRecord>, IngestStats)> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut stats = IngestStats::default();
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        match parse_tsv_line(&line?, corpus_id) {
            TsvLine::Record(r) => {
                stats.records += 1;
                records.push(r);
            }
            TsvLine::Malformed => stats.malformed += 1,
            TsvLine::Blank => stats.blank += 1,
        }
    }
    if stats.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), stats.malformed);
    }
    Ok((records, stats))
}

pub fn write_tsv(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        match &r.url {
            Some(u) => writeln!(w, "{}\t{}\t{}", r.source, r.target, u)?,
            None => writeln!(w, "{}\t{}", r.source, r.target)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Reads plain text, one segment per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}
