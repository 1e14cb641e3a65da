//! Merge per-run metrics tables into one table aligned by step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::run::{CliResult, Failure, EXIT_CONFIG, EXIT_PREREQUISITE};

struct Table {
    name: String,
    header: Vec<String>,
    rows: BTreeMap<u64, Vec<String>>,
}

fn run_name(dir: &Path, index: usize) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{index}"))
}

fn read_table(dir: &Path, index: usize) -> CliResult<Table> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Failure::new(EXIT_PREREQUISITE, format!("{} has no metrics.csv", dir.display())));
    }
    let bad = |e: csv::Error| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(&path).map_err(bad)?;
    let header: Vec<String> = reader.headers().map_err(bad)?.iter().map(|h| h.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("step") {
        return Err(Failure::new(EXIT_CONFIG, format!("{}: first column must be `step`", path.display())));
    }
    let mut rows = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(bad)?;
        let step: u64 =
            record[0].trim().parse().map_err(|e| Failure::new(EXIT_CONFIG, format!("{} line {}: bad step: {e}", path.display(), i + 2)))?;
        if rows.insert(step, record.iter().skip(1).map(str::to_string).collect()).is_some() {
            return Err(Failure::new(EXIT_CONFIG, format!("{} line {}: duplicate step {step}", path.display(), i + 2)));
        }
    }
    Ok(Table { name: run_name(dir, index), header, rows })
}

fn header_diff(a: &Table, b: &Table) -> String {
    let only = |x: &Table, y: &Table| x.header.iter().filter(|h| !y.header.contains(h)).cloned().collect::<Vec<_>>().join(",");
    format!(
        "columns of {} and {} differ\n  only in {}: [{}]\n  only in {}: [{}]\n  {}: {}\n  {}: {}",
        a.name,
        b.name,
        a.name,
        only(a, b),
        b.name,
        only(b, a),
        a.name,
        a.header.join(","),
        b.name,
        b.header.join(",")
    )
}

/// Columns are `step` followed by `<run>.<column>` for every run. Steps
/// missing from a run are left empty.
pub fn export_metrics(runs: &[PathBuf], output: &Path) -> CliResult {
    let mut tables = runs.iter().enumerate().map(|(i, d)| read_table(d, i)).collect::<CliResult<Vec<_>>>()?;
    for i in 1..tables.len() {
        if tables[i].header != tables[0].header {
            return Err(Failure::new(EXIT_CONFIG, header_diff(&tables[0], &tables[i])));
        }
    }
    // Disambiguate runs that share a directory name.
    let mut seen = BTreeMap::<String, usize>::new();
    for t in &mut tables {
        let n = seen.entry(t.name.clone()).or_default();
        *n += 1;
        if *n > 1 {
            t.name = format!("{}#{n}", t.name);
        }
    }
    let steps: std::collections::BTreeSet<u64> = tables.iter().flat_map(|t| t.rows.keys().copied()).collect();
    let mut w = csv::Writer::from_path(output).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", output.display())))?;
    let mut header = vec!["step".to_string()];
    for t in &tables {
        header.extend(t.header.iter().skip(1).map(|c| format!("{}.{c}", t.name)));
    }
    let io = |e: csv::Error| Failure::new(crate::run::EXIT_FAILURE, e.to_string());
    w.write_record(&header).map_err(io)?;
    for step in steps {
        let mut row = vec![step.to_string()];
        for t in &tables {
            match t.rows.get(&step) {
                Some(values) => row.extend(values.iter().cloned()),
                None => row.extend(std::iter::repeat_n(String::new(), t.header.len() - 1)),
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    eprintln!("merged {} runs into {}", tables.len(), output.display());
    Ok(())
}
