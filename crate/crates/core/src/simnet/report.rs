use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::experiments::{median, BytesRow, LatencyRow, LossRow};
use super::SimError;

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| SimError::Runtime(format!("{}: {e}", path.display())))
}

/// Pivots `(x, series, value)` into one row per x with a column per series.
fn wide(path: &Path, x_name: &str, cells: &[(String, String, String)]) -> Result<(), SimError> {
    let mut series: Vec<&str> = Vec::new();
    let mut rows: BTreeMap<(u64, &str), BTreeMap<&str, &str>> = BTreeMap::new();
    for (x, s, v) in cells {
        if !series.contains(&s.as_str()) {
            series.push(s);
        }
        let key = (x.parse::<u64>().unwrap_or(u64::MAX), x.as_str());
        rows.entry(key).or_default().insert(s, v);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Runtime(e.to_string()))?;
    let header: Vec<&str> = std::iter::once(x_name).chain(series.iter().copied()).collect();
    w.write_record(&header).map_err(|e| SimError::Runtime(e.to_string()))?;
    for ((_, x), vals) in &rows {
        let rec: Vec<&str> = std::iter::once(*x).chain(series.iter().map(|s| vals.get(s).copied().unwrap_or(""))).collect();
        w.write_record(&rec).map_err(|e| SimError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregates whatever raw tables `dir` holds into plot-ready CSVs: median
/// latency and bytes with one column per tree/aggregate series, and loss
/// percentages per probability. Returns the files written.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    let mut written = Vec::new();
    let raw = dir.join("latency_raw.csv");
    if raw.exists() {
        let rows: Vec<LatencyRow> = read_rows(&raw)?;
        let mut groups: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            let s = format!("{}-{}", r.topology, r.op);
            if !order.contains(&s) {
                order.push(s.clone());
            }
            groups.entry((r.n, s)).or_default().push(r.latency_ms);
        }
        let mut cells = Vec::new();
        for s in &order {
            for ((n, gs), xs) in &groups {
                if gs == s {
                    cells.push((n.to_string(), s.clone(), format!("{:.3}", median(xs).unwrap_or(0.0))));
                }
            }
        }
        let out = dir.join("latency_report.csv");
        wide(&out, "n", &cells)?;
        written.push(out);
    }
    let bytes = dir.join("bytes.csv");
    if bytes.exists() {
        let rows: Vec<BytesRow> = read_rows(&bytes)?;
        let cells: Vec<_> = rows
            .iter()
            .map(|r| (r.n.to_string(), format!("{}-{}", r.topology, r.op), r.total_bytes.to_string()))
            .collect();
        let out = dir.join("bytes_report.csv");
        wide(&out, "n", &cells)?;
        written.push(out);
    }
    let loss = dir.join("loss.csv");
    if loss.exists() {
        let rows: Vec<LossRow> = read_rows(&loss)?;
        let out = dir.join("loss_report.csv");
        let mut w = csv::Writer::from_path(&out).map_err(|e| SimError::Runtime(e.to_string()))?;
        w.write_record(["p", "percent_lossy", "expected_percent", "mean_nodes_lost"])
            .map_err(|e| SimError::Runtime(e.to_string()))?;
        for r in &rows {
            w.write_record([
                r.p.to_string(),
                format!("{:.1}", r.lossy_fraction * 100.0),
                format!("{:.1}", r.expected_fraction * 100.0),
                format!("{:.2}", r.mean_nodes_lost),
            ])
            .map_err(|e| SimError::Runtime(e.to_string()))?;
        }
        w.flush()?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(SimError::Config {
            field: dir.display().to_string(),
            reason: "no latency_raw.csv, bytes.csv or loss.csv to report on".into(),
        });
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_medians_pivot_by_series() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("latency_raw.csv"),
            "n,topology,op,rep,latency_ms\n\
             64,DTREE,MIN,0,5\n64,DTREE,MIN,1,1\n64,DTREE,MIN,2,3\n\
             64,TTREE,MIN,0,2\n64,TTREE,MIN,1,4\n\
             128,DTREE,MIN,0,9\n",
        )
        .unwrap();
        let out = report(dir.path()).unwrap();
        assert_eq!(out.len(), 1);
        let text = std::fs::read_to_string(&out[0]).unwrap();
        assert_eq!(text, "n,DTREE-MIN,TTREE-MIN\n64,3.000,3.000\n128,9.000,\n");
    }

    #[test]
    fn empty_dir_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(SimError::Config { .. })));
    }
}
