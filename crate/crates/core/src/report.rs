//! Accuracy tables, row-normalized confusion matrices and CSV exports.
//!
//! Everything here is a pure function of a list of [`EvalResult`]s; the
//! only side effects are in [`ReportBundle::write`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SetId;
use crate::error::{Error, Result};
use crate::pipeline::{EvalResult, ModelKind, RunManifest};

pub const RESULTS_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Divides each row by its sum.
pub fn normalize_confusion(confusion: &[Vec<u64>], devices: &[usize]) -> Result<Vec<Vec<f64>>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                let dev = devices.get(i).copied().unwrap_or(i);
                return Err(Error::invalid(format!("device {dev} has no test frames")));
            }
            Ok(row.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect()
}

/// Percent with one decimal, e.g. `0.719` → `"71.9"`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Rows are `DayA_S{i} → DayB_S{j}` set pairs; columns are models within
/// each direction between two days.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub days: (usize, usize),
    pub num_devices: usize,
    pub directions: Vec<(usize, usize)>,
    pub models: Vec<ModelKind>,
    /// `(source set, target set)` per row.
    pub rows: Vec<(usize, usize)>,
    /// `cells[row][direction * models.len() + model]`.
    pub cells: Vec<Vec<Cell>>,
}

fn accuracies_by_cell(results: &[EvalResult]) -> BTreeMap<(SetId, SetId, ModelKind), Vec<f64>> {
    let mut map: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in results {
        map.entry((r.source, r.target, r.model)).or_default().push(r.accuracy);
    }
    map
}

pub fn render_accuracy_table(results: &[EvalResult], days: (usize, usize)) -> Result<AccuracyTable> {
    let (a, b) = days;
    let relevant: Vec<&EvalResult> = results
        .iter()
        .filter(|r| {
            let d = (r.source.day, r.target.day);
            d == (a, b) || d == (b, a)
        })
        .collect();
    if relevant.is_empty() {
        return Err(Error::invalid(format!(
            "no results between day {} and day {}",
            a + 1,
            b + 1
        )));
    }
    let directions: Vec<(usize, usize)> = [(a, b), (b, a)]
        .into_iter()
        .filter(|d| relevant.iter().any(|r| (r.source.day, r.target.day) == *d))
        .collect();
    let present: BTreeSet<ModelKind> = relevant.iter().map(|r| r.model).collect();
    let models: Vec<ModelKind> = ModelKind::ALL.into_iter().filter(|m| present.contains(m)).collect();
    let rows: Vec<(usize, usize)> = relevant
        .iter()
        .map(|r| (r.source.set, r.target.set))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let by_cell = accuracies_by_cell(results);
    let mut missing = Vec::new();
    let mut cells = Vec::with_capacity(rows.len());
    for &(ss, ts) in &rows {
        let mut line = Vec::new();
        for &(sd, td) in &directions {
            for &m in &models {
                let key = (SetId::new(sd, ss), SetId::new(td, ts), m);
                match by_cell.get(&key) {
                    Some(v) => {
                        let (mean, std) = mean_std(v);
                        line.push(Cell {
                            mean,
                            std,
                            runs: v.len(),
                        });
                    }
                    None => {
                        missing.push(format!("{}->{} {m}", key.0, key.1));
                        line.push(Cell {
                            mean: f64::NAN,
                            std: f64::NAN,
                            runs: 0,
                        });
                    }
                }
            }
        }
        cells.push(line);
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!("missing table cells: {}", missing.join(", "))));
    }
    Ok(AccuracyTable {
        days,
        num_devices: relevant.iter().map(|r| r.devices.len()).max().unwrap_or(0),
        directions,
        models,
        rows,
        cells,
    })
}

impl AccuracyTable {
    fn row_label(&self, row: usize) -> String {
        let (ss, ts) = self.rows[row];
        format!("DayA_S{} -> DayB_S{}", ss + 1, ts + 1)
    }

    fn column_labels(&self) -> Vec<String> {
        self.directions
            .iter()
            .flat_map(|&(s, t)| {
                self.models
                    .iter()
                    .map(move |m| format!("D{}->D{} {m}", s + 1, t + 1))
            })
            .collect()
    }

    /// Mean accuracies in percent, one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair");
        for c in self.column_labels() {
            out.push(',');
            out.push_str(&c);
        }
        out.push('\n');
        for (i, line) in self.cells.iter().enumerate() {
            out.push_str(&self.row_label(i));
            for cell in line {
                out.push(',');
                out.push_str(&format_percent(cell.mean));
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text with a two-level header: direction, then model.
    pub fn to_text(&self) -> String {
        let label_w = (0..self.rows.len())
            .map(|i| self.row_label(i).len())
            .max()
            .unwrap_or(0)
            .max("Source -> Target".len());
        let col_w = 6;
        let group_w = self.models.len() * (col_w + 1) - 1;
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$} |", "Source -> Target");
        for &(s, t) in &self.directions {
            let _ = write!(out, " {:<group_w$} |", format!("Day {} -> {}", s + 1, t + 1));
        }
        out.push('\n');
        let _ = write!(out, "{:<label_w$} |", format!("#Device K = {}", self.num_devices));
        for _ in &self.directions {
            for m in &self.models {
                let _ = write!(out, " {:>col_w$}", m.as_str());
            }
            out.push_str(" |");
        }
        out.push('\n');
        let width = out.lines().last().map(str::len).unwrap_or(0);
        out.push_str(&"-".repeat(width));
        out.push('\n');
        for (i, line) in self.cells.iter().enumerate() {
            let _ = write!(out, "{:<label_w$} |", self.row_label(i));
            for chunk in line.chunks(self.models.len()) {
                for cell in chunk {
                    let _ = write!(out, " {:>col_w$}", format_percent(cell.mean));
                }
                out.push_str(" |");
            }
            out.push('\n');
        }
        out
    }
}

/// Long-form `source,target,model,seed,accuracy` rows in result order.
pub fn accuracy_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("source,target,model,seed,accuracy\n");
    for r in results {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.source, r.target, r.model, r.seed, r.accuracy);
    }
    out
}

/// Mean and standard deviation over seeds per (source, target, model).
pub fn summary_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("source,target,model,seeds,mean_accuracy,std_accuracy\n");
    for ((s, t, m), v) in accuracies_by_cell(results) {
        let (mean, std) = mean_std(&v);
        let _ = writeln!(out, "{s},{t},{m},{},{mean:.6},{std:.6}", v.len());
    }
    out
}

/// `true_device,pred_device,count,fraction` for every cell of the matrix.
pub fn confusion_csv(confusion: &[Vec<u64>], devices: &[usize]) -> Result<String> {
    let frac = normalize_confusion(confusion, devices)?;
    let mut out = String::from("true_device,pred_device,count,fraction\n");
    for (i, row) in confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c},{:.6}", devices[i], devices[j], frac[i][j]);
        }
    }
    Ok(out)
}

/// Confusion counts summed over seeds per (source, target, model).
pub fn pooled_confusions(results: &[EvalResult]) -> Result<BTreeMap<(SetId, SetId, ModelKind), (Vec<usize>, Vec<Vec<u64>>)>> {
    let mut map: BTreeMap<_, (Vec<usize>, Vec<Vec<u64>>)> = BTreeMap::new();
    for r in results {
        let key = (r.source, r.target, r.model);
        match map.get_mut(&key) {
            None => {
                map.insert(key, (r.devices.clone(), r.confusion.clone()));
            }
            Some((devices, acc)) => {
                if *devices != r.devices {
                    return Err(Error::invalid(format!(
                        "results for {}->{} {} disagree on the device list",
                        r.source, r.target, r.model
                    )));
                }
                for (a, row) in acc.iter_mut().zip(&r.confusion) {
                    for (x, y) in a.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok(map)
}

/// A complete result set plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub results: Vec<EvalResult>,
    pub manifest: Option<RunManifest>,
}

impl ReportBundle {
    pub fn new(results: Vec<EvalResult>, manifest: Option<RunManifest>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &results {
            if !seen.insert((r.source, r.target, r.model, r.seed)) {
                return Err(Error::invalid(format!(
                    "duplicate result for {}->{} {} seed {}",
                    r.source, r.target, r.model, r.seed
                )));
            }
        }
        Ok(ReportBundle { results, manifest })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.results
            .iter()
            .map(|r| r.seed)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Unordered day pairs covered by the results.
    pub fn day_pairs(&self) -> Vec<(usize, usize)> {
        self.results
            .iter()
            .map(|r| {
                let (a, b) = (r.source.day, r.target.day);
                (a.min(b), a.max(b))
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Every output file as `(relative path, contents)`, in a fixed order.
    pub fn render(&self) -> Result<Vec<(PathBuf, String)>> {
        if self.results.is_empty() {
            return Err(Error::invalid("no results to report"));
        }
        let mut files = vec![
            (
                PathBuf::from(RESULTS_FILE),
                serde_json::to_string_pretty(&self.results).expect("results serialize") + "\n",
            ),
            (PathBuf::from(ACCURACY_CSV), accuracy_csv(&self.results)),
            (PathBuf::from(SUMMARY_CSV), summary_csv(&self.results)),
        ];
        for (a, b) in self.day_pairs() {
            let table = render_accuracy_table(&self.results, (a, b))?;
            let stem = format!("table_d{}_d{}", a + 1, b + 1);
            files.push((PathBuf::from(format!("{stem}.csv")), table.to_csv()));
            files.push((PathBuf::from(format!("{stem}.txt")), table.to_text()));
        }
        for ((s, t, m), (devices, counts)) in pooled_confusions(&self.results)? {
            let name = format!("confusion/{s}_{t}_{}.csv", m.as_str().to_lowercase());
            files.push((PathBuf::from(name), confusion_csv(&counts, &devices)?));
        }
        if let Some(m) = &self.manifest {
            files.push((
                PathBuf::from(MANIFEST_FILE),
                serde_json::to_string_pretty(m).expect("manifest serializes") + "\n",
            ));
        }
        Ok(files)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let files = self.render()?;
        let mut written = Vec::with_capacity(files.len());
        for (rel, contents) in files {
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Reads `results.json` (and `manifest.json` if present) from `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULTS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let results: Vec<EvalResult> =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?)
        } else {
            None
        };
        ReportBundle::new(results, manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(s: SetId, t: SetId, model: ModelKind, seed: u64, correct: u64) -> EvalResult {
        EvalResult {
            model,
            seed,
            source: s,
            target: t,
            accuracy: correct as f64 / 10.0,
            devices: vec![0, 1],
            confusion: vec![vec![correct.min(5), 5 - correct.min(5)], vec![0, 5]],
        }
    }

    #[test]
    fn normalizes_rows() {
        let n = normalize_confusion(&[vec![8, 2, 0], vec![0, 1, 0], vec![0, 0, 3]], &[0, 1, 2]).unwrap();
        assert_eq!(n[0], vec![0.8, 0.2, 0.0]);
        assert_eq!(n[1], vec![0.0, 1.0, 0.0]);
        let e = normalize_confusion(&[vec![1, 0], vec![0, 0]], &[4, 14]).unwrap_err();
        assert!(e.to_string().contains("device 14"));
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.719), "71.9");
        assert_eq!(format_percent(1.0), "100.0");
    }

    #[test]
    fn two_by_three_table() {
        let (d1s1, d2s1, d2s2) = (SetId::new(0, 0), SetId::new(1, 0), SetId::new(1, 1));
        let mut rs = Vec::new();
        for t in [d2s1, d2s2] {
            for m in ModelKind::ALL {
                rs.push(result(d1s1, t, m, 0, 7));
            }
        }
        let table = render_accuracy_table(&rs, (0, 1)).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.cells[0].len(), 3);
        assert!(table.to_csv().starts_with("pair,D1->D2 CNN,D1->D2 AB,D1->D2 CTL\n"));

        rs.pop();
        let e = render_accuracy_table(&rs, (0, 1)).unwrap_err().to_string();
        assert!(e.contains("D1S1->D2S2 CTL"), "{e}");
        assert!(render_accuracy_table(&[], (0, 1)).is_err());
    }

    #[test]
    fn duplicate_results_rejected() {
        let r = result(SetId::new(0, 0), SetId::new(1, 0), ModelKind::Ctl, 3, 9);
        assert!(ReportBundle::new(vec![r.clone(), r], None).is_err());
    }
}
