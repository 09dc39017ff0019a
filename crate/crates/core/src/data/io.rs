//! CSV ingestion and export for multi-view datasets.
//!
//! Layout: one file per view with a header row and numeric columns, plus
//! either a shared label file (single `label` column) or a designated label
//! column inside view 1. Generated datasets are written back in the same
//! layout together with a `conflicts.csv` carrying the corruption ground
//! truth.

use std::path::{Path, PathBuf};

use crate::data::{ConflictLabels, Matrix, MultiViewDataset, ViewStatus};
use crate::error::{Error, Result};
use crate::manifest::write_atomic;

/// Where the labels live.
#[derive(Debug, Clone)]
pub enum LabelSource {
    /// A standalone CSV with one integer `label` column.
    File(PathBuf),
    /// A named column inside the first view's CSV.
    Column(String),
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

struct RawTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, idx + 2, e.to_string()))?;
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    Ok(RawTable { headers, rows })
}

fn parse_numeric(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("non-numeric cell '{cell}' in {column}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value in {column}")));
    }
    Ok(v)
}

fn parse_label(path: &Path, line: usize, cell: &str) -> Result<usize> {
    cell.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("label '{cell}' is not a nonnegative integer")))
}

/// Load a multi-view dataset from one CSV per view. The class count is
/// inferred as the maximum label plus one.
pub fn load_csv(view_paths: &[PathBuf], labels: &LabelSource) -> Result<MultiViewDataset> {
    if view_paths.is_empty() {
        return Err(Error::invalid("need at least one view path"));
    }
    let mut tables = Vec::with_capacity(view_paths.len());
    for path in view_paths {
        tables.push((path.clone(), read_table(path)?));
    }

    let n = tables[0].1.rows.len();
    if n == 0 {
        return Err(parse_err(&tables[0].0, 1, "file has a header but no data rows"));
    }
    for (path, table) in &tables {
        if table.rows.len() != n {
            return Err(parse_err(
                path,
                table.rows.len() + 1,
                format!("row count {} does not match view 1's {n}", table.rows.len()),
            ));
        }
    }

    // Labels first, so a designated column can be excluded from features.
    let (label_values, label_column_in_view1): (Vec<usize>, Option<usize>) = match labels {
        LabelSource::File(path) => {
            let table = read_table(path)?;
            if table.rows.len() != n {
                return Err(parse_err(
                    path,
                    table.rows.len() + 1,
                    format!("label rows {} do not match view rows {n}", table.rows.len()),
                ));
            }
            let col = table
                .headers
                .iter()
                .position(|h| h == "label")
                .ok_or_else(|| parse_err(path, 1, "missing 'label' column"))?;
            let mut out = Vec::with_capacity(n);
            for (i, row) in table.rows.iter().enumerate() {
                out.push(parse_label(path, i + 2, &row[col])?);
            }
            (out, None)
        }
        LabelSource::Column(name) => {
            let (path, table) = &tables[0];
            let col = table
                .headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_err(path, 1, format!("missing label column '{name}'")))?;
            let mut out = Vec::with_capacity(n);
            for (i, row) in table.rows.iter().enumerate() {
                out.push(parse_label(path, i + 2, &row[col])?);
            }
            (out, Some(col))
        }
    };

    let mut views = Vec::with_capacity(tables.len());
    for (v, (path, table)) in tables.iter().enumerate() {
        let skip = if v == 0 { label_column_in_view1 } else { None };
        let feature_cols: Vec<usize> = (0..table.headers.len())
            .filter(|c| Some(*c) != skip)
            .collect();
        if feature_cols.is_empty() {
            return Err(parse_err(path, 1, "view has no feature columns"));
        }
        let mut m = Matrix::zeros(n, feature_cols.len());
        for (i, row) in table.rows.iter().enumerate() {
            if row.len() != table.headers.len() {
                return Err(parse_err(
                    path,
                    i + 2,
                    format!("expected {} cells, found {}", table.headers.len(), row.len()),
                ));
            }
            for (dst, &c) in feature_cols.iter().enumerate() {
                m.row_mut(i)[dst] = parse_numeric(path, i + 2, &table.headers[c], &row[c])?;
            }
        }
        views.push(m);
    }

    let class_count = label_values.iter().max().copied().unwrap_or(0) + 1;
    if class_count < 2 {
        return Err(Error::invalid(
            "labels contain fewer than 2 classes; cannot classify",
        ));
    }
    MultiViewDataset::new(views, label_values, class_count)
}

/// File names used by [`save_dataset_csv`]: `view_1.csv` .. `view_V.csv`,
/// `labels.csv`, `conflicts.csv`.
pub fn dataset_file_names(view_count: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=view_count).map(|v| format!("view_{v}.csv")).collect();
    names.push("labels.csv".to_string());
    names.push("conflicts.csv".to_string());
    names
}

/// Write a dataset (and its conflict ground truth) into `dir`. All files are
/// staged in memory first and then renamed into place, so a failure leaves
/// no partial dataset behind.
pub fn save_dataset_csv(ds: &MultiViewDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;

    let mut files: Vec<(PathBuf, String)> = Vec::new();
    for (v, m) in ds.views.iter().enumerate() {
        let mut text = String::new();
        let header: Vec<String> = (0..m.cols()).map(|c| format!("f{c}")).collect();
        text.push_str(&header.join(","));
        text.push('\n');
        for i in 0..m.rows() {
            let cells: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        files.push((dir.join(format!("view_{}.csv", v + 1)), text));
    }

    let mut labels_text = String::from("label\n");
    for &l in &ds.labels {
        labels_text.push_str(&l.to_string());
        labels_text.push('\n');
    }
    files.push((dir.join("labels.csv"), labels_text));

    let conflicts = ds
        .conflicts
        .clone()
        .unwrap_or_else(|| ConflictLabels::all_clean(&ds.labels, ds.view_count()));
    files.push((dir.join("conflicts.csv"), conflicts_to_csv(&conflicts)));

    let mut written = Vec::with_capacity(files.len());
    for (path, text) in files {
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

pub fn conflicts_to_csv(conflicts: &ConflictLabels) -> String {
    let mut text = String::from("instance_id,view_id,status,effective_label\n");
    for i in 0..conflicts.instances() {
        for v in 0..conflicts.views() {
            let effective = conflicts
                .effective_label(i, v)
                .map(|l| l.to_string())
                .unwrap_or_default();
            text.push_str(&format!(
                "{i},{v},{},{effective}\n",
                conflicts.status(i, v).as_str()
            ));
        }
    }
    text
}

/// Read a `conflicts.csv` back into [`ConflictLabels`].
pub fn load_conflicts_csv(path: &Path) -> Result<ConflictLabels> {
    let table = read_table(path)?;
    let find = |name: &str| -> Result<usize> {
        table
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing '{name}' column")))
    };
    let c_inst = find("instance_id")?;
    let c_view = find("view_id")?;
    let c_status = find("status")?;
    let c_eff = find("effective_label")?;

    let mut entries = Vec::with_capacity(table.rows.len());
    let mut max_i = 0usize;
    let mut max_v = 0usize;
    for (idx, row) in table.rows.iter().enumerate() {
        let line = idx + 2;
        let i = parse_label(path, line, &row[c_inst])?;
        let v = parse_label(path, line, &row[c_view])?;
        let status = ViewStatus::parse(&row[c_status])
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        let effective = if row[c_eff].is_empty() {
            None
        } else {
            Some(parse_label(path, line, &row[c_eff])?)
        };
        max_i = max_i.max(i);
        max_v = max_v.max(v);
        entries.push((i, v, status, effective));
    }
    if entries.is_empty() {
        return Err(parse_err(path, 1, "conflicts file has no rows"));
    }
    let instances = max_i + 1;
    let views = max_v + 1;
    if entries.len() != instances * views {
        return Err(parse_err(
            path,
            entries.len() + 1,
            format!("expected {} rows for a full grid, found {}", instances * views, entries.len()),
        ));
    }
    let mut status = vec![ViewStatus::Clean; instances * views];
    let mut effective = vec![None; instances * views];
    for (i, v, s, e) in entries {
        status[i * views + v] = s;
        effective[i * views + v] = e;
    }
    ConflictLabels::from_parts(instances, views, status, effective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, inject_misalignment, CorruptionSpec};

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn loads_two_views_with_shared_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let v1 = dir.path().join("v1.csv");
        let v2 = dir.path().join("v2.csv");
        let labels = dir.path().join("labels.csv");
        write(&v1, "a,b\n1,2\n3,4\n5,6\n");
        write(&v2, "c\n7\n8\n9\n");
        write(&labels, "label\n0\n1\n0\n");
        let ds = load_csv(&[v1, v2], &LabelSource::File(labels)).unwrap();
        assert_eq!(ds.instance_count(), 3);
        assert_eq!(ds.view_count(), 2);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.views[0].row(1), &[3.0, 4.0]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
    }

    #[test]
    fn loads_label_column_from_view_one() {
        let dir = tempfile::tempdir().unwrap();
        let v1 = dir.path().join("v1.csv");
        let v2 = dir.path().join("v2.csv");
        write(&v1, "x,label,y\n1.5,0,2.5\n3.5,1,4.5\n");
        write(&v2, "z\n1\n2\n");
        let ds = load_csv(&[v1, v2], &LabelSource::Column("label".into())).unwrap();
        assert_eq!(ds.views[0].cols(), 2);
        assert_eq!(ds.views[0].row(0), &[1.5, 2.5]);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn mismatched_row_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v1 = dir.path().join("v1.csv");
        let v2 = dir.path().join("v2.csv");
        let labels = dir.path().join("labels.csv");
        write(&v1, "a\n1\n2\n");
        write(&v2, "b\n1\n");
        write(&labels, "label\n0\n1\n");
        let err = load_csv(&[v1, v2], &LabelSource::File(labels)).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn header_only_file_is_an_empty_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        let v1 = dir.path().join("v1.csv");
        let labels = dir.path().join("labels.csv");
        write(&v1, "a,b\n");
        write(&labels, "label\n");
        let err = load_csv(&[v1], &LabelSource::File(labels)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("no data rows"), "{msg}");
    }

    #[test]
    fn non_numeric_cell_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let v1 = dir.path().join("v1.csv");
        let labels = dir.path().join("labels.csv");
        write(&v1, "a\n1\nbogus\n");
        write(&labels, "label\n0\n1\n");
        let err = load_csv(&[v1.clone()], &LabelSource::File(labels)).unwrap_err();
        match err {
            Error::Parse { file, line, .. } => {
                assert_eq!(file, v1);
                assert_eq!(line, 3);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn save_and_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(2, 3, 12, &[4, 3], 2.0, 5).unwrap();
        let spec = CorruptionSpec {
            misalign_rate: 0.5,
            views_per_instance: Some(1),
            seed: 3,
            ..CorruptionSpec::default()
        };
        let ds = inject_misalignment(&ds, &spec).unwrap();
        save_dataset_csv(&ds, dir.path()).unwrap();

        let paths: Vec<PathBuf> = (1..=2).map(|v| dir.path().join(format!("view_{v}.csv"))).collect();
        let loaded = load_csv(&paths, &LabelSource::File(dir.path().join("labels.csv"))).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.class_count, ds.class_count);
        for v in 0..2 {
            for i in 0..12 {
                for (a, b) in loaded.views[v].row(i).iter().zip(ds.views[v].row(i)) {
                    assert_eq!(a, b, "float round trip must be exact");
                }
            }
        }

        let conflicts = load_conflicts_csv(&dir.path().join("conflicts.csv")).unwrap();
        assert_eq!(&conflicts, ds.conflicts.as_ref().unwrap());
    }

    #[test]
    fn saved_files_are_byte_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for dir in [&d1, &d2] {
            let ds = generate_synthetic(2, 2, 8, &[3, 3], 2.0, 9).unwrap();
            save_dataset_csv(&ds, dir.path()).unwrap();
        }
        for name in dataset_file_names(2) {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
