//! CSV dataset format.
//!
//! Line 1 is `# schema_version: 1`, line 2 the header
//! `cluster_id,time_index,x_0,..,w_0,..,r,y`. One row per individual. The y
//! field is empty exactly when r = 0. Floats print in shortest round-trip
//! form, so emit(ingest(file)) is byte-identical for canonically formatted
//! files.

use std::collections::HashMap;
use std::path::Path;

use clusterdr::{Cluster, ClusteredDataset, IndividualRecord};

use crate::error::{CliError, Result};

pub const SCHEMA_LINE: &str = "# schema_version: 1";

/// A dataset plus the external cluster names, in first-appearance order.
/// `cluster_ids[g]` names cluster `g` of `dataset`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub cluster_ids: Vec<String>,
    pub dataset: ClusteredDataset,
}

struct Header {
    x_dim: usize,
    w_dim: usize,
}

fn parse_header(fields: &[String]) -> Result<Header> {
    let bad = |msg: String| Err(CliError::Data(msg));
    let mut it = fields.iter().map(String::as_str);
    if it.next() != Some("cluster_id") || it.next() != Some("time_index") {
        return bad("header must start with cluster_id,time_index".to_string());
    }
    let rest: Vec<&str> = it.collect();
    let x_dim = rest.iter().take_while(|c| c.starts_with("x_")).count();
    let w_dim = rest[x_dim..].iter().take_while(|c| c.starts_with("w_")).count();
    if x_dim == 0 || w_dim == 0 {
        return bad("header needs at least one x_ and one w_ column".to_string());
    }
    for (i, c) in rest[..x_dim].iter().enumerate() {
        if *c != format!("x_{i}") {
            return bad(format!("x columns must be x_0..x_{}, found {c}", x_dim - 1));
        }
    }
    for (i, c) in rest[x_dim..x_dim + w_dim].iter().enumerate() {
        if *c != format!("w_{i}") {
            return bad(format!("w columns must be w_0..w_{}, found {c}", w_dim - 1));
        }
    }
    if rest[x_dim + w_dim..] != ["r", "y"] {
        return bad("header must end with r,y".to_string());
    }
    Ok(Header { x_dim, w_dim })
}

struct RawRow {
    time_index: usize,
    x: Vec<f64>,
    w: Vec<f64>,
    r: bool,
    y: Option<f64>,
}

fn parse_float(field: &str, col: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| CliError::Data(format!("line {line}: {col} is not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(CliError::Data(format!("line {line}: {col} must be finite, got {field}")));
    }
    Ok(v)
}

fn parse_row(record: &csv::StringRecord, h: &Header, line: usize) -> Result<(String, RawRow)> {
    let expect = 2 + h.x_dim + h.w_dim + 2;
    if record.len() != expect {
        return Err(CliError::Data(format!(
            "line {line}: expected {expect} fields, got {}",
            record.len()
        )));
    }
    let cluster_id = record[0].to_string();
    if cluster_id.is_empty() {
        return Err(CliError::Data(format!("line {line}: empty cluster_id")));
    }
    let time_index: usize = record[1]
        .parse()
        .map_err(|_| CliError::Data(format!("line {line}: bad time_index {:?}", &record[1])))?;
    let mut x = Vec::with_capacity(h.x_dim);
    for i in 0..h.x_dim {
        x.push(parse_float(&record[2 + i], &format!("x_{i}"), line)?);
    }
    let mut w = Vec::with_capacity(h.w_dim);
    for i in 0..h.w_dim {
        w.push(parse_float(&record[2 + h.x_dim + i], &format!("w_{i}"), line)?);
    }
    let r = match &record[2 + h.x_dim + h.w_dim] {
        "0" => false,
        "1" => true,
        other => {
            return Err(CliError::Data(format!("line {line}: r must be 0 or 1, got {other:?}")))
        }
    };
    let y_field = &record[2 + h.x_dim + h.w_dim + 1];
    let y = match (r, y_field.is_empty()) {
        (true, false) => Some(parse_float(y_field, "y", line)?),
        (false, true) => None,
        (true, true) => {
            return Err(CliError::Data(format!("line {line}: r=1 but y is empty")));
        }
        (false, false) => {
            return Err(CliError::Data(format!(
                "line {line}: r=0 rows must leave y empty, got {y_field:?}"
            )));
        }
    };
    Ok((cluster_id, RawRow { time_index, x, w, r, y }))
}

pub fn ingest(path: &Path) -> Result<DatasetFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    if text.lines().next() != Some(SCHEMA_LINE) {
        return Err(CliError::Data(format!(
            "{} must start with `{SCHEMA_LINE}`",
            path.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header_fields: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let h = parse_header(&header_fields)?;

    // Rows grouped by cluster in first-appearance order; the file is line 1
    // schema, line 2 header, data from line 3.
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 3;
        let rec = rec.map_err(|e| CliError::Data(format!("line {line}: {e}")))?;
        let (id, row) = parse_row(&rec, &h, line)?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(row);
    }
    if order.is_empty() {
        return Err(CliError::Data(format!("{} has no data rows", path.display())));
    }

    let mut clusters = Vec::with_capacity(order.len());
    for id in &order {
        let mut rows = groups.remove(id).unwrap();
        rows.sort_by_key(|r| r.time_index);
        for (t, row) in rows.iter().enumerate() {
            if row.time_index != t {
                return Err(CliError::Data(format!(
                    "cluster {id}: time_index values must be unique and contiguous from 0; \
                     expected {t}, found {}",
                    row.time_index
                )));
            }
        }
        let x = rows[0].x.clone();
        for row in &rows[1..] {
            // Bitwise comparison: x is a cluster-level value repeated per row.
            if row.x != x {
                return Err(CliError::Data(format!(
                    "cluster {id}: x columns must be identical on every row of a cluster"
                )));
            }
        }
        let members = rows
            .into_iter()
            .map(|r| IndividualRecord { w: r.w, r: r.r, y: r.y, time_index: r.time_index })
            .collect();
        clusters.push(Cluster { x, members });
    }
    let dataset = ClusteredDataset::new(clusters).map_err(CliError::from_lib)?;
    Ok(DatasetFile { cluster_ids: order, dataset })
}

pub fn emit(file: &DatasetFile, path: &Path) -> Result<()> {
    let text = render(file);
    std::fs::write(path, text)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

pub fn render(file: &DatasetFile) -> String {
    let dataset = &file.dataset;
    let mut out = String::new();
    out.push_str(SCHEMA_LINE);
    out.push('\n');
    out.push_str("cluster_id,time_index");
    for i in 0..dataset.x_dim() {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 0..dataset.w_dim() {
        out.push_str(&format!(",w_{i}"));
    }
    out.push_str(",r,y\n");
    for (g, cluster) in dataset.clusters().iter().enumerate() {
        for member in &cluster.members {
            out.push_str(&file.cluster_ids[g]);
            out.push_str(&format!(",{}", member.time_index));
            for v in &cluster.x {
                out.push_str(&format!(",{v}"));
            }
            for v in &member.w {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(if member.r { ",1," } else { ",0," });
            if let Some(y) = member.y {
                out.push_str(&format!("{y}"));
            }
            out.push('\n');
        }
    }
    out
}
