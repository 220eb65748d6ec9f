//! CSV ingestion and emission for both data layouts, plus subset files.
//!
//! Headers are `y,x1,...,xp` (optionally with an `id` column) for
//! cross-sectional data and `cluster,y,x1,...,xp` for clustered data. No
//! intercept is added; supply `x1 = 1` explicitly.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{Cluster, ClusteredData, CrossSectionData, Dataset};
use crate::deletion::SubsetIndex;
use crate::error::{Error, Result};
use crate::model::ModelKind;

/// Shortest decimal that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        ryu::Buffer::new().format_finite(v).to_string()
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_error(origin: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: origin.to_string(),
        message: message.into(),
    }
}

struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| parse_error(origin, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let rows = reader
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(origin, e.to_string()))?;
        if rows.is_empty() {
            return Err(parse_error(origin, "no data rows"));
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str, origin: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(origin, format!("missing column `{name}`")))
    }

    /// Indices of `x1, x2, ...` in order, and a check that nothing else is present.
    fn covariates(&self, known: &[&str], origin: &str) -> Result<Vec<usize>> {
        let mut cols = vec![self.column("x1", origin)?];
        let mut k = 2;
        while let Some(c) = self.headers.iter().position(|h| *h == format!("x{k}")) {
            cols.push(c);
            k += 1;
        }
        for h in &self.headers {
            let is_x = h
                .strip_prefix('x')
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|j| j >= 1 && j < k);
            if !is_x && !known.contains(&h.as_str()) {
                return Err(parse_error(origin, format!("unexpected column `{h}`")));
            }
        }
        Ok(cols)
    }

    fn number(&self, row: usize, col: usize, origin: &str) -> Result<f64> {
        let raw = self.rows[row].get(col).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| {
            parse_error(
                origin,
                format!(
                    "row {}, column `{}`: `{raw}` is not a number",
                    row + 1,
                    self.headers[col]
                ),
            )
        })?;
        if !v.is_finite() {
            return Err(parse_error(
                origin,
                format!(
                    "row {}, column `{}`: non-finite value",
                    row + 1,
                    self.headers[col]
                ),
            ));
        }
        Ok(v)
    }

    fn text(&self, row: usize, col: usize) -> String {
        self.rows[row].get(col).unwrap_or("").to_string()
    }
}

pub fn parse_cross_section(text: &str, origin: &str) -> Result<CrossSectionData> {
    let t = Table::parse(text, origin)?;
    let yc = t.column("y", origin)?;
    let xc = t.covariates(&["y", "id"], origin)?;
    let idc = t.headers.iter().position(|h| h == "id");
    let n = t.rows.len();
    let y = DVector::from_iterator(
        n,
        (0..n)
            .map(|i| t.number(i, yc, origin))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut x = DMatrix::zeros(n, xc.len());
    for i in 0..n {
        for (j, &c) in xc.iter().enumerate() {
            x[(i, j)] = t.number(i, c, origin)?;
        }
    }
    let ids = idc.map(|c| (0..n).map(|i| t.text(i, c)).collect());
    CrossSectionData::new(y, x, ids)
}

pub fn parse_clustered(text: &str, origin: &str) -> Result<ClusteredData> {
    let t = Table::parse(text, origin)?;
    let cc = t.column("cluster", origin)?;
    let yc = t.column("y", origin)?;
    let xc = t.covariates(&["cluster", "y"], origin)?;
    let p = xc.len();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<usize>> = HashMap::new();
    for i in 0..t.rows.len() {
        let id = t.text(i, cc);
        if id.is_empty() {
            return Err(parse_error(
                origin,
                format!("row {}: empty cluster label", i + 1),
            ));
        }
        rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        rows.get_mut(&id).unwrap().push(i);
    }
    let clusters = order
        .iter()
        .map(|id| {
            let members = &rows[id];
            let mut x = DMatrix::zeros(members.len(), p);
            let mut y = DVector::zeros(members.len());
            for (r, &i) in members.iter().enumerate() {
                y[r] = t.number(i, yc, origin)?;
                for (j, &c) in xc.iter().enumerate() {
                    x[(r, j)] = t.number(i, c, origin)?;
                }
            }
            Ok(Cluster::new(id.clone(), x, y))
        })
        .collect::<Result<Vec<_>>>()?;
    ClusteredData::new(clusters)
}

pub fn parse_dataset(text: &str, origin: &str, model: ModelKind) -> Result<Dataset> {
    match model {
        ModelKind::Lm => parse_cross_section(text, origin).map(Dataset::Lm),
        ModelKind::Lmm => parse_clustered(text, origin).map(Dataset::Lmm),
    }
}

pub fn read_dataset(path: &Path, model: ModelKind) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string(), model)
}

fn x_header(p: usize) -> String {
    (1..=p)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn row_values(y: f64, x: impl Iterator<Item = f64>) -> String {
    std::iter::once(y)
        .chain(x)
        .map(format_f64)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn cross_section_to_csv(data: &CrossSectionData) -> String {
    let mut out = String::new();
    let with_ids = data.row_ids().is_some();
    if with_ids {
        out.push_str("id,");
    }
    out.push_str(&format!("y,{}\n", x_header(data.p())));
    for i in 0..data.n() {
        if with_ids {
            out.push_str(&data.row_label(i));
            out.push(',');
        }
        out.push_str(&row_values(data.y()[i], data.x().row(i).iter().copied()));
        out.push('\n');
    }
    out
}

pub fn clustered_to_csv(data: &ClusteredData) -> String {
    let mut out = format!("cluster,y,{}\n", x_header(data.p()));
    for c in data.clusters() {
        for j in 0..c.size() {
            out.push_str(&c.id);
            out.push(',');
            out.push_str(&row_values(c.y[j], c.x.row(j).iter().copied()));
            out.push('\n');
        }
    }
    out
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    match data {
        Dataset::Lm(d) => cross_section_to_csv(d),
        Dataset::Lmm(d) => clustered_to_csv(d),
    }
}

/// Position of a unit named in a subset file: a row id or 1-based row
/// number for cross-sectional data, a cluster label for clustered data.
fn unit_position(data: &Dataset, token: &str) -> Option<usize> {
    match data {
        Dataset::Lm(d) => {
            if let Some(ids) = d.row_ids() {
                if let Some(i) = ids.iter().position(|id| id == token) {
                    return Some(i);
                }
            }
            token
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1 && k <= d.n())
                .map(|k| k - 1)
        }
        Dataset::Lmm(d) => d.position(token),
    }
}

/// One subset per line, units separated by commas; `#` starts a comment.
pub fn parse_subsets(text: &str, origin: &str, data: &Dataset) -> Result<Vec<SubsetIndex>> {
    let mut subsets = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ids = line
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                unit_position(data, tok).ok_or_else(|| {
                    parse_error(
                        origin,
                        format!("line {}: unknown unit `{tok}`", line_no + 1),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        subsets.push(SubsetIndex::new(data, ids).map_err(|e| match e {
            e @ (Error::Invalid(_) | Error::SubsetTooLarge(_)) => {
                parse_error(origin, format!("line {}: {e}", line_no + 1))
            }
            other => other,
        })?);
    }
    if subsets.is_empty() {
        return Err(parse_error(origin, "no subsets listed"));
    }
    Ok(subsets)
}

pub fn read_subsets(path: &Path, data: &Dataset) -> Result<Vec<SubsetIndex>> {
    let text = std::fs::read_to_string(path)?;
    parse_subsets(&text, &path.display().to_string(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_column_is_named() {
        let err = parse_cross_section("y,x2\n1,2\n", "t.csv").unwrap_err();
        assert!(err.to_string().contains("x1"), "{err}");
        assert!(err.is_validation());
        let err = parse_clustered("y,x1\n1,1\n2,1\n", "c.csv").unwrap_err();
        assert!(err.to_string().contains("cluster"), "{err}");
    }

    #[test]
    fn unexpected_column_rejected() {
        let err = parse_cross_section("y,x1,z\n1,1,0\n2,1,0\n", "t.csv").unwrap_err();
        assert!(err.to_string().contains("`z`"));
    }

    #[test]
    fn bad_number_reports_location() {
        let err = parse_cross_section("y,x1\n1,1\nabc,1\n", "t.csv").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn round_trip_is_exact() {
        let y = DVector::from_vec(vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]);
        let x = DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 0.2, 1.0, std::f64::consts::PI, 1.0, -1e7, 1.0, 5.0],
        );
        let d = CrossSectionData::new(y, x, None).unwrap();
        let back = parse_cross_section(&cross_section_to_csv(&d), "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn clusters_grouped_in_first_appearance_order() {
        let text = "cluster,y,x1\nb,1,1\na,2,1\nb,3,1\na,4,1\nc,5,1\n";
        let d = parse_clustered(text, "mem").unwrap();
        assert_eq!(d.clusters()[0].id, "b");
        assert_eq!(d.clusters()[0].y.as_slice(), &[1.0, 3.0]);
        assert_eq!(d.sizes(), vec![2, 2, 1]);
        let back = parse_clustered(&clustered_to_csv(&d), "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn subset_file() {
        let d = Dataset::Lm(parse_cross_section("y,x1\n1,1\n2,1\n3,1\n4,1\n", "mem").unwrap());
        let s = parse_subsets("# comment\n1\n\n2, 3\n", "s.txt", &d).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].ids(), &[1, 2]);
        assert!(parse_subsets("9\n", "s.txt", &d).is_err());
        let err = parse_subsets("1\n1,2,3\n", "s.txt", &d).unwrap_err();
        assert!(
            err.is_validation() && err.to_string().contains("line 2"),
            "{err}"
        );
    }
}
