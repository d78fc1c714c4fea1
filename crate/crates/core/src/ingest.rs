//! Long-format ingestion and crossed-design reshaping.
//!
//! Three CSV layouts are supported, all UTF-8 with a header row and `.` as
//! the decimal separator:
//!
//! - **wide**: one row per (cluster, occasion) with one response column per
//!   outcome (`outcome_cols`); the covariate and nuisance columns are shared
//!   across outcomes.
//! - **long**: one row per (cluster, outcome, occasion) with an outcome
//!   label column (`outcome_col`) and a single response column (`y_col`).
//!   Occasions are ordered by appearance within each (cluster, outcome).
//! - **crossed**: long rows carrying an item column (`item_col`); items are
//!   mapped to the outcome dimension so that one clusterwise sign flips all
//!   items of a participant synchronously.
//!
//! The missing policy is listwise deletion per occasion: with
//! [`MissingPolicy::DropOccasion`], a row with any empty cell among the used
//! columns is dropped and counted; the count is carried on the dataset and
//! announced in reports. Non-finite values (NaN, infinities) are always an
//! error.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusterSpec, ClusteredDataset, DesignSpec, LongRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Drop the whole occasion when any used cell is empty.
    #[default]
    DropOccasion,
    /// Treat empty cells as an error.
    Error,
}

/// Column mapping from a CSV header onto the dataset schema.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub cluster_col: String,
    pub x_col: String,
    /// Response column for long/crossed layouts.
    pub y_col: String,
    /// Outcome label column (long layout). Mutually exclusive with
    /// `outcome_cols` and `item_col`.
    pub outcome_col: Option<String>,
    /// Wide response columns, one per outcome.
    pub outcome_cols: Vec<String>,
    pub nuisance_cols: Vec<String>,
    /// Item column for crossed designs.
    pub item_col: Option<String>,
    pub missing_policy: MissingPolicy,
}

impl CsvSchema {
    /// Long layout with a single outcome named after `y_col`.
    pub fn long(cluster_col: &str, x_col: &str, y_col: &str, nuisance_cols: &[&str]) -> Self {
        Self {
            cluster_col: cluster_col.into(),
            x_col: x_col.into(),
            y_col: y_col.into(),
            outcome_col: None,
            outcome_cols: Vec::new(),
            nuisance_cols: nuisance_cols.iter().map(|s| s.to_string()).collect(),
            item_col: None,
            missing_policy: MissingPolicy::default(),
        }
    }

    pub fn with_outcome_col(mut self, col: &str) -> Self {
        self.outcome_col = Some(col.into());
        self
    }

    pub fn with_outcome_cols(mut self, cols: &[&str]) -> Self {
        self.outcome_cols = cols.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_item_col(mut self, col: &str) -> Self {
        self.item_col = Some(col.into());
        self
    }

    pub fn with_missing_policy(mut self, policy: MissingPolicy) -> Self {
        self.missing_policy = policy;
        self
    }

    fn validate(&self) -> Result<()> {
        let modes = [
            self.outcome_col.is_some(),
            !self.outcome_cols.is_empty(),
            self.item_col.is_some(),
        ];
        if modes.iter().filter(|m| **m).count() > 1 {
            return Err(Error::InvalidConfig(
                "outcome column, wide outcome columns and item column are mutually exclusive"
                    .into(),
            ));
        }
        Ok(())
    }
}

struct ColumnIndex {
    cluster: usize,
    x: usize,
    y: Option<usize>,
    outcome: Option<usize>,
    outcomes_wide: Vec<(String, usize)>,
    nuisance: Vec<(String, usize)>,
    item: Option<usize>,
}

fn resolve_columns(headers: &csv::StringRecord, schema: &CsvSchema) -> Result<ColumnIndex> {
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let wide = !schema.outcome_cols.is_empty();
    Ok(ColumnIndex {
        cluster: find(&schema.cluster_col)?,
        x: find(&schema.x_col)?,
        y: if wide { None } else { Some(find(&schema.y_col)?) },
        outcome: schema
            .outcome_col
            .as_deref()
            .map(find)
            .transpose()?,
        outcomes_wide: schema
            .outcome_cols
            .iter()
            .map(|c| Ok((c.clone(), find(c)?)))
            .collect::<Result<_>>()?,
        nuisance: schema
            .nuisance_cols
            .iter()
            .map(|c| Ok((c.clone(), find(c)?)))
            .collect::<Result<_>>()?,
        item: schema.item_col.as_deref().map(find).transpose()?,
    })
}

/// A parsed cell: missing (empty), or a finite number.
fn parse_cell(raw: &str, column: &str, row: usize) -> Result<Option<f64>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    let value: f64 = trimmed.parse().map_err(|_| Error::NonFiniteValue {
        column: column.to_string(),
        row,
    })?;
    if !value.is_finite() {
        return Err(Error::NonFiniteValue {
            column: column.to_string(),
            row,
        });
    }
    Ok(Some(value))
}

/// Reads a CSV stream into long records, applying the schema and the missing
/// policy. Returns the records plus the number of dropped occasions.
pub fn read_long_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<(Vec<LongRecord>, usize)> {
    schema.validate()?;
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let cols = resolve_columns(&headers, schema)?;

    let mut records = Vec::new();
    let mut dropped = 0usize;

    for (idx, row) in csv_reader.records().enumerate() {
        let row = row?;
        let data_row = idx + 1; // 1-based, excluding header
        let cluster_id = row.get(cols.cluster).unwrap_or("").trim().to_string();
        if cluster_id.is_empty() {
            return Err(Error::MissingValue {
                column: schema.cluster_col.clone(),
                row: data_row,
            });
        }

        let mut missing = false;
        let mut require = |cell: Option<f64>, column: &str| -> Result<f64> {
            match cell {
                Some(v) => Ok(v),
                None => {
                    if schema.missing_policy == MissingPolicy::Error {
                        Err(Error::MissingValue {
                            column: column.to_string(),
                            row: data_row,
                        })
                    } else {
                        missing = true;
                        Ok(f64::NAN) // placeholder; the row is dropped
                    }
                }
            }
        };

        let x = require(parse_cell(row.get(cols.x).unwrap_or(""), &schema.x_col, data_row)?, &schema.x_col)?;
        let z: Vec<f64> = cols
            .nuisance
            .iter()
            .map(|(name, i)| {
                parse_cell(row.get(*i).unwrap_or(""), name, data_row)
                    .and_then(|c| require(c, name))
            })
            .collect::<Result<_>>()?;

        if !cols.outcomes_wide.is_empty() {
            let mut ys = Vec::with_capacity(cols.outcomes_wide.len());
            for (name, i) in &cols.outcomes_wide {
                ys.push(require(parse_cell(row.get(*i).unwrap_or(""), name, data_row)?, name)?);
            }
            if missing {
                dropped += 1;
                continue;
            }
            for ((name, _), y) in cols.outcomes_wide.iter().zip(ys) {
                records.push(LongRecord {
                    cluster_id: cluster_id.clone(),
                    outcome_id: name.clone(),
                    y,
                    x,
                    z: z.clone(),
                    item_id: None,
                });
            }
        } else {
            let y_idx = cols.y.expect("long layout has a response column");
            let y = require(parse_cell(row.get(y_idx).unwrap_or(""), &schema.y_col, data_row)?, &schema.y_col)?;
            let outcome_id = match cols.outcome {
                Some(i) => {
                    let label = row.get(i).unwrap_or("").trim().to_string();
                    if label.is_empty() {
                        return Err(Error::MissingValue {
                            column: schema.outcome_col.clone().unwrap_or_default(),
                            row: data_row,
                        });
                    }
                    label
                }
                None => schema.y_col.clone(),
            };
            let item_id = match cols.item {
                Some(i) => {
                    let label = row.get(i).unwrap_or("").trim().to_string();
                    if label.is_empty() {
                        return Err(Error::MissingValue {
                            column: schema.item_col.clone().unwrap_or_default(),
                            row: data_row,
                        });
                    }
                    Some(label)
                }
                None => None,
            };
            if missing {
                dropped += 1;
                continue;
            }
            records.push(LongRecord {
                cluster_id,
                outcome_id,
                y,
                x,
                z,
                item_id,
            });
        }
    }

    Ok((records, dropped))
}

/// Accumulates occasions for one (cluster, outcome) pair.
#[derive(Default, Clone)]
struct Column {
    y: Vec<f64>,
    x: Vec<f64>,
    z_rows: Vec<Vec<f64>>,
}

impl Column {
    fn push(&mut self, rec: &LongRecord) {
        self.y.push(rec.y);
        self.x.push(rec.x);
        self.z_rows.push(rec.z.clone());
    }

    fn into_parts(self) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let n = self.y.len();
        let q = self.z_rows.first().map_or(0, |r| r.len());
        let z = DMatrix::from_fn(n, q, |i, k| self.z_rows[i][k]);
        (DVector::from_vec(self.y), DVector::from_vec(self.x), z)
    }
}

/// Builds a dataset from long records. Cluster and outcome order follow
/// first appearance; occasions within a (cluster, outcome) follow input
/// order, so ingestion is deterministic given the record order.
pub fn ingest_long(records: impl IntoIterator<Item = LongRecord>) -> Result<ClusteredDataset> {
    ingest_long_with_dropped(records, 0)
}

/// As [`ingest_long`], threading through a dropped-occasion count from the
/// CSV layer.
pub fn ingest_long_with_dropped(
    records: impl IntoIterator<Item = LongRecord>,
    dropped: usize,
) -> Result<ClusteredDataset> {
    let mut cluster_order: Vec<String> = Vec::new();
    let mut outcome_order: Vec<String> = Vec::new();
    // (cluster index, outcome index) -> accumulated column
    let mut columns: BTreeMap<(usize, usize), Column> = BTreeMap::new();
    let mut n_records = 0usize;

    for rec in records {
        if !rec.y.is_finite() || !rec.x.is_finite() || rec.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite value in record for cluster '{}'",
                rec.cluster_id
            )));
        }
        let j = index_of(&mut cluster_order, &rec.cluster_id);
        let l = index_of(&mut outcome_order, &rec.outcome_id);
        columns.entry((j, l)).or_default().push(&rec);
        n_records += 1;
    }

    if n_records == 0 {
        return Err(Error::InvalidDataset("no records".into()));
    }
    if cluster_order.len() < 2 {
        return Err(Error::SingleClusterInput(cluster_order[0].clone()));
    }

    let m = outcome_order.len();
    let mut clusters = Vec::with_capacity(cluster_order.len());
    for (j, id) in cluster_order.iter().enumerate() {
        let mut ys = Vec::with_capacity(m);
        let mut xs = Vec::with_capacity(m);
        let mut zs = Vec::with_capacity(m);
        let mut n_j: Option<usize> = None;
        for (l, label) in outcome_order.iter().enumerate() {
            let column = columns.remove(&(j, l)).ok_or_else(|| Error::OccasionMismatch {
                cluster: id.clone(),
                detail: format!("outcome '{label}' has no rows"),
            })?;
            match n_j {
                None => n_j = Some(column.y.len()),
                Some(n) if n != column.y.len() => {
                    return Err(Error::OccasionMismatch {
                        cluster: id.clone(),
                        detail: format!("outcome '{label}' has {} rows, expected {n}", column.y.len()),
                    });
                }
                _ => {}
            }
            let (y, x, z) = column.into_parts();
            ys.push(y);
            xs.push(x);
            zs.push(z);
        }
        clusters.push(ClusterSpec {
            id: id.clone(),
            ys,
            design: DesignSpec::PerOutcome { xs, zs },
        });
    }

    ClusteredDataset::with_dropped(outcome_order, clusters, dropped)
}

/// Reshapes crossed-design records (participant x item x trial) into a
/// multivariate dataset with one outcome per item. Every participant must
/// contribute the same trial count to every item; an item with zero rows for
/// some participant is an error, not imputed.
pub fn reshape_crossed(records: impl IntoIterator<Item = LongRecord>) -> Result<ClusteredDataset> {
    reshape_crossed_with_dropped(records, 0)
}

pub fn reshape_crossed_with_dropped(
    records: impl IntoIterator<Item = LongRecord>,
    dropped: usize,
) -> Result<ClusteredDataset> {
    let mut relabeled = Vec::new();
    for rec in records {
        let item = rec.item_id.clone().ok_or_else(|| {
            Error::InvalidDataset(format!(
                "record for cluster '{}' lacks an item id",
                rec.cluster_id
            ))
        })?;
        relabeled.push(LongRecord {
            outcome_id: item,
            item_id: None,
            ..rec
        });
    }

    // Every participant needs at least one row per item; report the first
    // hole in (participant, item) appearance order.
    let mut participants: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    let mut seen: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    for rec in &relabeled {
        let p = index_of(&mut participants, &rec.cluster_id);
        let i = index_of(&mut items, &rec.outcome_id);
        seen.insert((p, i));
    }
    for (p, participant) in participants.iter().enumerate() {
        for (i, item) in items.iter().enumerate() {
            if !seen.contains(&(p, i)) {
                return Err(Error::ItemMissingForParticipant {
                    item: item.clone(),
                    participant: participant.clone(),
                });
            }
        }
    }

    ingest_long_with_dropped(relabeled, dropped)
}

/// Convenience: parse a CSV stream and build the dataset in one step,
/// dispatching on the schema's item column.
pub fn ingest_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<ClusteredDataset> {
    let (records, dropped) = read_long_csv(reader, schema)?;
    if schema.item_col.is_some() {
        reshape_crossed_with_dropped(records, dropped)
    } else {
        ingest_long_with_dropped(records, dropped)
    }
}

fn index_of(order: &mut Vec<String>, id: &str) -> usize {
    match order.iter().position(|o| o == id) {
        Some(i) => i,
        None => {
            order.push(id.to_string());
            order.len() - 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cluster: &str, outcome: &str, y: f64, x: f64, z: &[f64]) -> LongRecord {
        LongRecord {
            cluster_id: cluster.into(),
            outcome_id: outcome.into(),
            y,
            x,
            z: z.to_vec(),
            item_id: None,
        }
    }

    #[test]
    fn two_clusters_three_rows_one_outcome() {
        let records = vec![
            rec("c1", "y", 1.0, 0.1, &[1.0]),
            rec("c1", "y", 2.0, 0.2, &[1.0]),
            rec("c1", "y", 3.0, 0.3, &[1.0]),
            rec("c2", "y", 4.0, 0.4, &[1.0]),
            rec("c2", "y", 5.0, 0.5, &[1.0]),
            rec("c2", "y", 6.0, 0.6, &[1.0]),
        ];
        let d = ingest_long(records).unwrap();
        assert_eq!(d.n_clusters(), 2);
        assert_eq!(d.n_outcomes(), 1);
        assert_eq!(d.cluster(0).n(), 3);
        assert_eq!(d.cluster(1).n(), 3);
        assert_eq!(d.total_occasions(), 6);
    }

    #[test]
    fn nan_record_rejected() {
        let records = vec![
            rec("c1", "y", f64::NAN, 0.1, &[]),
            rec("c2", "y", 1.0, 0.2, &[]),
        ];
        assert!(matches!(
            ingest_long(records),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn single_cluster_rejected() {
        let records = vec![rec("c1", "y", 1.0, 0.1, &[]), rec("c1", "y", 2.0, 0.2, &[])];
        assert!(matches!(
            ingest_long(records),
            Err(Error::SingleClusterInput(id)) if id == "c1"
        ));
    }

    #[test]
    fn csv_wide_layout() {
        let csv = "subj,x,z,y1,y2\n\
                   a,0.1,1,1.0,2.0\n\
                   a,0.2,1,1.5,2.5\n\
                   b,0.3,1,0.5,1.0\n\
                   b,0.4,1,0.6,1.1\n";
        let schema = CsvSchema::long("subj", "x", "y", &["z"]).with_outcome_cols(&["y1", "y2"]);
        let d = ingest_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.n_outcomes(), 2);
        assert_eq!(d.outcome_labels(), &["y1".to_string(), "y2".to_string()]);
        // shared design detected
        assert!(matches!(
            d.cluster(0).design(),
            crate::data::DesignSpec::Shared { .. }
        ));
        assert_eq!(d.cluster(0).y(1)[1], 2.5);
    }

    #[test]
    fn csv_missing_cell_drops_occasion() {
        let csv = "subj,x,z,y1,y2\n\
                   a,0.1,1,1.0,2.0\n\
                   a,0.2,1,,2.5\n\
                   b,0.3,1,0.5,1.0\n";
        let schema = CsvSchema::long("subj", "x", "y", &["z"]).with_outcome_cols(&["y1", "y2"]);
        let d = ingest_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.dropped_occasions(), 1);
        assert_eq!(d.cluster(0).n(), 1);

        let strict = CsvSchema::long("subj", "x", "y", &["z"])
            .with_outcome_cols(&["y1", "y2"])
            .with_missing_policy(MissingPolicy::Error);
        assert!(matches!(
            ingest_csv(csv.as_bytes(), &strict),
            Err(Error::MissingValue { .. })
        ));
    }

    #[test]
    fn csv_nan_is_error_not_missing() {
        let csv = "subj,x,y\na,0.1,NaN\nb,0.2,1.0\n";
        let schema = CsvSchema::long("subj", "x", "y", &[]);
        assert!(matches!(
            ingest_csv(csv.as_bytes(), &schema),
            Err(Error::NonFiniteValue { column, row: 1 }) if column == "y"
        ));
    }

    #[test]
    fn csv_missing_column_named() {
        let csv = "subj,x,y\na,0.1,1.0\n";
        let schema = CsvSchema::long("subj", "x", "y", &["z"]);
        assert!(matches!(
            ingest_csv(csv.as_bytes(), &schema),
            Err(Error::MissingColumn(c)) if c == "z"
        ));
    }

    #[test]
    fn crossed_reshape_counts() {
        // 3 participants x 2 items x 2 trials
        let mut records = Vec::new();
        for p in ["p1", "p2", "p3"] {
            for item in ["i1", "i2"] {
                for t in 0..2 {
                    records.push(LongRecord {
                        cluster_id: p.into(),
                        outcome_id: String::new(),
                        y: t as f64,
                        x: 0.5,
                        z: vec![1.0],
                        item_id: Some(item.into()),
                    });
                }
            }
        }
        let d = reshape_crossed(records).unwrap();
        assert_eq!(d.n_clusters(), 3);
        assert_eq!(d.n_outcomes(), 2);
        assert_eq!(d.cluster(0).n(), 2);
    }

    #[test]
    fn crossed_missing_item_errors() {
        let mut records = Vec::new();
        for (p, items) in [("p1", vec!["i1", "i2"]), ("p2", vec!["i1"])] {
            for item in items {
                records.push(LongRecord {
                    cluster_id: p.into(),
                    outcome_id: String::new(),
                    y: 1.0,
                    x: 0.5,
                    z: vec![],
                    item_id: Some(item.into()),
                });
            }
        }
        assert!(matches!(
            reshape_crossed(records),
            Err(Error::ItemMissingForParticipant { item, participant })
                if item == "i2" && participant == "p2"
        ));
    }

    #[test]
    fn single_item_reshape_matches_plain_ingest() {
        let base = vec![
            rec("p1", "i1", 1.0, 0.1, &[1.0]),
            rec("p1", "i1", 2.0, 0.2, &[1.0]),
            rec("p2", "i1", 3.0, 0.3, &[1.0]),
        ];
        let crossed: Vec<LongRecord> = base
            .iter()
            .cloned()
            .map(|mut r| {
                r.item_id = Some(r.outcome_id.clone());
                r.outcome_id = String::new();
                r
            })
            .collect();
        let a = ingest_long(base).unwrap();
        let b = reshape_crossed(crossed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_export_ingest() {
        let records = vec![
            rec("c1", "u", 1.0, 0.1, &[1.0, 2.0]),
            rec("c1", "u", 2.0, 0.2, &[1.0, 3.0]),
            rec("c1", "v", 3.0, 0.5, &[1.0, 2.0]),
            rec("c1", "v", 4.0, 0.6, &[1.0, 3.0]),
            rec("c2", "u", 5.0, 0.3, &[1.0, 4.0]),
            rec("c2", "v", 6.0, 0.7, &[1.0, 4.0]),
        ];
        let d = ingest_long(records).unwrap();
        let d2 = ingest_long(d.to_long_records()).unwrap();
        assert_eq!(d, d2);
    }
}
