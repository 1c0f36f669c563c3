//! Hierarchical patient data: the nested hospital/surgeon index, CSV
//! ingestion with label relabelling, positivity diagnostics and the
//! empirical outcome variance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::sample_variance;

/// Cells with fewer patients than this are flagged in the positivity report.
pub const LOW_VOLUME_THRESHOLD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// Nested cluster index. Hospitals and surgeons are 0-based internally and
/// 1-based in every file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "HierarchyRepr", try_from = "HierarchyRepr")]
pub struct Hierarchy {
    surgeons_per_hospital: Vec<usize>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct HierarchyRepr {
    surgeons_per_hospital: Vec<usize>,
}

impl From<Hierarchy> for HierarchyRepr {
    fn from(h: Hierarchy) -> Self {
        Self { surgeons_per_hospital: h.surgeons_per_hospital }
    }
}

impl TryFrom<HierarchyRepr> for Hierarchy {
    type Error = Error;
    fn try_from(r: HierarchyRepr) -> Result<Self> {
        Hierarchy::new(r.surgeons_per_hospital)
    }
}

impl Hierarchy {
    pub fn new(surgeons_per_hospital: Vec<usize>) -> Result<Self> {
        if surgeons_per_hospital.is_empty() {
            return Err(Error::Data("hierarchy needs at least one hospital".into()));
        }
        if let Some(z) = surgeons_per_hospital.iter().position(|&h| h == 0) {
            return Err(Error::Data(format!("hospital {} has no surgeons", z + 1)));
        }
        let mut offsets = Vec::with_capacity(surgeons_per_hospital.len() + 1);
        let mut acc = 0;
        for &h in &surgeons_per_hospital {
            offsets.push(acc);
            acc += h;
        }
        offsets.push(acc);
        Ok(Self { surgeons_per_hospital, offsets })
    }

    /// Splits `q` surgeons as evenly as possible over `m` hospitals, the
    /// first `q mod m` hospitals receiving one extra.
    pub fn even_split(m: usize, q: usize) -> Result<Self> {
        if m == 0 || q < m {
            return Err(Error::Config("q must be ≥ m".into()));
        }
        let base = q / m;
        let extra = q % m;
        Self::new((0..m).map(|z| base + usize::from(z < extra)).collect())
    }

    pub fn hospitals(&self) -> usize {
        self.surgeons_per_hospital.len()
    }

    pub fn surgeons(&self, hospital: usize) -> usize {
        self.surgeons_per_hospital[hospital]
    }

    pub fn surgeons_per_hospital(&self) -> &[usize] {
        &self.surgeons_per_hospital
    }

    /// Total surgeon count `q`.
    pub fn cells(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn contains(&self, hospital: usize, surgeon: usize) -> bool {
        hospital < self.hospitals() && surgeon < self.surgeons(hospital)
    }

    pub fn cell_index(&self, hospital: usize, surgeon: usize) -> usize {
        debug_assert!(self.contains(hospital, surgeon));
        self.offsets[hospital] + surgeon
    }

    /// Flat cell range belonging to one hospital.
    pub fn hospital_cells(&self, hospital: usize) -> std::ops::Range<usize> {
        self.offsets[hospital]..self.offsets[hospital + 1]
    }

    pub fn cell_of(&self, index: usize) -> (usize, usize) {
        let z = self.offsets.partition_point(|&o| o <= index) - 1;
        (z, index - self.offsets[z])
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.hospitals()).flat_map(move |z| (0..self.surgeons(z)).map(move |s| (z, s)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub y: f64,
    pub hospital: usize,
    pub surgeon: usize,
    pub x: Vec<f64>,
}

/// Original hospital/surgeon labels, indexed by the dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub hospitals: Vec<String>,
    pub surgeons: Vec<Vec<String>>,
}

impl LabelMap {
    pub fn identity(hierarchy: &Hierarchy) -> Self {
        Self {
            hospitals: (1..=hierarchy.hospitals()).map(|z| z.to_string()).collect(),
            surgeons: (0..hierarchy.hospitals())
                .map(|z| (1..=hierarchy.surgeons(z)).map(|s| s.to_string()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataSet {
    records: Vec<PatientRecord>,
    hierarchy: Hierarchy,
    covariate_names: Vec<String>,
    outcome_kind: OutcomeKind,
    labels: LabelMap,
}

impl DataSet {
    /// Builds a dataset whose records already use dense 0-based ids.
    pub fn new(
        records: Vec<PatientRecord>,
        hierarchy: Hierarchy,
        covariate_names: Vec<String>,
        outcome_kind: OutcomeKind,
    ) -> Result<Self> {
        let labels = LabelMap::identity(&hierarchy);
        Self::with_labels(records, hierarchy, covariate_names, outcome_kind, labels)
    }

    pub fn with_labels(
        records: Vec<PatientRecord>,
        hierarchy: Hierarchy,
        covariate_names: Vec<String>,
        outcome_kind: OutcomeKind,
        labels: LabelMap,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        let p = covariate_names.len();
        for (i, r) in records.iter().enumerate() {
            if !hierarchy.contains(r.hospital, r.surgeon) {
                return Err(Error::InvalidCell { hospital: r.hospital + 1, surgeon: r.surgeon + 1 });
            }
            if r.x.len() != p {
                return Err(Error::Dimension { expected: p, got: r.x.len() });
            }
            if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record {} has a missing or non-finite value", i + 1)));
            }
            if outcome_kind == OutcomeKind::Binary && r.y != 0.0 && r.y != 1.0 {
                return Err(Error::OutcomeOutOfRange { line: i + 2, value: r.y });
            }
        }
        Ok(Self { records, hierarchy, covariate_names, outcome_kind, labels })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// Flat cell index of every record.
    pub fn cell_indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| self.hierarchy.cell_index(r.hospital, r.surgeon)).collect()
    }

    /// Record indices grouped by flat cell index.
    pub fn cell_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.hierarchy.cells()];
        for (i, r) in self.records.iter().enumerate() {
            members[self.hierarchy.cell_index(r.hospital, r.surgeon)].push(i);
        }
        members
    }

    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.hierarchy.cells()];
        for r in &self.records {
            counts[self.hierarchy.cell_index(r.hospital, r.surgeon)] += 1;
        }
        counts
    }

    /// Same records and hierarchy with a different outcome vector.
    pub fn with_outcomes(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.records.len() {
            return Err(Error::Dimension { expected: self.records.len(), got: y.len() });
        }
        let records = self
            .records
            .iter()
            .zip(y)
            .map(|(r, &v)| PatientRecord { y: v, ..r.clone() })
            .collect();
        Self::with_labels(
            records,
            self.hierarchy.clone(),
            self.covariate_names.clone(),
            self.outcome_kind,
            self.labels.clone(),
        )
    }

    /// Keeps only the records of one hospital, relabelled as a single-hospital dataset.
    pub fn restrict_to_hospital(&self, hospital: usize) -> Result<Self> {
        let records: Vec<PatientRecord> = self
            .records
            .iter()
            .filter(|r| r.hospital == hospital)
            .map(|r| PatientRecord { hospital: 0, ..r.clone() })
            .collect();
        let hierarchy = Hierarchy::new(vec![self.hierarchy.surgeons(hospital)])?;
        let labels = LabelMap {
            hospitals: vec![self.labels.hospitals[hospital].clone()],
            surgeons: vec![self.labels.surgeons[hospital].clone()],
        };
        Self::with_labels(records, hierarchy, self.covariate_names.clone(), self.outcome_kind, labels)
    }
}

/// Column mapping for [`load_dataset`]. Defaults follow the standard header
/// `id,hospital,surgeon,y,x1,...,xp`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub id: String,
    pub hospital: String,
    pub surgeon: String,
    pub outcome: String,
    /// `None` uses every remaining column, in file order.
    pub covariates: Option<Vec<String>>,
    /// `None` infers binary when every outcome is 0 or 1.
    pub outcome_kind: Option<OutcomeKind>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            hospital: "hospital".into(),
            surgeon: "surgeon".into(),
            outcome: "y".into(),
            covariates: None,
            outcome_kind: None,
        }
    }
}

fn label_order(labels: &BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.iter().cloned().collect();
    if v.iter().all(|l| l.parse::<i64>().is_ok()) {
        v.sort_by_key(|l| l.parse::<i64>().unwrap());
    }
    v
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<DataSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let hosp_col = col(&schema.hospital)?;
    let surg_col = col(&schema.surgeon)?;
    let y_col = col(&schema.outcome)?;
    let covariates: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![id_col, hosp_col, surg_col, y_col].contains(i))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let cov_cols = covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    struct Raw {
        id: String,
        hospital: String,
        surgeon: String,
        y: f64,
        x: Vec<f64>,
    }
    let parse = |field: &str, line: usize, what: &str| -> Result<f64> {
        field.parse::<f64>().map_err(|_| Error::Parse {
            line,
            message: format!("cannot parse {what} value `{field}` as a number"),
        })
    };
    let mut raw = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let get = |c: usize| row.get(c).unwrap_or("");
        let y = parse(get(y_col), line, &schema.outcome)?;
        let x = cov_cols
            .iter()
            .zip(&covariates)
            .map(|(&c, name)| parse(get(c), line, name))
            .collect::<Result<Vec<_>>>()?;
        raw.push(Raw {
            id: get(id_col).to_string(),
            hospital: get(hosp_col).to_string(),
            surgeon: get(surg_col).to_string(),
            y,
            x,
        });
    }
    if raw.is_empty() {
        return Err(Error::Data("dataset has no records".into()));
    }

    let outcome_kind = match schema.outcome_kind {
        Some(k) => k,
        None if raw.iter().all(|r| r.y == 0.0 || r.y == 1.0) => OutcomeKind::Binary,
        None => OutcomeKind::Continuous,
    };

    let mut surgeons_by_hospital: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in &raw {
        surgeons_by_hospital.entry(r.hospital.clone()).or_default().insert(r.surgeon.clone());
    }
    let hospital_labels = label_order(&surgeons_by_hospital.keys().cloned().collect());
    let surgeon_labels: Vec<Vec<String>> =
        hospital_labels.iter().map(|h| label_order(&surgeons_by_hospital[h])).collect();
    let hospital_index: BTreeMap<&str, usize> =
        hospital_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let surgeon_index: Vec<BTreeMap<&str, usize>> = surgeon_labels
        .iter()
        .map(|ls| ls.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
        .collect();
    let hierarchy = Hierarchy::new(surgeon_labels.iter().map(Vec::len).collect())?;

    let records = raw
        .into_iter()
        .map(|r| {
            let z = hospital_index[r.hospital.as_str()];
            let s = surgeon_index[z][r.surgeon.as_str()];
            PatientRecord { id: r.id, y: r.y, hospital: z, surgeon: s, x: r.x }
        })
        .collect();
    let labels = LabelMap { hospitals: hospital_labels, surgeons: surgeon_labels };
    DataSet::with_labels(records, hierarchy, covariates, outcome_kind, labels)
}

/// Writes the standard CSV layout using the original labels. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_dataset(d: &DataSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_csv(d))?;
    Ok(())
}

pub fn dataset_to_csv(d: &DataSet) -> String {
    let mut out = String::from("id,hospital,surgeon,y");
    for name in d.covariate_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in d.records() {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.id, d.labels.hospitals[r.hospital], d.labels.surgeons[r.hospital][r.surgeon], r.y
        );
        for v in &r.x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Sample variance of the outcome with divisor `n - 1`.
pub fn empirical_variance(d: &DataSet) -> Result<f64> {
    sample_variance(&d.outcomes())
        .ok_or_else(|| Error::Data("empirical variance needs at least two records".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumCount {
    pub covariate: String,
    pub at_zero: usize,
    pub at_one: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityRow {
    pub hospital: String,
    pub surgeon: String,
    pub count: usize,
    pub strata: Vec<StratumCount>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub binary_covariates: Vec<String>,
    pub rows: Vec<PositivityRow>,
}

impl PositivityReport {
    pub fn flagged(&self) -> impl Iterator<Item = &PositivityRow> {
        self.rows.iter().filter(|r| !r.flags.is_empty())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("hospital,surgeon,count,flags\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.hospital, r.surgeon, r.count, r.flags.join(";"));
        }
        out
    }
}

/// Per-cell patient counts, stratified on every covariate that only takes
/// the values 0 and 1. Cells missing a stratum or with fewer than
/// [`LOW_VOLUME_THRESHOLD`] patients are flagged; nothing here is an error.
pub fn positivity_report(d: &DataSet) -> PositivityReport {
    let p = d.covariate_dim();
    let binary: Vec<usize> = (0..p)
        .filter(|&j| d.records().iter().all(|r| r.x[j] == 0.0 || r.x[j] == 1.0))
        .filter(|&j| {
            let ones = d.records().iter().filter(|r| r.x[j] == 1.0).count();
            ones > 0 && ones < d.len()
        })
        .collect();
    let h = d.hierarchy();
    let mut counts = vec![0usize; h.cells()];
    let mut strata = vec![vec![(0usize, 0usize); binary.len()]; h.cells()];
    for r in d.records() {
        let c = h.cell_index(r.hospital, r.surgeon);
        counts[c] += 1;
        for (k, &j) in binary.iter().enumerate() {
            if r.x[j] == 0.0 {
                strata[c][k].0 += 1;
            } else {
                strata[c][k].1 += 1;
            }
        }
    }
    let rows = h
        .iter_cells()
        .map(|(z, s)| {
            let c = h.cell_index(z, s);
            let mut flags = Vec::new();
            if counts[c] < LOW_VOLUME_THRESHOLD {
                flags.push("low_volume".to_string());
            }
            let strata: Vec<StratumCount> = binary
                .iter()
                .enumerate()
                .map(|(k, &j)| {
                    let name = &d.covariate_names()[j];
                    let (zero, one) = strata[c][k];
                    if zero == 0 {
                        flags.push(format!("{name}=0"));
                    }
                    if one == 0 {
                        flags.push(format!("{name}=1"));
                    }
                    StratumCount { covariate: name.clone(), at_zero: zero, at_one: one }
                })
                .collect();
            PositivityRow {
                hospital: d.labels().hospitals[z].clone(),
                surgeon: d.labels().surgeons[z][s].clone(),
                count: counts[c],
                strata,
                flags,
            }
        })
        .collect();
    PositivityReport {
        binary_covariates: binary.iter().map(|&j| d.covariate_names()[j].clone()).collect(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_binary_file() {
        let f = write_tmp("id,hospital,surgeon,y,x1\n1,1,1,0,0.5\n2,1,1,1,1.5\n3,2,1,1,0\n4,2,1,0,2\n");
        let d = load_dataset(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.hierarchy().hospitals(), 2);
        assert_eq!(d.hierarchy().surgeons_per_hospital(), &[1, 1]);
        assert_eq!(d.outcome_kind(), OutcomeKind::Binary);
    }

    #[test]
    fn rejects_binary_outcome_out_of_range() {
        let f = write_tmp("id,hospital,surgeon,y,x1\n1,1,1,0,0\n2,1,1,2,1\n");
        let schema = ColumnSchema { outcome_kind: Some(OutcomeKind::Binary), ..Default::default() };
        let err = load_dataset(f.path(), &schema).unwrap_err();
        assert!(err.to_string().contains("outcome out of range"), "{err}");
    }

    #[test]
    fn unknown_column_and_parse_errors() {
        let f = write_tmp("id,hosp,surgeon,y\n1,1,1,0\n");
        assert!(matches!(load_dataset(f.path(), &ColumnSchema::default()), Err(Error::UnknownColumn(_))));
        let f = write_tmp("id,hospital,surgeon,y\n1,1,1,abc\n");
        assert!(matches!(load_dataset(f.path(), &ColumnSchema::default()), Err(Error::Parse { .. })));
    }

    #[test]
    fn relabels_sparse_ids_and_keeps_mapping() {
        let f = write_tmp("id,hospital,surgeon,y\na,10,7,0.5\nb,3,9,1.5\nc,10,2,2.5\nd,3,9,0.1\n");
        let d = load_dataset(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(d.hierarchy().surgeons_per_hospital(), &[1, 2]);
        assert_eq!(d.labels().hospitals, vec!["3", "10"]);
        assert_eq!(d.labels().surgeons[1], vec!["2", "7"]);
        assert_eq!(d.records()[0].hospital, 1);
        assert_eq!(d.records()[0].surgeon, 1);
        assert_eq!(d.outcome_kind(), OutcomeKind::Continuous);
    }

    #[test]
    fn empirical_variance_examples() {
        let h = Hierarchy::new(vec![1]).unwrap();
        let mk = |ys: &[f64]| {
            let recs = ys
                .iter()
                .enumerate()
                .map(|(i, &y)| PatientRecord { id: i.to_string(), y, hospital: 0, surgeon: 0, x: vec![] })
                .collect();
            DataSet::new(recs, h.clone(), vec![], OutcomeKind::Continuous).unwrap()
        };
        assert!((empirical_variance(&mk(&[0.0, 0.0, 1.0, 1.0])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(empirical_variance(&mk(&[2.5; 10])).unwrap(), 0.0);
        assert!(empirical_variance(&mk(&[1.0])).is_err());
    }

    fn cell_dataset(cells: &[(usize, usize, &[(f64, f64)])], h: Vec<usize>) -> DataSet {
        let mut recs = Vec::new();
        for &(z, s, rows) in cells {
            for &(x1, x2) in rows {
                recs.push(PatientRecord {
                    id: recs.len().to_string(),
                    y: 0.0,
                    hospital: z,
                    surgeon: s,
                    x: vec![x1, x2],
                });
            }
        }
        DataSet::new(recs, Hierarchy::new(h).unwrap(), vec!["x1".into(), "x2".into()], OutcomeKind::Binary)
            .unwrap()
    }

    #[test]
    fn balanced_design_has_no_flags() {
        let rows: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 0.3, (i % 2) as f64)).collect();
        let d = cell_dataset(&[(0, 0, &rows), (0, 1, &rows), (1, 0, &rows)], vec![2, 1]);
        let rep = positivity_report(&d);
        assert_eq!(rep.binary_covariates, vec!["x2"]);
        assert_eq!(rep.flagged().count(), 0);
        assert_eq!(rep.rows.iter().map(|r| r.count).sum::<usize>(), d.len());
    }

    #[test]
    fn cell_missing_stratum_is_flagged() {
        let mixed: Vec<(f64, f64)> = (0..6).map(|i| (0.1 * i as f64, (i % 2) as f64)).collect();
        let ones: Vec<(f64, f64)> = (0..6).map(|i| (0.1 * i as f64, 1.0)).collect();
        let d = cell_dataset(&[(0, 0, &mixed), (1, 0, &ones)], vec![1, 1]);
        let rep = positivity_report(&d);
        let flagged: Vec<_> = rep.flagged().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].hospital, "2");
        assert_eq!(flagged[0].flags, vec!["x2=0"]);
        assert!(rep.to_csv().contains("2,1,6,x2=0"));
    }

    #[test]
    fn hierarchy_indexing() {
        let h = Hierarchy::new(vec![2, 1, 3]).unwrap();
        assert_eq!(h.cells(), 6);
        assert_eq!(h.cell_index(2, 1), 4);
        assert_eq!(h.cell_of(4), (2, 1));
        assert_eq!(h.hospital_cells(1), 2..3);
        assert_eq!(h.iter_cells().count(), 6);
        let even = Hierarchy::even_split(5, 27).unwrap();
        assert_eq!(even.surgeons_per_hospital(), &[6, 6, 5, 5, 5]);
        assert!(Hierarchy::even_split(5, 3).is_err());
    }
}
