//! Multinomial count data in long and short layouts.
//!
//! The canonical in-memory form is long: one [`LongRecord`] per
//! (observation, category) pair, stored observation-major with categories in
//! label order, so record `j * Q + q` is category `q` of observation `j`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Covariate value as it appears in a file.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Num(f64),
    Level(String),
}

impl std::fmt::Display for RawValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RawValue::Num(v) => write!(f, "{v}"),
            RawValue::Level(s) => f.write_str(s),
        }
    }
}

/// Encoded covariate value; `Level` indexes into the covariate's level list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Num(f64),
    Level(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateKind {
    Numeric,
    /// Levels in first-observed order; the first level is the reference.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
    /// True when the value differs between categories of at least one observation.
    pub varies_by_category: bool,
}

impl Covariate {
    pub fn numeric(name: impl Into<String>) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Numeric,
            varies_by_category: false,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Covariate {
            name: name.into(),
            kind: CovariateKind::Categorical { levels },
            varies_by_category: false,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, CovariateKind::Categorical { .. })
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            CovariateKind::Categorical { levels } => Some(levels),
            CovariateKind::Numeric => None,
        }
    }

    fn raw(&self, value: Value) -> RawValue {
        match (value, &self.kind) {
            (Value::Num(v), _) => RawValue::Num(v),
            (Value::Level(l), CovariateKind::Categorical { levels }) => {
                RawValue::Level(levels[l].clone())
            }
            (Value::Level(l), CovariateKind::Numeric) => RawValue::Num(l as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub group: usize,
    pub obs: usize,
    pub category: usize,
    pub count: u64,
    /// One value per dataset covariate, resolved for this record's category.
    pub values: Vec<Value>,
}

/// Column names used for the structural roles when reading or writing CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleNames {
    pub group: String,
    pub obs: String,
    pub category: String,
    pub count: String,
}

impl Default for RoleNames {
    fn default() -> Self {
        RoleNames {
            group: "group".into(),
            obs: "obs".into(),
            category: "category".into(),
            count: "count".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    category_labels: Vec<String>,
    baseline: usize,
    covariates: Vec<Covariate>,
    group_ids: Option<Vec<String>>,
    obs_ids: Vec<String>,
    obs_group: Vec<usize>,
    records: Vec<LongRecord>,
    roles: RoleNames,
}

impl Dataset {
    /// Assembles and validates a dataset. `obs_group` may be empty when the
    /// data are independent (no grouping), in which case `group_ids` must be
    /// `None`. `varies_by_category` flags are recomputed from the records.
    pub fn new(
        category_labels: Vec<String>,
        baseline: usize,
        mut covariates: Vec<Covariate>,
        group_ids: Option<Vec<String>>,
        obs_ids: Vec<String>,
        obs_group: Vec<usize>,
        records: Vec<LongRecord>,
    ) -> Result<Self> {
        let q = category_labels.len();
        if q < 2 {
            return Err(Error::Validation(format!("need at least 2 categories, got {q}")));
        }
        if baseline >= q {
            return Err(Error::Validation("baseline category out of range".into()));
        }
        let n_obs = obs_ids.len();
        if n_obs == 0 {
            return Err(Error::Validation("dataset has no observations".into()));
        }
        let mut seen = HashMap::with_capacity(n_obs);
        for id in &obs_ids {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate observation id `{id}`")));
            }
        }
        let obs_group = match &group_ids {
            Some(groups) => {
                if obs_group.len() != n_obs || obs_group.iter().any(|&g| g >= groups.len()) {
                    return Err(Error::Validation("invalid observation-to-group map".into()));
                }
                obs_group
            }
            None => vec![0; n_obs],
        };
        if records.len() != n_obs * q {
            return Err(Error::Validation(format!(
                "expected {} long records ({} observations x {} categories), got {}",
                n_obs * q,
                n_obs,
                q,
                records.len()
            )));
        }
        for (k, rec) in records.iter().enumerate() {
            if rec.obs != k / q || rec.category != k % q || rec.group != obs_group[rec.obs] {
                return Err(Error::Validation(format!(
                    "record {k} is out of (observation, category) order"
                )));
            }
            if rec.values.len() != covariates.len() {
                return Err(Error::Validation(format!(
                    "record {k} has {} covariate values, expected {}",
                    rec.values.len(),
                    covariates.len()
                )));
            }
            for (value, cov) in rec.values.iter().zip(&covariates) {
                let ok = match (value, &cov.kind) {
                    (Value::Num(v), CovariateKind::Numeric) => v.is_finite(),
                    (Value::Level(l), CovariateKind::Categorical { levels }) => *l < levels.len(),
                    _ => false,
                };
                if !ok {
                    return Err(Error::Validation(format!(
                        "invalid value for covariate `{}` in record {k}",
                        cov.name
                    )));
                }
            }
        }
        for (c, cov) in covariates.iter_mut().enumerate() {
            cov.varies_by_category = records
                .chunks(q)
                .any(|block| block.iter().any(|r| r.values[c] != block[0].values[c]));
        }
        Ok(Dataset {
            category_labels,
            baseline,
            covariates,
            group_ids,
            obs_ids,
            obs_group,
            records,
            roles: RoleNames::default(),
        })
    }

    pub fn with_roles(mut self, roles: RoleNames) -> Self {
        self.roles = roles;
        self
    }

    pub fn with_baseline(mut self, label: &str) -> Result<Self> {
        self.baseline = self.category_index(label).ok_or_else(|| {
            Error::Spec(format!("baseline `{label}` is not a category label"))
        })?;
        Ok(self)
    }

    pub fn roles(&self) -> &RoleNames {
        &self.roles
    }

    pub fn n_categories(&self) -> usize {
        self.category_labels.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs_ids.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_ids.as_ref().map_or(1, Vec::len)
    }

    pub fn is_grouped(&self) -> bool {
        self.group_ids.is_some()
    }

    pub fn category_labels(&self) -> &[String] {
        &self.category_labels
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.category_labels.iter().position(|l| l == label)
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn group_ids(&self) -> Option<&[String]> {
        self.group_ids.as_deref()
    }

    pub fn obs_ids(&self) -> &[String] {
        &self.obs_ids
    }

    pub fn obs_group(&self, obs: usize) -> usize {
        self.obs_group[obs]
    }

    pub fn records(&self) -> &[LongRecord] {
        &self.records
    }

    pub fn record(&self, obs: usize, category: usize) -> &LongRecord {
        &self.records[obs * self.n_categories() + category]
    }

    /// Records of one observation, in category order.
    pub fn observation(&self, obs: usize) -> &[LongRecord] {
        let q = self.n_categories();
        &self.records[obs * q..(obs + 1) * q]
    }

    pub fn counts(&self, obs: usize) -> Vec<u64> {
        self.observation(obs).iter().map(|r| r.count).collect()
    }

    /// y_{j+}
    pub fn obs_total(&self, obs: usize) -> u64 {
        self.observation(obs).iter().map(|r| r.count).sum()
    }

    /// y_{i+q} for every group i and category q.
    pub fn group_category_totals(&self) -> Vec<Vec<u64>> {
        let q = self.n_categories();
        let mut totals = vec![vec![0u64; q]; self.n_groups()];
        for rec in &self.records {
            totals[rec.group][rec.category] += rec.count;
        }
        totals
    }

    /// Observation indices belonging to each group, in dataset order.
    pub fn group_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_groups()];
        for (j, &g) in self.obs_group.iter().enumerate() {
            members[g].push(j);
        }
        members
    }

    pub fn category_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.n_categories()];
        for rec in &self.records {
            totals[rec.category] += rec.count;
        }
        totals
    }

    pub fn raw_value(&self, record: &LongRecord, covariate: usize) -> RawValue {
        self.covariates[covariate].raw(record.values[covariate])
    }

    /// Same data with counts replaced; `counts[k]` goes to record `k`.
    pub fn with_counts(&self, counts: &[u64]) -> Result<Dataset> {
        if counts.len() != self.records.len() {
            return Err(Error::Validation("count vector length mismatch".into()));
        }
        let mut out = self.clone();
        for (rec, &c) in out.records.iter_mut().zip(counts) {
            rec.count = c;
        }
        Ok(out)
    }

    /// Converts to one [`ShortRecord`] per observation.
    pub fn to_short(&self) -> Vec<ShortRecord> {
        (0..self.n_obs())
            .map(|j| {
                let recs = self.observation(j);
                let covariates = self
                    .covariates
                    .iter()
                    .enumerate()
                    .map(|(c, cov)| {
                        let cell = if cov.varies_by_category {
                            CovariateCell::PerCategory(
                                recs.iter().map(|r| cov.raw(r.values[c])).collect(),
                            )
                        } else {
                            CovariateCell::Shared(cov.raw(recs[0].values[c]))
                        };
                        (cov.name.clone(), cell)
                    })
                    .collect();
                ShortRecord {
                    group_id: self.group_ids.as_ref().map(|g| g[self.obs_group[j]].clone()),
                    obs_id: self.obs_ids[j].clone(),
                    covariates,
                    counts: recs.iter().map(|r| r.count).collect(),
                }
            })
            .collect()
    }

    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        if self.is_grouped() {
            header.push(self.roles.group.clone());
        }
        header.push(self.roles.obs.clone());
        header.push(self.roles.category.clone());
        header.push(self.roles.count.clone());
        header.extend(self.covariates.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = Vec::with_capacity(header.len());
            if let Some(groups) = &self.group_ids {
                row.push(groups[rec.group].clone());
            }
            row.push(self.obs_ids[rec.obs].clone());
            row.push(self.category_labels[rec.category].clone());
            row.push(rec.count.to_string());
            for c in 0..self.covariates.len() {
                row.push(self.raw_value(rec, c).to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Short layout: one count column per category label; category-varying
    /// covariates become `name.label` columns.
    pub fn write_short_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        if self.is_grouped() {
            header.push(self.roles.group.clone());
        }
        header.push(self.roles.obs.clone());
        for cov in &self.covariates {
            if cov.varies_by_category {
                for label in &self.category_labels {
                    header.push(format!("{}.{}", cov.name, label));
                }
            } else {
                header.push(cov.name.clone());
            }
        }
        header.extend(self.category_labels.iter().cloned());
        w.write_record(&header)?;
        for rec in self.to_short() {
            let mut row = Vec::with_capacity(header.len());
            if let Some(g) = rec.group_id {
                row.push(g);
            }
            row.push(rec.obs_id);
            for (_, cell) in rec.covariates {
                match cell {
                    CovariateCell::Shared(v) => row.push(v.to_string()),
                    CovariateCell::PerCategory(vs) => row.extend(vs.iter().map(|v| v.to_string())),
                }
            }
            row.extend(rec.counts.iter().map(u64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateCell {
    Shared(RawValue),
    PerCategory(Vec<RawValue>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortRecord {
    pub group_id: Option<String>,
    pub obs_id: String,
    pub covariates: Vec<(String, CovariateCell)>,
    /// Counts in category-label order.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Short,
    Long,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Format::Short),
            "long" => Ok(Format::Long),
            other => Err(Error::Schema(format!("unknown format `{other}` (short|long)"))),
        }
    }
}

/// Column-role map for CSV ingestion.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub group: Option<String>,
    /// Observation id column; in short format the row number is used when absent.
    pub obs: Option<String>,
    /// Long format only.
    pub category: Option<String>,
    /// Long format only.
    pub count: Option<String>,
    /// Category labels in order. Required for short format (the count columns);
    /// optional for long format, where first-appearance order is the default.
    pub categories: Vec<String>,
    /// Covariates to keep; empty means every non-role column.
    pub covariates: Vec<String>,
    /// Covariates to treat as categorical even when their values parse as numbers.
    pub categorical: Vec<String>,
    pub baseline: Option<String>,
}

pub fn ingest_csv(path: impl AsRef<Path>, format: Format, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    ingest_reader(file, format, schema)
}

pub fn ingest_reader<R: Read>(reader: R, format: Format, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if header.iter().all(String::is_empty) || rows.is_empty() {
        return Err(Error::Validation("input has no data rows".into()));
    }
    let table = Table { header, rows };
    match format {
        Format::Long => ingest_long(&table, schema),
        Format::Short => ingest_short(&table, schema),
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("")
    }
}

/// Where each covariate's values come from in the input table.
enum Source {
    Column(usize),
    PerCategory(Vec<usize>),
}

fn parse_count(text: &str, row: usize) -> Result<u64> {
    match text.parse::<i64>() {
        Ok(v) if v < 0 => Err(Error::Validation(format!("negative count {v} in data row {}", row + 1))),
        Ok(v) => Ok(v as u64),
        Err(_) => match text.parse::<f64>() {
            Ok(v) if v < 0.0 => {
                Err(Error::Validation(format!("negative count {v} in data row {}", row + 1)))
            }
            Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as u64),
            _ => Err(Error::Validation(format!(
                "count `{text}` in data row {} is not a non-negative integer",
                row + 1
            ))),
        },
    }
}

/// Encodes raw string cells (in record order) as numeric or categorical values.
fn encode_covariate(name: &str, cells: &[String], force_categorical: bool) -> Result<(Covariate, Vec<Value>)> {
    if !force_categorical {
        let parsed: Option<Vec<f64>> = cells
            .iter()
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        if let Some(values) = parsed {
            return Ok((Covariate::numeric(name), values.into_iter().map(Value::Num).collect()));
        }
    }
    let mut levels: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut values = Vec::with_capacity(cells.len());
    for cell in cells {
        if cell.is_empty() {
            return Err(Error::Validation(format!("missing value for covariate `{name}`")));
        }
        let next = levels.len();
        let l = *index.entry(cell.as_str()).or_insert(next);
        if l == next {
            levels.push(cell.clone());
        }
        values.push(Value::Level(l));
    }
    Ok((Covariate::categorical(name, levels), values))
}

fn resolve_baseline(labels: &[String], schema: &Schema) -> Result<usize> {
    match &schema.baseline {
        Some(b) => labels
            .iter()
            .position(|l| l == b)
            .ok_or_else(|| Error::Schema(format!("baseline `{b}` is not a category label"))),
        None => Ok(0),
    }
}

struct Assembled {
    labels: Vec<String>,
    group_ids: Option<Vec<String>>,
    obs_ids: Vec<String>,
    obs_group: Vec<usize>,
    counts: Vec<u64>,
    /// Per covariate, raw cells in record order.
    cells: Vec<(String, Vec<String>)>,
}

fn finish(a: Assembled, schema: &Schema, roles: RoleNames) -> Result<Dataset> {
    let q = a.labels.len();
    let n_records = a.obs_ids.len() * q;
    let mut covariates = Vec::with_capacity(a.cells.len());
    let mut columns = Vec::with_capacity(a.cells.len());
    for (name, cells) in &a.cells {
        let force = schema.categorical.iter().any(|c| c == name);
        let (cov, values) = encode_covariate(name, cells, force)?;
        covariates.push(cov);
        columns.push(values);
    }
    let obs_group = if a.group_ids.is_some() { a.obs_group } else { Vec::new() };
    let records = (0..n_records)
        .map(|k| LongRecord {
            group: if obs_group.is_empty() { 0 } else { obs_group[k / q] },
            obs: k / q,
            category: k % q,
            count: a.counts[k],
            values: columns.iter().map(|col| col[k]).collect(),
        })
        .collect();
    let baseline = resolve_baseline(&a.labels, schema)?;
    Ok(Dataset::new(a.labels, baseline, covariates, a.group_ids, a.obs_ids, obs_group, records)?
        .with_roles(roles))
}

fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&k) = index.get(id) {
        return k;
    }
    ids.push(id.to_string());
    index.insert(id.to_string(), ids.len() - 1);
    ids.len() - 1
}

fn ingest_long(table: &Table, schema: &Schema) -> Result<Dataset> {
    let obs_name = schema
        .obs
        .as_deref()
        .ok_or_else(|| Error::Schema("long format needs an observation column".into()))?;
    let cat_name = schema
        .category
        .as_deref()
        .ok_or_else(|| Error::Schema("long format needs a category column".into()))?;
    let count_name = schema
        .count
        .as_deref()
        .ok_or_else(|| Error::Schema("long format needs a count column".into()))?;
    let obs_col = table.column(obs_name)?;
    let cat_col = table.column(cat_name)?;
    let count_col = table.column(count_name)?;
    let group_col = schema.group.as_deref().map(|g| table.column(g)).transpose()?;
    let roles: Vec<usize> = [Some(obs_col), Some(cat_col), Some(count_col), group_col]
        .into_iter()
        .flatten()
        .collect();
    let cov_cols: Vec<(String, usize)> = if schema.covariates.is_empty() {
        table
            .header
            .iter()
            .enumerate()
            .filter(|(i, _)| !roles.contains(i))
            .map(|(i, h)| (h.clone(), i))
            .collect()
    } else {
        schema
            .covariates
            .iter()
            .map(|c| Ok((c.clone(), table.column(c)?)))
            .collect::<Result<_>>()?
    };

    let mut labels = schema.categories.clone();
    let fixed_labels = !labels.is_empty();
    let mut label_index: HashMap<String, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    let mut obs_ids = Vec::new();
    let mut obs_index = HashMap::new();
    let mut group_ids = Vec::new();
    let mut group_index = HashMap::new();
    let mut obs_group: Vec<usize> = Vec::new();
    // (observation, category) -> row
    let mut rows_of: Vec<Vec<(usize, usize)>> = Vec::new();

    for r in 0..table.rows.len() {
        let obs = intern(&mut obs_ids, &mut obs_index, table.cell(r, obs_col));
        if obs == rows_of.len() {
            rows_of.push(Vec::new());
            obs_group.push(usize::MAX);
        }
        let label = table.cell(r, cat_col);
        let cat = match label_index.get(label) {
            Some(&c) => c,
            None if fixed_labels => {
                return Err(Error::Validation(format!(
                    "unknown category `{label}` in data row {}",
                    r + 1
                )))
            }
            None => intern(&mut labels, &mut label_index, label),
        };
        rows_of[obs].push((cat, r));
        if let Some(gc) = group_col {
            let g = intern(&mut group_ids, &mut group_index, table.cell(r, gc));
            if obs_group[obs] == usize::MAX {
                obs_group[obs] = g;
            } else if obs_group[obs] != g {
                return Err(Error::Validation(format!(
                    "observation `{}` appears in more than one group",
                    obs_ids[obs]
                )));
            }
        }
    }

    let q = labels.len();
    let mut counts = vec![0u64; obs_ids.len() * q];
    let mut cells: Vec<(String, Vec<String>)> = cov_cols
        .iter()
        .map(|(n, _)| (n.clone(), vec![String::new(); obs_ids.len() * q]))
        .collect();
    for (obs, rows) in rows_of.iter().enumerate() {
        let mut seen = vec![false; q];
        for &(cat, _) in rows {
            seen[cat] = true;
        }
        if rows.len() != q || seen.iter().any(|s| !s) {
            return Err(Error::Validation(format!(
                "observation `{}` has {} rows covering {} of {} categories",
                obs_ids[obs],
                rows.len(),
                seen.iter().filter(|&&s| s).count(),
                q
            )));
        }
        for &(cat, r) in rows {
            let k = obs * q + cat;
            counts[k] = parse_count(table.cell(r, count_col), r)?;
            for ((_, col), (_, out)) in cov_cols.iter().zip(cells.iter_mut()) {
                out[k] = table.cell(r, *col).to_string();
            }
        }
    }

    let roles = RoleNames {
        group: schema.group.clone().unwrap_or_else(|| "group".into()),
        obs: obs_name.to_string(),
        category: cat_name.to_string(),
        count: count_name.to_string(),
    };
    finish(
        Assembled {
            labels,
            group_ids: group_col.map(|_| group_ids),
            obs_ids,
            obs_group,
            counts,
            cells,
        },
        schema,
        roles,
    )
}

fn ingest_short(table: &Table, schema: &Schema) -> Result<Dataset> {
    if schema.categories.len() < 2 {
        return Err(Error::Schema(
            "short format needs the category labels (one count column each)".into(),
        ));
    }
    let labels = schema.categories.clone();
    let q = labels.len();
    let count_cols: Vec<usize> = labels.iter().map(|l| table.column(l)).collect::<Result<_>>()?;
    let obs_col = schema.obs.as_deref().map(|o| table.column(o)).transpose()?;
    let group_col = schema.group.as_deref().map(|g| table.column(g)).transpose()?;
    let mut taken: Vec<usize> = count_cols.clone();
    taken.extend(obs_col);
    taken.extend(group_col);

    // Discover covariates: plain columns, or complete `name.label` families.
    let mut discovered: Vec<(String, Source)> = Vec::new();
    let mut families: HashMap<String, Vec<Option<usize>>> = HashMap::new();
    let mut family_order: Vec<String> = Vec::new();
    for (i, h) in table.header.iter().enumerate() {
        if taken.contains(&i) {
            continue;
        }
        let family = labels.iter().enumerate().find_map(|(c, l)| {
            h.strip_suffix(l.as_str())
                .and_then(|rest| rest.strip_suffix('.'))
                .filter(|base| !base.is_empty())
                .map(|base| (base.to_string(), c))
        });
        match family {
            Some((base, c)) => {
                let slot = families.entry(base.clone()).or_insert_with(|| {
                    family_order.push(base.clone());
                    vec![None; q]
                });
                slot[c] = Some(i);
            }
            None => discovered.push((h.clone(), Source::Column(i))),
        }
    }
    for base in family_order {
        let slots = &families[&base];
        if slots.iter().all(Option::is_some) {
            discovered.push((base, Source::PerCategory(slots.iter().map(|s| s.unwrap()).collect())));
        } else {
            for (c, s) in slots.iter().enumerate() {
                if let Some(i) = s {
                    discovered.push((format!("{base}.{}", labels[c]), Source::Column(*i)));
                }
            }
        }
    }
    let selected: Vec<(String, Source)> = if schema.covariates.is_empty() {
        discovered
    } else {
        let mut out = Vec::new();
        for name in &schema.covariates {
            let pos = discovered.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::Schema(format!(
                    "missing column `{name}` (or a complete set of `{name}.<category>` columns)"
                ))
            })?;
            out.push(discovered.swap_remove(pos));
        }
        out
    };

    let n_obs = table.rows.len();
    let mut obs_ids = Vec::with_capacity(n_obs);
    let mut group_ids = Vec::new();
    let mut group_index = HashMap::new();
    let mut obs_group = Vec::with_capacity(n_obs);
    let mut counts = Vec::with_capacity(n_obs * q);
    let mut cells: Vec<(String, Vec<String>)> = selected
        .iter()
        .map(|(n, _)| (n.clone(), Vec::with_capacity(n_obs * q)))
        .collect();
    for r in 0..n_obs {
        obs_ids.push(match obs_col {
            Some(c) => table.cell(r, c).to_string(),
            None => (r + 1).to_string(),
        });
        if let Some(gc) = group_col {
            obs_group.push(intern(&mut group_ids, &mut group_index, table.cell(r, gc)));
        }
        for &col in &count_cols {
            counts.push(parse_count(table.cell(r, col), r)?);
        }
        for ((_, source), (_, out)) in selected.iter().zip(cells.iter_mut()) {
            for c in 0..q {
                let col = match source {
                    Source::Column(i) => *i,
                    Source::PerCategory(cols) => cols[c],
                };
                out.push(table.cell(r, col).to_string());
            }
        }
    }
    let roles = RoleNames {
        group: schema.group.clone().unwrap_or_else(|| "group".into()),
        obs: schema.obs.clone().unwrap_or_else(|| "obs".into()),
        category: schema.category.clone().unwrap_or_else(|| "category".into()),
        count: schema.count.clone().unwrap_or_else(|| "count".into()),
    };
    finish(
        Assembled {
            labels,
            group_ids: group_col.map(|_| group_ids),
            obs_ids,
            obs_group,
            counts,
            cells,
        },
        schema,
        roles,
    )
}
