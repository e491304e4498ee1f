//! Translation of a multinomial model into its Poisson-surrogate design.
//!
//! Every long row gets structural columns: one intercept per non-baseline
//! category (`C<label>`), then one block per covariate term. Generic terms
//! contribute the category-resolved covariate value directly; category-specific
//! terms are interacted with each non-baseline category indicator
//! (`<term>:C<label>`). The per-observation constants are not materialised as
//! dense indicator columns: each row only records which nuisance block it
//! belongs to.

use std::collections::HashMap;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::data::{Covariate, CovariateCell, CovariateKind, Dataset, RawValue, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientMode {
    /// One slope shared by all categories; the covariate value must vary by category.
    Generic,
    /// A separate slope for every non-baseline category.
    CategorySpecific,
}

/// A covariate, or a product of covariates, entering the linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub factors: Vec<String>,
    pub mode: CoefficientMode,
}

impl Term {
    pub fn generic(name: impl Into<String>) -> Self {
        Term { factors: vec![name.into()], mode: CoefficientMode::Generic }
    }

    pub fn specific(name: impl Into<String>) -> Self {
        Term { factors: vec![name.into()], mode: CoefficientMode::CategorySpecific }
    }

    pub fn interaction<S: Into<String>>(factors: impl IntoIterator<Item = S>, mode: CoefficientMode) -> Self {
        Term { factors: factors.into_iter().map(Into::into).collect(), mode }
    }

    pub fn label(&self) -> String {
        self.factors.join("*")
    }
}

/// Parses `name`, `name:generic`, `name:specific` or `a*b:specific`.
/// Without a suffix the coefficient is category-specific.
impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, mode) = match s.rsplit_once(':') {
            Some((body, "generic")) => (body, CoefficientMode::Generic),
            Some((body, "specific")) => (body, CoefficientMode::CategorySpecific),
            Some((_, other)) => {
                return Err(Error::Spec(format!(
                    "unknown coefficient mode `{other}` in `{s}` (generic|specific)"
                )))
            }
            None => (s, CoefficientMode::CategorySpecific),
        };
        let factors: Vec<String> = body.split('*').map(|f| f.trim().to_string()).collect();
        if factors.iter().any(String::is_empty) {
            return Err(Error::Spec(format!("malformed covariate term `{s}`")));
        }
        Ok(Term { factors, mode })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomEffects {
    None,
    /// Multiplicative Gamma effect per (group, non-baseline category).
    GammaPerCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceMode {
    /// One constant per observation.
    PerObservation,
    /// One constant per distinct covariate combination; rows are pooled.
    PooledCategorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
    /// Overrides the dataset's baseline category when set.
    pub baseline: Option<String>,
    pub random_effects: RandomEffects,
    pub nuisance: NuisanceMode,
}

impl ModelSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        ModelSpec {
            terms,
            baseline: None,
            random_effects: RandomEffects::None,
            nuisance: NuisanceMode::PerObservation,
        }
    }

    pub fn with_baseline(mut self, label: impl Into<String>) -> Self {
        self.baseline = Some(label.into());
        self
    }

    pub fn pooled(mut self) -> Self {
        self.nuisance = NuisanceMode::PooledCategorical;
        self
    }

    pub fn with_gamma_effects(mut self) -> Self {
        self.random_effects = RandomEffects::GammaPerCategory;
        self
    }

    /// Distinct covariate names used by the terms, in first-use order.
    pub fn covariate_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.terms {
            for f in &t.factors {
                if !out.contains(&f.as_str()) {
                    out.push(f);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResolvedTerm {
    /// Indices into `Encoder::covariates`.
    factors: Vec<usize>,
    mode: CoefficientMode,
    width: usize,
}

/// Maps covariate values to structural design rows. Holds everything needed
/// to encode new covariate profiles consistently with a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    categories: Vec<String>,
    baseline: usize,
    /// Covariates referenced by the spec, with dataset metadata (levels).
    covariates: Vec<Covariate>,
    /// Position of each spec covariate in the dataset.
    dataset_index: Vec<usize>,
    terms: Vec<ResolvedTerm>,
    column_names: Vec<String>,
}

impl Encoder {
    pub fn new(ds: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let baseline = match &spec.baseline {
            Some(b) => ds
                .category_index(b)
                .ok_or_else(|| Error::Spec(format!("baseline `{b}` is not a category label")))?,
            None => ds.baseline(),
        };
        let names = spec.covariate_names();
        let mut covariates = Vec::with_capacity(names.len());
        let mut dataset_index = Vec::with_capacity(names.len());
        for name in &names {
            let k = ds
                .covariate_index(name)
                .ok_or_else(|| Error::Spec(format!("covariate `{name}` is not in the data")))?;
            let cov = &ds.covariates()[k];
            if let Some(levels) = cov.levels() {
                if levels.len() < 2 {
                    return Err(Error::Spec(format!("categorical covariate `{name}` has a single level")));
                }
            }
            covariates.push(cov.clone());
            dataset_index.push(k);
        }

        let mut terms = Vec::with_capacity(spec.terms.len());
        for term in &spec.terms {
            let factors: Vec<usize> = term
                .factors
                .iter()
                .map(|f| names.iter().position(|n| n == f).unwrap())
                .collect();
            if term.mode == CoefficientMode::Generic
                && factors.iter().all(|&f| !covariates[f].varies_by_category)
            {
                return Err(Error::Spec(format!(
                    "term `{}` does not vary across categories; observation-specific covariates need category-specific coefficients",
                    term.label()
                )));
            }
            let width = factors.iter().map(|&f| factor_width(&covariates[f])).product();
            terms.push(ResolvedTerm { factors, mode: term.mode, width });
        }

        if spec.nuisance == NuisanceMode::PooledCategorical {
            if let Some(c) = covariates.iter().find(|c| !c.is_categorical()) {
                return Err(Error::Spec(format!(
                    "pooled design requires categorical covariates; `{}` is continuous",
                    c.name
                )));
            }
            if terms.windows(2).any(|w| w[0].mode != w[1].mode) {
                return Err(Error::Spec(
                    "pooled design supports all-generic or all-category-specific terms only".into(),
                ));
            }
        }

        let categories = ds.category_labels().to_vec();
        let mut enc = Encoder {
            categories,
            baseline,
            covariates,
            dataset_index,
            terms,
            column_names: Vec::new(),
        };
        enc.column_names = enc.build_names();
        Ok(enc)
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n_columns(&self) -> usize {
        self.column_names.len()
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Non-baseline categories in label order.
    pub fn non_baseline(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.categories.len()).filter(move |&q| q != self.baseline)
    }

    /// Reference (dropped) level of each categorical covariate, for reports.
    pub fn reference_levels(&self) -> Vec<(String, String)> {
        self.covariates
            .iter()
            .filter_map(|c| c.levels().map(|l| (c.name.clone(), l[0].clone())))
            .collect()
    }

    /// Category that owns each structural column, or `None` for generic columns.
    pub fn column_category(&self) -> Vec<Option<usize>> {
        let mut out: Vec<Option<usize>> = self.non_baseline().map(Some).collect();
        for t in &self.terms {
            match t.mode {
                CoefficientMode::Generic => out.extend(std::iter::repeat_n(None, t.width)),
                CoefficientMode::CategorySpecific => {
                    for q in self.non_baseline() {
                        out.extend(std::iter::repeat_n(Some(q), t.width));
                    }
                }
            }
        }
        out
    }

    fn build_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.non_baseline().map(|q| format!("C{}", self.categories[q])).collect();
        for t in &self.terms {
            let sub = self.term_subnames(t);
            match t.mode {
                CoefficientMode::Generic => names.extend(sub),
                CoefficientMode::CategorySpecific => {
                    for q in self.non_baseline() {
                        names.extend(sub.iter().map(|s| format!("{s}:C{}", self.categories[q])));
                    }
                }
            }
        }
        names
    }

    fn term_subnames(&self, t: &ResolvedTerm) -> Vec<String> {
        let mut acc = vec![String::new()];
        for &f in &t.factors {
            let cov = &self.covariates[f];
            let parts: Vec<String> = match &cov.kind {
                CovariateKind::Numeric => vec![cov.name.clone()],
                CovariateKind::Categorical { levels } => {
                    levels[1..].iter().map(|l| format!("{}[{}]", cov.name, l)).collect()
                }
            };
            acc = acc
                .iter()
                .flat_map(|a| {
                    parts.iter().map(move |p| if a.is_empty() { p.clone() } else { format!("{a}*{p}") })
                })
                .collect();
        }
        acc
    }

    /// Writes the structural row for one (observation, category) pair;
    /// `value(k)` returns spec covariate `k` resolved for that category.
    fn encode_row(&self, category: usize, value: impl Fn(usize) -> Value, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut col = 0;
        for q in self.non_baseline() {
            if q == category {
                out[col] = 1.0;
            }
            col += 1;
        }
        let mut buf = Vec::new();
        for t in &self.terms {
            buf.clear();
            buf.push(1.0);
            for &f in &t.factors {
                let next: Vec<f64> = match (value(f), &self.covariates[f].kind) {
                    (Value::Num(v), _) => buf.iter().map(|b| b * v).collect(),
                    (Value::Level(l), CovariateKind::Categorical { levels }) => buf
                        .iter()
                        .flat_map(|&b| (1..levels.len()).map(move |k| if k == l { b } else { 0.0 }))
                        .collect(),
                    (Value::Level(_), CovariateKind::Numeric) => unreachable!("validated dataset"),
                };
                buf = next;
            }
            match t.mode {
                CoefficientMode::Generic => {
                    out[col..col + t.width].copy_from_slice(&buf);
                    col += t.width;
                }
                CoefficientMode::CategorySpecific => {
                    for q in self.non_baseline() {
                        if q == category {
                            out[col..col + t.width].copy_from_slice(&buf);
                        }
                        col += t.width;
                    }
                }
            }
        }
    }

    /// Structural rows for every long record of `ds` (n_obs·Q × p).
    pub fn encode_dataset(&self, ds: &Dataset) -> DMatrix<f64> {
        let p = self.n_columns();
        let n = ds.records().len();
        let mut x = DMatrix::zeros(n, p);
        let mut row = vec![0.0; p];
        for (r, rec) in ds.records().iter().enumerate() {
            self.encode_row(rec.category, |k| rec.values[self.dataset_index[k]], &mut row);
            for (c, v) in row.iter().enumerate() {
                x[(r, c)] = *v;
            }
        }
        x
    }

    /// Structural rows (Q × p) for a new covariate profile.
    pub fn encode_profile(&self, profile: &CovariateProfile) -> Result<DMatrix<f64>> {
        let q = self.categories.len();
        let mut resolved: Vec<Vec<Value>> = Vec::with_capacity(self.covariates.len());
        for cov in &self.covariates {
            let cell = profile
                .get(&cov.name)
                .ok_or_else(|| Error::Prediction(format!("profile lacks covariate `{}`", cov.name)))?;
            let raws: Vec<&RawValue> = match cell {
                CovariateCell::Shared(v) => vec![v; q],
                CovariateCell::PerCategory(vs) if vs.len() == q => vs.iter().collect(),
                CovariateCell::PerCategory(vs) => {
                    return Err(Error::Prediction(format!(
                        "covariate `{}` has {} per-category values, expected {q}",
                        cov.name,
                        vs.len()
                    )))
                }
            };
            resolved.push(raws.into_iter().map(|r| encode_raw(cov, r)).collect::<Result<_>>()?);
        }
        let p = self.n_columns();
        let mut x = DMatrix::zeros(q, p);
        let mut row = vec![0.0; p];
        for c in 0..q {
            self.encode_row(c, |k| resolved[k][c], &mut row);
            for (j, v) in row.iter().enumerate() {
                x[(c, j)] = *v;
            }
        }
        Ok(x)
    }

    fn block_key(&self, ds: &Dataset, obs: usize) -> Vec<usize> {
        let mut key = Vec::with_capacity(self.covariates.len() * ds.n_categories());
        for rec in ds.observation(obs) {
            for &k in &self.dataset_index {
                match rec.values[k] {
                    Value::Level(l) => key.push(l),
                    Value::Num(_) => unreachable!("pooling requires categorical covariates"),
                }
            }
        }
        key
    }
}

fn factor_width(cov: &Covariate) -> usize {
    match &cov.kind {
        CovariateKind::Numeric => 1,
        CovariateKind::Categorical { levels } => levels.len() - 1,
    }
}

fn encode_raw(cov: &Covariate, raw: &RawValue) -> Result<Value> {
    match (&cov.kind, raw) {
        (CovariateKind::Numeric, RawValue::Num(v)) => Ok(Value::Num(*v)),
        (CovariateKind::Numeric, RawValue::Level(s)) => s
            .parse::<f64>()
            .map(Value::Num)
            .map_err(|_| Error::Prediction(format!("`{s}` is not numeric for covariate `{}`", cov.name))),
        (CovariateKind::Categorical { levels }, raw) => {
            let text = raw.to_string();
            levels
                .iter()
                .position(|l| *l == text)
                .map(Value::Level)
                .ok_or_else(|| Error::Prediction(format!("unseen level `{text}` for covariate `{}`", cov.name)))
        }
    }
}

/// Covariate values for a new observation, keyed by covariate name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateProfile {
    values: Vec<(String, CovariateCell)>,
}

impl CovariateProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared(mut self, name: impl Into<String>, value: RawValue) -> Self {
        self.values.push((name.into(), CovariateCell::Shared(value)));
        self
    }

    pub fn per_category(mut self, name: impl Into<String>, values: Vec<RawValue>) -> Self {
        self.values.push((name.into(), CovariateCell::PerCategory(values)));
        self
    }

    pub fn get(&self, name: &str) -> Option<&CovariateCell> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }
}

/// Poisson-surrogate design: dense structural columns plus a sparse block of
/// nuisance indicators (one active indicator per row).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    /// Structural block, n_rows × p.
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    /// Nuisance block index of each row, if the design has one.
    pub nuisance_block: Option<Vec<usize>>,
    pub nuisance_names: Vec<String>,
    /// Response count of each row (pooled rows carry summed counts).
    pub response: Vec<f64>,
    pub row_category: Vec<usize>,
    encoder: Option<Encoder>,
}

impl DesignMatrix {
    /// Design from raw parts, without dataset metadata.
    pub fn from_parts(
        x: DMatrix<f64>,
        column_names: Vec<String>,
        nuisance_block: Option<Vec<usize>>,
        response: Vec<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if column_names.len() != x.ncols() || response.len() != n {
            return Err(Error::Validation("design dimensions do not match".into()));
        }
        let nuisance_names = match &nuisance_block {
            Some(b) if b.len() != n => {
                return Err(Error::Validation("nuisance index length does not match rows".into()))
            }
            Some(b) => {
                let m = b.iter().max().map_or(0, |&m| m + 1);
                (0..m).map(|k| format!("I{}", k + 1)).collect()
            }
            None => Vec::new(),
        };
        Ok(DesignMatrix {
            x,
            column_names,
            nuisance_block,
            nuisance_names,
            response,
            row_category: vec![0; n],
            encoder: None,
        })
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        self.encoder.as_ref()
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_structural(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_nuisance(&self) -> usize {
        self.nuisance_names.len()
    }

    pub fn n_columns(&self) -> usize {
        self.n_nuisance() + self.n_structural()
    }

    /// Column indices of the nuisance indicators in the full design.
    pub fn nuisance_columns(&self) -> Range<usize> {
        0..self.n_nuisance()
    }

    /// Column indices of the structural block in the full design.
    pub fn structural_columns(&self) -> Range<usize> {
        self.n_nuisance()..self.n_columns()
    }

    /// Names of all columns: nuisance indicators first, then structural.
    pub fn all_column_names(&self) -> Vec<String> {
        self.nuisance_names.iter().chain(&self.column_names).cloned().collect()
    }

    /// Keeps the given rows and structural columns (nuisance blocks are kept as is).
    pub fn subset(&self, rows: &[usize], columns: &[usize]) -> DesignMatrix {
        let x = DMatrix::from_fn(rows.len(), columns.len(), |r, c| self.x[(rows[r], columns[c])]);
        DesignMatrix {
            x,
            column_names: columns.iter().map(|&c| self.column_names[c].clone()).collect(),
            nuisance_block: self.nuisance_block.as_ref().map(|b| rows.iter().map(|&r| b[r]).collect()),
            nuisance_names: self.nuisance_names.clone(),
            response: rows.iter().map(|&r| self.response[r]).collect(),
            row_category: rows.iter().map(|&r| self.row_category[r]).collect(),
            encoder: self.encoder.clone(),
        }
    }

    /// Materialises the full design with explicit indicator columns.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.n_nuisance();
        let mut full = DMatrix::zeros(self.n_rows(), self.n_columns());
        for r in 0..self.n_rows() {
            if let Some(blocks) = &self.nuisance_block {
                full[(r, blocks[r])] = 1.0;
            }
            for c in 0..self.n_structural() {
                full[(r, m + c)] = self.x[(r, c)];
            }
        }
        full
    }
}

/// Builds the surrogate design for `ds` under `spec`.
pub fn build_design(ds: &Dataset, spec: &ModelSpec) -> Result<DesignMatrix> {
    let encoder = Encoder::new(ds, spec)?;
    let q = ds.n_categories();
    match spec.nuisance {
        NuisanceMode::PerObservation => {
            let x = encoder.encode_dataset(ds);
            let records = ds.records();
            Ok(DesignMatrix {
                x,
                column_names: encoder.column_names().to_vec(),
                nuisance_block: Some(records.iter().map(|r| r.obs).collect()),
                nuisance_names: ds.obs_ids().iter().map(|id| format!("I{id}")).collect(),
                response: records.iter().map(|r| r.count as f64).collect(),
                row_category: records.iter().map(|r| r.category).collect(),
                encoder: Some(encoder),
            })
        }
        NuisanceMode::PooledCategorical => {
            let blocks = unique_covariate_groups(ds, spec)?;
            let full = encoder.encode_dataset(ds);
            let p = encoder.n_columns();
            let n = blocks.len() * q;
            let mut x = DMatrix::zeros(n, p);
            let mut response = vec![0.0; n];
            let mut nuisance_block = Vec::with_capacity(n);
            let mut row_category = Vec::with_capacity(n);
            let mut names = Vec::with_capacity(blocks.len());
            for (b, members) in blocks.iter().enumerate() {
                let first = members[0];
                for c in 0..q {
                    let r = b * q + c;
                    x.row_mut(r).copy_from(&full.row(first * q + c));
                    response[r] = members.iter().map(|&j| ds.record(j, c).count as f64).sum();
                    nuisance_block.push(b);
                    row_category.push(c);
                }
                names.push(block_name(ds, &encoder, first));
            }
            Ok(DesignMatrix {
                x,
                column_names: encoder.column_names().to_vec(),
                nuisance_block: Some(nuisance_block),
                nuisance_names: names,
                response,
                row_category,
                encoder: Some(encoder),
            })
        }
    }
}

fn block_name(ds: &Dataset, enc: &Encoder, obs: usize) -> String {
    let rec = ds.record(obs, 0);
    let parts: Vec<String> = enc
        .covariates
        .iter()
        .zip(&enc.dataset_index)
        .map(|(cov, &k)| {
            if cov.varies_by_category {
                let vals: Vec<String> = ds
                    .observation(obs)
                    .iter()
                    .map(|r| ds.raw_value(r, k).to_string())
                    .collect();
                format!("{}=({})", cov.name, vals.join("|"))
            } else {
                format!("{}={}", cov.name, ds.raw_value(rec, k))
            }
        })
        .collect();
    format!("I[{}]", parts.join(","))
}

/// Partitions observations into blocks sharing identical covariate values
/// (over every category). Blocks are in first-appearance order.
pub fn unique_covariate_groups(ds: &Dataset, spec: &ModelSpec) -> Result<Vec<Vec<usize>>> {
    let pooled = ModelSpec { nuisance: NuisanceMode::PooledCategorical, ..spec.clone() };
    let encoder = Encoder::new(ds, &pooled)?;
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for j in 0..ds.n_obs() {
        let key = encoder.block_key(ds, j);
        let next = blocks.len();
        let b = *index.entry(key).or_insert(next);
        if b == next {
            blocks.push(Vec::new());
        }
        blocks[b].push(j);
    }
    Ok(blocks)
}
