//! Labeled datasets carrying optional oracle scores.
//!
//! Rows are `(id, features, z, y, stratum)` where `z` is the oracle score in
//! `[0, 1]`, `y` the binary label and `stratum` a category tag used by the
//! covariate-shift experiments. Everything except `id` and `features` is
//! optional so the same type holds labeled training data, unlabeled pools and
//! oracle-labeled augmentation sets.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(rename = "z", default, skip_serializing_if = "Option::is_none")]
    pub oracle_score: Option<f64>,
    #[serde(rename = "y", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, features: Vec<f64>) -> Self {
        Instance {
            id: id.into(),
            features,
            oracle_score: None,
            label: None,
            stratum: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_oracle_score(mut self, z: f64) -> Self {
        self.oracle_score = Some(z);
        self
    }

    pub fn with_stratum(mut self, stratum: impl Into<String>) -> Self {
        self.stratum = Some(stratum.into());
        self
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if let Some(z) = self.oracle_score {
            if !(0.0..=1.0).contains(&z) {
                return Err(format!("z = {z} outside [0, 1]"));
            }
        }
        if let Some(y) = self.label {
            if y > 1 {
                return Err(format!("y = {y} is not 0 or 1"));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }
}

/// An ordered collection of instances sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    instances: Vec<Instance>,
}

impl LabeledDataset {
    /// Validates dimensions, id uniqueness and value ranges.
    ///
    /// An empty instance list is allowed and takes its dimension from `dim`.
    pub fn new(dim: usize, instances: Vec<Instance>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(instances.len());
        for (row, inst) in instances.iter().enumerate() {
            if inst.features.len() != dim {
                return Err(Error::MalformedRow {
                    row: row + 1,
                    message: format!(
                        "instance {} has {} features, expected {dim}",
                        inst.id,
                        inst.features.len()
                    ),
                });
            }
            inst.validate().map_err(|message| Error::MalformedRow {
                row: row + 1,
                message: format!("instance {}: {message}", inst.id),
            })?;
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate id {}", inst.id)));
            }
        }
        Ok(LabeledDataset { dim, instances })
    }

    /// Builds a dataset whose dimension is taken from the first instance.
    pub fn from_instances(instances: Vec<Instance>) -> Result<Self> {
        let dim = instances.first().map_or(0, |i| i.features.len());
        Self::new(dim, instances)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<Instance> {
        self.instances
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.instances
            .iter()
            .map(|i| i.features.as_slice())
            .collect()
    }

    /// Labels as `0.0`/`1.0`; errors on the first unlabeled instance.
    pub fn labels(&self) -> Result<Vec<f64>> {
        self.instances
            .iter()
            .map(|i| {
                i.label
                    .map(f64::from)
                    .ok_or_else(|| Error::MissingLabel { id: i.id.clone() })
            })
            .collect()
    }

    pub fn oracle_scores(&self) -> Result<Vec<f64>> {
        self.instances
            .iter()
            .map(|i| {
                i.oracle_score
                    .ok_or_else(|| Error::MissingOracleScore { id: i.id.clone() })
            })
            .collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.instances.iter().all(|i| i.label.is_some())
    }

    pub fn has_oracle_scores(&self) -> bool {
        self.instances.iter().all(|i| i.oracle_score.is_some())
    }

    /// Keeps the instances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&Instance) -> bool) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            instances: self.instances.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }

    /// Same instances with labels removed.
    pub fn without_labels(&self) -> LabeledDataset {
        let mut out = self.clone();
        for inst in &mut out.instances {
            inst.label = None;
        }
        out
    }

    /// Attaches oracle scores by id. Every instance must receive one.
    pub fn with_oracle_scores(&self, scores: &BTreeMap<String, f64>) -> Result<LabeledDataset> {
        let mut out = self.clone();
        for inst in &mut out.instances {
            let z = *scores
                .get(&inst.id)
                .ok_or_else(|| Error::MissingOracleScore {
                    id: inst.id.clone(),
                })?;
            if !(0.0..=1.0).contains(&z) {
                return Err(Error::ScoreOutOfRange(z));
            }
            inst.oracle_score = Some(z);
        }
        Ok(out)
    }

    /// Counts instances per stratum tag; untagged instances are skipped.
    pub fn stratum_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            if let Some(s) = &inst.stratum {
                *counts.entry(s.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.dim != other.dim && !other.is_empty() && !self.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let dim = if self.is_empty() { other.dim } else { self.dim };
        let mut instances = self.instances.clone();
        instances.extend(other.instances.iter().cloned());
        LabeledDataset::new(dim, instances)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Csv => read_csv(file),
        Format::Jsonl => read_jsonl(BufReader::new(file)),
    }
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        Format::Csv => write_csv(ds, &mut out)?,
        Format::Jsonl => write_jsonl(ds, &mut out)?,
    }
    out.flush().map_err(|e| Error::io(path, e))
}

struct CsvLayout {
    dim: usize,
    z: Option<usize>,
    y: Option<usize>,
    stratum: Option<usize>,
}

fn csv_layout(header: &csv::StringRecord) -> Result<CsvLayout> {
    let bad = |message: String| Error::MalformedRow { row: 1, message };
    if header.get(0) != Some("id") {
        return Err(bad("first column must be `id`".into()));
    }
    let mut dim = 0;
    while header.get(dim + 1) == Some(format!("f{dim}").as_str()) {
        dim += 1;
    }
    let mut layout = CsvLayout {
        dim,
        z: None,
        y: None,
        stratum: None,
    };
    for (col, name) in header.iter().enumerate().skip(dim + 1) {
        let slot = match name {
            "z" => &mut layout.z,
            "y" => &mut layout.y,
            "stratum" => &mut layout.stratum,
            other => return Err(bad(format!("unexpected column {other:?}"))),
        };
        if slot.replace(col).is_some() {
            return Err(bad(format!("duplicate column {name:?}")));
        }
    }
    Ok(layout)
}

fn parse_label(text: &str) -> std::result::Result<u8, String> {
    let v: f64 = text
        .parse()
        .map_err(|_| format!("y = {text:?} is not a number"))?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(format!("y = {text} is not 0 or 1"))
    }
}

fn parse_score(text: &str) -> std::result::Result<f64, String> {
    let v: f64 = text
        .parse()
        .map_err(|_| format!("z = {text:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("z = {text} outside [0, 1]"))
    }
}

fn read_csv(reader: impl std::io::Read) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let layout = csv_layout(rdr.headers()?)?;
    let mut instances = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let inst = csv_instance(&record, &layout)
            .map_err(|message| Error::MalformedRow { row, message })?;
        instances.push(inst);
    }
    LabeledDataset::new(layout.dim, instances).map_err(|e| shift_row(e, 1))
}

fn shift_row(err: Error, by: usize) -> Error {
    match err {
        Error::MalformedRow { row, message } => Error::MalformedRow {
            row: row + by,
            message,
        },
        other => other,
    }
}

fn csv_instance(
    record: &csv::StringRecord,
    layout: &CsvLayout,
) -> std::result::Result<Instance, String> {
    let field = |col: usize| {
        record
            .get(col)
            .ok_or_else(|| format!("missing column {col}"))
    };
    let mut inst = Instance::new(field(0)?, Vec::with_capacity(layout.dim));
    for k in 0..layout.dim {
        let text = field(k + 1)?;
        let v: f64 = text
            .parse()
            .map_err(|_| format!("f{k} = {text:?} is not a number"))?;
        inst.features.push(v);
    }
    let optional = |col: Option<usize>| -> std::result::Result<Option<&str>, String> {
        match col {
            Some(c) => Ok(Some(field(c)?).filter(|s| !s.is_empty())),
            None => Ok(None),
        }
    };
    inst.oracle_score = optional(layout.z)?.map(parse_score).transpose()?;
    inst.label = optional(layout.y)?.map(parse_label).transpose()?;
    inst.stratum = optional(layout.stratum)?.map(str::to_owned);
    Ok(inst)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    id: String,
    features: Vec<f64>,
    #[serde(default)]
    z: Option<f64>,
    #[serde(default)]
    y: Option<f64>,
    #[serde(default)]
    stratum: Option<String>,
}

fn read_jsonl(reader: impl BufRead) -> Result<LabeledDataset> {
    let mut instances = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRow { row, message };
        let raw: JsonRow = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let expected = *dim.get_or_insert(raw.features.len());
        if raw.features.len() != expected {
            return Err(malformed(format!(
                "{} features, expected {expected}",
                raw.features.len()
            )));
        }
        let label = raw
            .y
            .map(|v| parse_label(&v.to_string()))
            .transpose()
            .map_err(malformed)?;
        let z = raw
            .z
            .map(|v| parse_score(&v.to_string()))
            .transpose()
            .map_err(malformed)?;
        instances.push(Instance {
            id: raw.id,
            features: raw.features,
            oracle_score: z,
            label,
            stratum: raw.stratum,
        });
    }
    LabeledDataset::new(dim.unwrap_or(0), instances)
}

fn write_csv(ds: &LabeledDataset, out: impl Write) -> Result<()> {
    let has_z = ds.instances.iter().any(|i| i.oracle_score.is_some());
    let has_y = ds.instances.iter().any(|i| i.label.is_some());
    let has_stratum = ds.instances.iter().any(|i| i.stratum.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend((0..ds.dim).map(|k| format!("f{k}")));
    if has_z {
        header.push("z".into());
    }
    if has_y {
        header.push("y".into());
    }
    if has_stratum {
        header.push("stratum".into());
    }
    w.write_record(&header)?;
    for inst in &ds.instances {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(inst.id.clone());
        rec.extend(inst.features.iter().map(|v| v.to_string()));
        if has_z {
            rec.push(inst.oracle_score.map(|v| v.to_string()).unwrap_or_default());
        }
        if has_y {
            rec.push(inst.label.map(|v| v.to_string()).unwrap_or_default());
        }
        if has_stratum {
            rec.push(inst.stratum.clone().unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn write_jsonl(ds: &LabeledDataset, mut out: impl Write) -> Result<()> {
    for inst in &ds.instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Randomly partitions `ds` into `(train, test)` with
/// `round(n * test_fraction)` test instances. Both parts keep the original
/// instance order.
pub fn split(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n = ds.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n < 2 || n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} instances at fraction {test_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Assignment of every instance to one of `k` folds (0-based fold indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold index per instance, aligned with the dataset's instance order.
    pub fold_of: Vec<usize>,
    pub ids: Vec<String>,
}

impl FoldAssignment {
    pub fn fold_for(&self, id: &str) -> Option<usize> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|p| self.fold_of[p])
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, held_out)` instance positions for fold `j`.
    pub fn indices(&self, j: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold_of.len()).partition(|&i| self.fold_of[i] != j)
    }
}

pub fn make_folds(ds: &LabeledDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    let ids: Vec<String> = ds.instances.iter().map(|i| i.id.clone()).collect();
    let fold_of = balanced_folds(ids.len(), k, seed)?;
    Ok(FoldAssignment {
        k,
        seed,
        fold_of,
        ids,
    })
}

/// Balanced random fold labels for `n` items.
pub fn balanced_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count {k} < 2")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} exceeds instance count {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(fold_of)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub tag: String,
    /// Added to the standard-normal feature draw; length `d`.
    pub shift: Vec<f64>,
    pub weight: f64,
    /// Added to the true logit for instances drawn from this stratum.
    #[serde(default)]
    pub logit_offset: f64,
}

/// Extra label noise close to the true decision boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryNoise {
    /// Instances with `|true logit| < band` are affected.
    pub band: f64,
    pub flip_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    /// `d` weights followed by the intercept.
    pub true_weights: Vec<f64>,
    #[serde(default)]
    pub strata: Vec<Stratum>,
    #[serde(default)]
    pub boundary_noise: Option<BoundaryNoise>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(d: usize, n: usize, true_weights: Vec<f64>, seed: u64) -> Self {
        SyntheticSpec {
            d,
            n,
            true_weights,
            strata: Vec::new(),
            boundary_noise: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.true_weights.len() != self.d + 1 {
            return bad(format!(
                "true_weights has length {}, expected d + 1 = {}",
                self.true_weights.len(),
                self.d + 1
            ));
        }
        if !self.strata.is_empty() {
            let mut total = 0.0;
            for s in &self.strata {
                if s.shift.len() != self.d {
                    return bad(format!("stratum {} shift has wrong length", s.tag));
                }
                if !(s.weight >= 0.0) {
                    return bad(format!("stratum {} has negative weight", s.tag));
                }
                total += s.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("stratum weights sum to {total}, expected 1"));
            }
        }
        if let Some(noise) = self.boundary_noise {
            if !(0.0..=1.0).contains(&noise.flip_probability) || !(noise.band >= 0.0) {
                return bad("boundary noise needs band >= 0 and flip probability in [0, 1]".into());
            }
        }
        Ok(())
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Draws `n` instances: standard-normal features (plus the stratum shift) and
/// labels `y ~ Bernoulli(sigmoid(w.x + b))`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let (w, b) = spec.true_weights.split_at(spec.d);
    let b = b[0];
    let width = spec.n.max(1).to_string().len();
    let mut instances = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let stratum = if spec.strata.is_empty() {
            None
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = spec.strata.len() - 1;
            for (s, st) in spec.strata.iter().enumerate() {
                acc += st.weight;
                if u < acc {
                    pick = s;
                    break;
                }
            }
            Some(&spec.strata[pick])
        };
        let mut x: Vec<f64> = (0..spec.d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut logit = b;
        if let Some(st) = stratum {
            for (xi, s) in x.iter_mut().zip(&st.shift) {
                *xi += s;
            }
            logit += st.logit_offset;
        }
        logit += w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        let mut y = u8::from(rng.random::<f64>() < sigmoid(logit));
        let flip: f64 = rng.random();
        if let Some(noise) = spec.boundary_noise {
            if logit.abs() < noise.band && flip < noise.flip_probability {
                y = 1 - y;
            }
        }
        let mut inst = Instance::new(format!("s{i:0width$}"), x).with_label(y);
        if let Some(st) = stratum {
            inst = inst.with_stratum(st.tag.clone());
        }
        instances.push(inst);
    }
    LabeledDataset::new(spec.d, instances)
}

/// Bag-of-words feature hashing: each side's lowercase alphanumeric tokens
/// are counted into `dim / 2` buckets and the two halves are concatenated.
pub fn featurize_text(query: &str, doc: &str, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "feature dimension {dim} must be even and >= 2"
        )));
    }
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for (offset, text) in [(0, query), (half, doc)] {
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let bucket = (fnv1a(token.to_lowercase().as_bytes()) % half as u64) as usize;
            v[offset + bucket] += 1.0;
        }
    }
    Ok(v)
}
