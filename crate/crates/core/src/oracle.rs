//! Oracle score providers.
//!
//! An oracle maps an instance to a score `z` in `[0, 1]`. Three providers
//! share the [`OracleProvider`] trait:
//!
//! - [`CachedOracle`] reads scores from an `id,z` CSV file and never calls out.
//! - [`HttpOracle`] renders a prompt per instance, POSTs it to a
//!   completions-style endpoint and parses the reply. Results are cached, so
//!   a batch scored twice issues no remote calls the second time.
//! - [`SyntheticOracle`] reproduces the label with probability `q`, seeded
//!   per instance id.
//!
//! Every provider returns scores ordered by instance id.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

pub trait OracleProvider {
    /// One score per instance, sorted by instance id.
    fn score_batch(&mut self, instances: &[Instance]) -> Result<Vec<(String, f64)>>;
}

fn sorted_by_id(instances: &[Instance]) -> Vec<&Instance> {
    let mut v: Vec<&Instance> = instances.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Scores keyed by instance id, optionally backed by an `id,z` CSV file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleCache {
    scores: BTreeMap<String, f64>,
    path: Option<PathBuf>,
}

impl OracleCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path`; a missing file yields an empty cache bound to that path.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let scores = if path.exists() {
            read_cache(&path)?
        } else {
            BTreeMap::new()
        };
        Ok(OracleCache {
            scores,
            path: Some(path),
        })
    }

    /// Loads `path`, which must exist.
    pub fn load(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let scores = read_cache(&path)?;
        Ok(OracleCache {
            scores,
            path: Some(path),
        })
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn insert(&mut self, id: impl Into<String>, z: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::ScoreOutOfRange(z));
        }
        self.scores.insert(id.into(), z);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &BTreeMap<String, f64> {
        &self.scores
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Writes the cache to its backing file, if any, sorted by id.
    pub fn persist(&self) -> Result<()> {
        match &self.path {
            Some(p) => write_cache(&self.scores, p),
            None => Ok(()),
        }
    }

    pub fn save_as(&self, path: impl AsRef<Path>) -> Result<()> {
        write_cache(&self.scores, path.as_ref())
    }
}

fn read_cache(path: &Path) -> Result<BTreeMap<String, f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "z" {
        return Err(Error::MalformedRow {
            row: 1,
            message: "oracle cache header must be `id,z`".into(),
        });
    }
    let mut scores = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let z: f64 = rec[1].parse().map_err(|_| Error::MalformedRow {
            row,
            message: format!("z = {:?} is not a number", &rec[1]),
        })?;
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::MalformedRow {
                row,
                message: format!("z = {z} outside [0, 1]"),
            });
        }
        scores.insert(rec[0].to_string(), z);
    }
    Ok(scores)
}

fn write_cache(scores: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "z"])?;
    for (id, z) in scores {
        // shortest representation that parses back to the same f64
        w.write_record([id.as_str(), &z.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cache-only provider; a missing id is an error.
#[derive(Debug, Clone)]
pub struct CachedOracle {
    cache: OracleCache,
}

impl CachedOracle {
    pub fn new(cache: OracleCache) -> Self {
        CachedOracle { cache }
    }

    pub fn from_file(path: impl Into<PathBuf>) -> Result<Self> {
        OracleCache::load(path).map(Self::new)
    }
}

impl OracleProvider for CachedOracle {
    fn score_batch(&mut self, instances: &[Instance]) -> Result<Vec<(String, f64)>> {
        sorted_by_id(instances)
            .into_iter()
            .map(|inst| {
                self.cache
                    .get(&inst.id)
                    .map(|z| (inst.id.clone(), z))
                    .ok_or_else(|| Error::CacheMiss(inst.id.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticMode {
    Binary,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracleSpec {
    /// Probability of reproducing the label, in `[0.5, 1]`.
    pub accuracy: f64,
    #[serde(default = "default_mode")]
    pub mode: SyntheticMode,
    /// Standard deviation of the Gaussian noise in soft mode.
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> SyntheticMode {
    SyntheticMode::Binary
}

impl SyntheticOracleSpec {
    pub fn binary(accuracy: f64, seed: u64) -> Self {
        SyntheticOracleSpec {
            accuracy,
            mode: SyntheticMode::Binary,
            sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.accuracy) {
            return Err(Error::InvalidArgument(format!(
                "synthetic oracle accuracy {} outside [0.5, 1]",
                self.accuracy
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma {} must be >= 0",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Stand-in oracle that knows the true labels.
///
/// Binary mode emits the label with probability `accuracy` and its complement
/// otherwise. Soft mode emits
/// `clamp(y * q + (1 - y) * (1 - q) + N(0, sigma), 0, 1)`. The draw for an
/// instance depends only on `(seed, id)`.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    spec: SyntheticOracleSpec,
    hidden_labels: HashMap<String, u8>,
}

impl SyntheticOracle {
    pub fn new(spec: SyntheticOracleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SyntheticOracle {
            spec,
            hidden_labels: HashMap::new(),
        })
    }

    /// Labels to use for instances that arrive without one.
    pub fn with_hidden_labels(mut self, labels: HashMap<String, u8>) -> Self {
        self.hidden_labels = labels;
        self
    }

    pub fn score_one(&self, id: &str, label: u8) -> f64 {
        let mut rng = seeded(derive_seed(self.spec.seed, id));
        let q = self.spec.accuracy;
        let y = f64::from(label);
        match self.spec.mode {
            SyntheticMode::Binary => {
                if rng.random::<f64>() < q {
                    y
                } else {
                    1.0 - y
                }
            }
            SyntheticMode::Soft => {
                let centre = y * q + (1.0 - y) * (1.0 - q);
                let noise = if self.spec.sigma > 0.0 {
                    Normal::new(0.0, self.spec.sigma)
                        .expect("sigma validated")
                        .sample(&mut rng)
                } else {
                    0.0
                };
                (centre + noise).clamp(0.0, 1.0)
            }
        }
    }
}

impl OracleProvider for SyntheticOracle {
    fn score_batch(&mut self, instances: &[Instance]) -> Result<Vec<(String, f64)>> {
        sorted_by_id(instances)
            .into_iter()
            .map(|inst| {
                let label = inst
                    .label
                    .or_else(|| self.hidden_labels.get(&inst.id).copied())
                    .ok_or_else(|| Error::MissingLabel {
                        id: inst.id.clone(),
                    })?;
                Ok((inst.id.clone(), self.score_one(&inst.id, label)))
            })
            .collect()
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// Substitutes `{name}` placeholders with values from `metadata`.
pub fn render_prompt(template: &str, metadata: &BTreeMap<String, String>) -> Result<String> {
    let re = placeholder_regex();
    if let Some(missing) = re
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .find(|k| !metadata.contains_key(k))
    {
        return Err(Error::MissingPlaceholder(missing));
    }
    Ok(re
        .replace_all(template, |c: &regex::Captures| metadata[&c[1]].clone())
        .into_owned())
}

/// Word-to-score fallbacks for [`parse_score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordMap(pub BTreeMap<String, f64>);

impl Default for KeywordMap {
    /// The relevance task: label 1 means irrelevant.
    fn default() -> Self {
        KeywordMap(
            [
                ("irrelevant", 1.0),
                ("yes", 1.0),
                ("relevant", 0.0),
                ("no", 0.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        )
    }
}

fn number_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").expect("valid regex"))
}

fn word_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z]+").expect("valid regex"))
}

/// Extracts a score from a model response.
///
/// In order: a JSON object's numeric `score` field; the first number in the
/// text that lies in `[0, 1]`; the first word found in `keywords`. Numbers
/// outside `[0, 1]` are rejected, never clamped.
pub fn parse_score(text: &str, keywords: &KeywordMap) -> Result<f64> {
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text.trim()) {
        if let Some(v) = obj.get("score") {
            let z = match v {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => s.trim().parse().ok(),
                _ => None,
            }
            .ok_or_else(|| Error::UnparseableScore(text.to_string()))?;
            return if (0.0..=1.0).contains(&z) {
                Ok(z)
            } else {
                Err(Error::ScoreOutOfRange(z))
            };
        }
    }
    let mut rejected = None;
    for m in number_regex().find_iter(text) {
        if let Ok(v) = m.as_str().parse::<f64>() {
            if (0.0..=1.0).contains(&v) {
                return Ok(v);
            }
            rejected.get_or_insert(v);
        }
    }
    for w in word_regex().find_iter(text) {
        if let Some(&z) = keywords.0.get(&w.as_str().to_lowercase()) {
            return Ok(z);
        }
    }
    match rejected {
        Some(v) => Err(Error::ScoreOutOfRange(v)),
        None => Err(Error::UnparseableScore(text.to_string())),
    }
}

/// Pulls the completion text out of common completions-style response
/// bodies; other bodies are returned unchanged.
pub fn completion_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    if v.get("score").is_some() {
        return body.to_string();
    }
    let choice = v.get("choices").and_then(|c| c.get(0));
    let candidates = [
        choice.and_then(|c| c.get("text")),
        choice
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content")),
        v.get("response"),
        v.get("output"),
        v.get("content"),
        v.get("text"),
    ];
    let text = candidates
        .into_iter()
        .flatten()
        .find_map(|c| c.as_str().map(str::to_string));
    text.unwrap_or_else(|| body.to_string())
}

/// Synchronous JSON POST, abstracted so tests can stand in for the network.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
    ) -> std::result::Result<String, String>;
}

/// Blocking HTTP transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build();
        UreqTransport {
            agent: config.into(),
        }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
    ) -> std::result::Result<String, String> {
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| e.to_string())?;
        let mut resp = req.send(&payload[..]).map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpOracleConfig {
    pub url: String,
    pub model: String,
    /// Prompt template with `{placeholder}` fields.
    pub template: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    /// JSONL file of `{"id": .., "<field>": "<text>", ..}` records supplying
    /// template fields. `{id}` and `{stratum}` are always available.
    #[serde(default)]
    pub metadata_path: Option<PathBuf>,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub keywords: Option<KeywordMap>,
}

fn default_concurrency() -> usize {
    4
}

fn default_retries() -> usize {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_secs() -> u64 {
    60
}

impl HttpOracleConfig {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        template: impl Into<String>,
    ) -> Self {
        HttpOracleConfig {
            url: url.into(),
            model: model.into(),
            template: template.into(),
            token_env: None,
            metadata_path: None,
            cache_path: None,
            concurrency: default_concurrency(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            keywords: None,
        }
    }
}

/// Loads a JSONL metadata file into `id -> {field -> text}`.
pub fn load_metadata(path: &Path) -> Result<HashMap<String, BTreeMap<String, String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::MalformedRow {
            row: i + 1,
            message,
        };
        let obj: serde_json::Map<String, Value> =
            serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let id = obj
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing string `id`".into()))?
            .to_string();
        let fields = obj
            .into_iter()
            .map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, text)
            })
            .collect();
        out.insert(id, fields);
    }
    Ok(out)
}

/// Remote scorer with a write-through cache.
pub struct HttpOracle {
    config: HttpOracleConfig,
    cache: OracleCache,
    transport: Box<dyn Transport>,
    metadata: HashMap<String, BTreeMap<String, String>>,
    keywords: KeywordMap,
    remote_calls: AtomicUsize,
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig) -> Result<Self> {
        let transport = UreqTransport::new(Duration::from_secs(config.timeout_secs));
        Self::with_transport(config, Box::new(transport))
    }

    pub fn with_transport(config: HttpOracleConfig, transport: Box<dyn Transport>) -> Result<Self> {
        if config.concurrency == 0 {
            return Err(Error::Config("oracle concurrency must be >= 1".into()));
        }
        let cache = match &config.cache_path {
            Some(p) => OracleCache::open(p)?,
            None => OracleCache::in_memory(),
        };
        let metadata = match &config.metadata_path {
            Some(p) => load_metadata(p)?,
            None => HashMap::new(),
        };
        let keywords = config.keywords.clone().unwrap_or_default();
        Ok(HttpOracle {
            config,
            cache,
            transport,
            metadata,
            keywords,
            remote_calls: AtomicUsize::new(0),
        })
    }

    /// Requests sent so far, including retries.
    pub fn remote_calls(&self) -> usize {
        self.remote_calls.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &OracleCache {
        &self.cache
    }

    fn prompt_for(&self, inst: &Instance) -> Result<String> {
        let mut fields = self.metadata.get(&inst.id).cloned().unwrap_or_default();
        fields.entry("id".into()).or_insert_with(|| inst.id.clone());
        if let Some(s) = &inst.stratum {
            fields.entry("stratum".into()).or_insert_with(|| s.clone());
        }
        render_prompt(&self.config.template, &fields)
    }

    fn request(&self, prompt: &str, bearer: Option<&str>) -> std::result::Result<f64, String> {
        let body = serde_json::json!({ "model": self.config.model, "prompt": prompt });
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            self.remote_calls.fetch_add(1, Ordering::Relaxed);
            match self.transport.post_json(&self.config.url, &body, bearer) {
                Ok(text) => match parse_score(&completion_text(&text), &self.keywords) {
                    Ok(z) => return Ok(z),
                    Err(e) => last_err = e.to_string(),
                },
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }
}

impl OracleProvider for HttpOracle {
    fn score_batch(&mut self, instances: &[Instance]) -> Result<Vec<(String, f64)>> {
        let ordered = sorted_by_id(instances);
        let misses: Vec<&Instance> = ordered
            .iter()
            .copied()
            .filter(|i| self.cache.get(&i.id).is_none())
            .collect();
        if !misses.is_empty() {
            let bearer = match &self.config.token_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    Error::Config(format!("environment variable {var} is not set"))
                })?),
                None => None,
            };
            let prompts = misses
                .iter()
                .map(|i| self.prompt_for(i))
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Mutex<Option<std::result::Result<f64, String>>>> =
                (0..misses.len()).map(|_| Mutex::new(None)).collect();
            let next = AtomicUsize::new(0);
            let workers = self.config.concurrency.min(misses.len());
            let this = &*self;
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let k = next.fetch_add(1, Ordering::Relaxed);
                        if k >= prompts.len() {
                            break;
                        }
                        let r = this.request(&prompts[k], bearer.as_deref());
                        *results[k].lock().expect("result slot") = Some(r);
                    });
                }
            });
            let mut failures = Vec::new();
            for (inst, slot) in misses.iter().zip(results) {
                match slot.into_inner().expect("result slot") {
                    Some(Ok(z)) => self.cache.insert(inst.id.clone(), z)?,
                    Some(Err(e)) => failures.push((inst.id.clone(), e)),
                    None => failures.push((inst.id.clone(), "not attempted".into())),
                }
            }
            self.cache.persist()?;
            if !failures.is_empty() {
                return Err(Error::OracleFailures { failures });
            }
        }
        Ok(ordered
            .into_iter()
            .map(|i| (i.id.clone(), self.cache.get(&i.id).expect("scored above")))
            .collect())
    }
}

/// Provider selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleConfig {
    Cached { path: PathBuf },
    Synthetic(SyntheticOracleSpec),
    Http(HttpOracleConfig),
}

impl OracleConfig {
    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            OracleConfig::Cached { path } => fix(path),
            OracleConfig::Http(http) => {
                if let Some(p) = &mut http.cache_path {
                    fix(p);
                }
                if let Some(p) = &mut http.metadata_path {
                    fix(p);
                }
            }
            OracleConfig::Synthetic(_) => {}
        }
    }

    /// Builds the provider. `hidden_labels` feeds the synthetic oracle for
    /// instances whose label has been withheld.
    pub fn build(&self, hidden_labels: HashMap<String, u8>) -> Result<Box<dyn OracleProvider>> {
        Ok(match self {
            OracleConfig::Cached { path } => Box::new(CachedOracle::from_file(path)?),
            OracleConfig::Synthetic(spec) => {
                Box::new(SyntheticOracle::new(*spec)?.with_hidden_labels(hidden_labels))
            }
            OracleConfig::Http(cfg) => Box::new(HttpOracle::new(cfg.clone())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn labeled(n: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| Instance::new(format!("x{i:05}"), vec![0.0]).with_label((i % 2) as u8))
            .collect()
    }

    #[test]
    fn render_examples() {
        let meta: BTreeMap<String, String> = [("query", "sofa"), ("product", "red couch")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        assert_eq!(
            render_prompt("Q: {query} P: {product}", &meta).unwrap(),
            "Q: sofa P: red couch"
        );
        let mut partial = meta.clone();
        partial.remove("product");
        match render_prompt("Q: {query} P: {product}", &partial) {
            Err(Error::MissingPlaceholder(p)) => assert_eq!(p, "product"),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            render_prompt("no fields here", &BTreeMap::new()).unwrap(),
            "no fields here"
        );
    }

    #[test]
    fn render_does_not_rescan_substituted_text() {
        let meta: BTreeMap<String, String> =
            [("a".to_string(), "{b}".to_string())].into_iter().collect();
        assert_eq!(render_prompt("<{a}>", &meta).unwrap(), "<{b}>");
    }

    #[test]
    fn parse_ladder() {
        let kw = KeywordMap::default();
        assert_eq!(parse_score(r#"{"score": 0.8}"#, &kw).unwrap(), 0.8);
        assert_eq!(parse_score("The answer is 1", &kw).unwrap(), 1.0);
        assert_eq!(parse_score("irrelevant", &kw).unwrap(), 1.0);
        assert_eq!(parse_score("Relevant.", &kw).unwrap(), 0.0);
        assert_eq!(parse_score("Yes, I think so", &kw).unwrap(), 1.0);
        assert_eq!(parse_score("score: .25", &kw).unwrap(), 0.25);
        assert!(matches!(
            parse_score(r#"{"score": 1.5}"#, &kw),
            Err(Error::ScoreOutOfRange(_))
        ));
        assert!(
            matches!(parse_score("I rate it 7", &kw), Err(Error::ScoreOutOfRange(v)) if v == 7.0)
        );
        assert!(matches!(
            parse_score("unclear", &kw),
            Err(Error::UnparseableScore(_))
        ));
        assert_eq!(parse_score("on a scale of 5 I say 0.4", &kw).unwrap(), 0.4);
    }

    #[test]
    fn completion_shapes() {
        assert_eq!(completion_text(r#"{"choices":[{"text":" 1"}]}"#), " 1");
        assert_eq!(
            completion_text(
                r#"{"choices":[{"message":{"role":"assistant","content":"irrelevant"}}]}"#
            ),
            "irrelevant"
        );
        assert_eq!(completion_text(r#"{"score":0.3}"#), r#"{"score":0.3}"#);
        assert_eq!(completion_text("plain"), "plain");
    }

    #[test]
    fn cache_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.csv");
        let mut cache = OracleCache::open(&path).unwrap();
        assert!(cache.is_empty());
        let values = [
            0.1 + 0.2,
            1.0 / 3.0,
            1e-300,
            0.0,
            1.0,
            0.123_456_789_012_345_68,
        ];
        for (i, v) in values.iter().enumerate() {
            cache.insert(format!("id{i}"), *v).unwrap();
        }
        cache.persist().unwrap();
        let back = OracleCache::load(&path).unwrap();
        for (i, v) in values.iter().enumerate() {
            assert_eq!(back.get(&format!("id{i}")).unwrap().to_bits(), v.to_bits());
        }
        assert!(cache.insert("bad", 1.5).is_err());
    }

    #[test]
    fn cached_provider() {
        let mut cache = OracleCache::in_memory();
        cache.insert("b", 0.25).unwrap();
        cache.insert("a", 1.0).unwrap();
        let mut oracle = CachedOracle::new(cache);
        let insts = vec![Instance::new("b", vec![]), Instance::new("a", vec![])];
        assert_eq!(
            oracle.score_batch(&insts).unwrap(),
            vec![("a".to_string(), 1.0), ("b".to_string(), 0.25)]
        );
        match oracle.score_batch(&[Instance::new("c", vec![])]) {
            Err(Error::CacheMiss(id)) => assert_eq!(id, "c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_perfect_oracle() {
        let insts = labeled(50);
        let mut oracle = SyntheticOracle::new(SyntheticOracleSpec::binary(1.0, 3)).unwrap();
        for (id, z) in oracle.score_batch(&insts).unwrap() {
            let inst = insts.iter().find(|i| i.id == id).unwrap();
            assert_eq!(z, f64::from(inst.label.unwrap()));
        }
    }

    #[test]
    fn synthetic_agreement_rate() {
        let n = 10_000;
        let insts = labeled(n);
        let mut oracle = SyntheticOracle::new(SyntheticOracleSpec::binary(0.75, 8)).unwrap();
        let scores = oracle.score_batch(&insts).unwrap();
        let agree = scores
            .iter()
            .zip(&insts)
            .filter(|((_, z), inst)| *z == f64::from(inst.label.unwrap()))
            .count() as f64
            / n as f64;
        assert!(
            (agree - 0.75).abs() <= 3.0 * (0.75f64 * 0.25 / n as f64).sqrt(),
            "{agree}"
        );
        // pure function of (seed, id)
        let reversed: Vec<Instance> = insts.iter().rev().cloned().collect();
        assert_eq!(oracle.score_batch(&reversed).unwrap(), scores);
    }

    #[test]
    fn synthetic_soft_mode_range_and_hidden_labels() {
        let spec = SyntheticOracleSpec {
            accuracy: 0.8,
            mode: SyntheticMode::Soft,
            sigma: 0.3,
            seed: 1,
        };
        let insts: Vec<Instance> = (0..200)
            .map(|i| Instance::new(format!("{i}"), vec![]))
            .collect();
        let hidden = insts.iter().map(|i| (i.id.clone(), 1u8)).collect();
        let mut oracle = SyntheticOracle::new(spec)
            .unwrap()
            .with_hidden_labels(hidden);
        let scores = oracle.score_batch(&insts).unwrap();
        assert!(scores.iter().all(|(_, z)| (0.0..=1.0).contains(z)));
        assert!(scores.iter().any(|(_, z)| *z != 0.0 && *z != 1.0));
        let mut bare = SyntheticOracle::new(spec).unwrap();
        assert!(bare.score_batch(&insts).is_err());
        assert!(SyntheticOracle::new(SyntheticOracleSpec::binary(0.4, 0)).is_err());
    }

    struct FakeTransport {
        calls: Arc<AtomicUsize>,
        fail_first: usize,
        reply: String,
    }

    impl Transport for FakeTransport {
        fn post_json(
            &self,
            _url: &str,
            body: &Value,
            _bearer: Option<&str>,
        ) -> std::result::Result<String, String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            assert!(body["prompt"].as_str().unwrap().starts_with("Is"));
            if n < self.fail_first {
                Err("503".into())
            } else {
                Ok(self.reply.clone())
            }
        }
    }

    fn http_config(dir: &Path) -> HttpOracleConfig {
        let mut cfg = HttpOracleConfig::new("http://unused", "m", "Is {id} in {stratum}?");
        cfg.cache_path = Some(dir.join("cache.csv"));
        cfg.backoff_ms = 1;
        cfg
    }

    #[test]
    fn http_cache_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let transport = FakeTransport {
            calls: calls.clone(),
            fail_first: 0,
            reply: r#"{"choices":[{"text":"0.7"}]}"#.into(),
        };
        let mut oracle =
            HttpOracle::with_transport(http_config(dir.path()), Box::new(transport)).unwrap();
        let insts: Vec<Instance> = (0..9)
            .map(|i| Instance::new(format!("{i}"), vec![]).with_stratum("bed"))
            .collect();
        let first = oracle.score_batch(&insts).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 9);
        let second = oracle.score_batch(&insts).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 9);
        assert_eq!(first, second);
        assert_eq!(
            OracleCache::load(dir.path().join("cache.csv"))
                .unwrap()
                .len(),
            9
        );
    }

    #[test]
    fn http_retries_then_fails() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let transport = FakeTransport {
            calls: calls.clone(),
            fail_first: 2,
            reply: "irrelevant".into(),
        };
        let mut cfg = http_config(dir.path());
        cfg.concurrency = 1;
        let mut oracle = HttpOracle::with_transport(cfg.clone(), Box::new(transport)).unwrap();
        let insts = vec![Instance::new("a", vec![]).with_stratum("s")];
        assert_eq!(
            oracle.score_batch(&insts).unwrap(),
            vec![("a".to_string(), 1.0)]
        );
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let always = FakeTransport {
            calls: Arc::new(AtomicUsize::new(0)),
            fail_first: usize::MAX,
            reply: String::new(),
        };
        cfg.cache_path = None;
        let mut oracle = HttpOracle::with_transport(cfg, Box::new(always)).unwrap();
        match oracle.score_batch(&insts) {
            Err(Error::OracleFailures { failures }) => assert_eq!(failures[0].0, "a"),
            other => panic!("{other:?}"),
        }
        assert_eq!(oracle.remote_calls(), 4);
    }

    #[test]
    fn http_missing_placeholder_is_error() {
        let calls = Arc::new(AtomicUsize::new(0));
        let transport = FakeTransport {
            calls,
            fail_first: 0,
            reply: "0".into(),
        };
        let cfg = HttpOracleConfig::new("http://unused", "m", "Is {query}?");
        let mut oracle = HttpOracle::with_transport(cfg, Box::new(transport)).unwrap();
        assert!(matches!(
            oracle.score_batch(&[Instance::new("a", vec![])]),
            Err(Error::MissingPlaceholder(_))
        ));
    }
}
