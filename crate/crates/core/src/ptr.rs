//! Prompt token reweighting.
//!
//! Each prompt token is assigned one of five structure/detail categories.
//! At every step the attention paid to that token's column is multiplied by
//! a factor interpolated geometrically between the category's start and end
//! multipliers, after which each attention row is renormalized.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    StrongStructure,
    WeakStructure,
    Neutral,
    WeakDetail,
    StrongDetail,
}

impl PromptCategory {
    pub const ALL: [PromptCategory; 5] = [
        PromptCategory::StrongStructure,
        PromptCategory::WeakStructure,
        PromptCategory::Neutral,
        PromptCategory::WeakDetail,
        PromptCategory::StrongDetail,
    ];
}

/// `(start, end)` multiplier pair per category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointTable {
    pub strong_structure: (f64, f64),
    pub weak_structure: (f64, f64),
    pub weak_detail: (f64, f64),
    pub strong_detail: (f64, f64),
}

impl EndpointTable {
    /// Default endpoints for reweighting strength `alpha`:
    /// strong structure `(a, 1/a)`, weak structure `(a/2, 2/a)`,
    /// weak detail `(2/a, a/2)`, strong detail `(1/a, a)`.
    pub fn for_alpha(alpha: f64) -> Self {
        Self {
            strong_structure: (alpha, 1.0 / alpha),
            weak_structure: (alpha / 2.0, 2.0 / alpha),
            weak_detail: (2.0 / alpha, alpha / 2.0),
            strong_detail: (1.0 / alpha, alpha),
        }
    }

    pub fn endpoints(&self, c: PromptCategory) -> (f64, f64) {
        match c {
            PromptCategory::StrongStructure => self.strong_structure,
            PromptCategory::WeakStructure => self.weak_structure,
            PromptCategory::Neutral => (1.0, 1.0),
            PromptCategory::WeakDetail => self.weak_detail,
            PromptCategory::StrongDetail => self.strong_detail,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in PromptCategory::ALL {
            let (a, b) = self.endpoints(c);
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Config(format!(
                    "multipliers for {c:?} must be positive, got ({a}, {b})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptWeightPlan {
    pub tokens: Vec<String>,
    pub categories: Vec<PromptCategory>,
    pub alpha: f64,
    pub endpoints: EndpointTable,
}

impl PromptWeightPlan {
    pub fn new(
        tokens: Vec<String>,
        categories: Vec<PromptCategory>,
        alpha: f64,
        endpoints: Option<EndpointTable>,
    ) -> Result<Self> {
        if tokens.len() != categories.len() {
            return Err(Error::Shape(format!(
                "{} prompt tokens but {} categories",
                tokens.len(),
                categories.len()
            )));
        }
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha_p must exceed 1, got {alpha}")));
        }
        let endpoints = endpoints.unwrap_or_else(|| EndpointTable::for_alpha(alpha));
        endpoints.validate()?;
        Ok(Self {
            tokens,
            categories,
            alpha,
            endpoints,
        })
    }

    pub fn category(&self, token_index: usize) -> PromptCategory {
        self.categories
            .get(token_index)
            .copied()
            .unwrap_or(PromptCategory::Neutral)
    }

    pub fn is_neutral(&self) -> bool {
        self.categories
            .iter()
            .all(|&c| c == PromptCategory::Neutral)
    }
}

/// Whitespace tokenization.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_owned).collect()
}

/// Multiplier for one prompt token at `step` of `total` steps:
/// `start^(1-s) * end^s` with `s = step / (total - 1)`.
pub fn multiplier_at(
    plan: &PromptWeightPlan,
    token_index: usize,
    step: usize,
    total: usize,
) -> f64 {
    let category = plan.category(token_index);
    if category == PromptCategory::Neutral {
        return 1.0;
    }
    let (start, end) = plan.endpoints.endpoints(category);
    let s = if total <= 1 {
        0.0
    } else {
        (step as f64 / (total - 1) as f64).clamp(0.0, 1.0)
    };
    if s == 0.0 {
        return start;
    }
    if s == 1.0 {
        return end;
    }
    start.powf(1.0 - s) * end.powf(s)
}

/// Scales the prompt columns of a row-stochastic attention map by their
/// multipliers and renormalizes every row. `prompt_columns[j]` is the
/// column holding prompt token `j`.
pub fn reweight_attention(
    attn: &Matrix,
    plan: &PromptWeightPlan,
    prompt_columns: &[usize],
    step: usize,
    total: usize,
) -> Result<Matrix> {
    let mut out = attn.clone();
    reweight_attention_in_place(&mut out, plan, prompt_columns, step, total)?;
    Ok(out)
}

pub fn reweight_attention_in_place(
    attn: &mut Matrix,
    plan: &PromptWeightPlan,
    prompt_columns: &[usize],
    step: usize,
    total: usize,
) -> Result<()> {
    if let Some(&c) = prompt_columns.iter().find(|&&c| c >= attn.cols()) {
        return Err(Error::Shape(format!(
            "prompt column {c} outside a {}-column attention map",
            attn.cols()
        )));
    }
    let scales: Vec<(usize, f64)> = prompt_columns
        .iter()
        .enumerate()
        .map(|(j, &c)| (c, multiplier_at(plan, j, step, total)))
        .filter(|&(_, m)| m != 1.0)
        .collect();
    if scales.is_empty() {
        return Ok(());
    }
    for r in 0..attn.rows() {
        let row = attn.row_mut(r);
        for &(c, m) in &scales {
            row[c] *= m;
        }
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "attention row {r} sums to {sum} after reweighting"
            )));
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

/// Result of categorizing one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorization {
    pub categories: Vec<PromptCategory>,
    pub warnings: Vec<String>,
}

/// Source of per-token categories.
pub trait CategoryProvider: Send + Sync {
    /// Stable identity used as a cache key.
    fn identity(&self) -> String;

    fn categorize(&self, prompt: &str, tokens: &[String]) -> Categorization;
}

/// Categorizes `tokens`, defaulting anything unknown to neutral.
pub fn categorize(
    prompt: &str,
    tokens: &[String],
    provider: &dyn CategoryProvider,
) -> Categorization {
    if tokens.is_empty() {
        return Categorization {
            categories: Vec::new(),
            warnings: Vec::new(),
        };
    }
    provider.categorize(prompt, tokens)
}

/// JSON document shared by annotation files and the remote categorizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub prompt: String,
    pub tokens: Vec<String>,
    pub categories: Vec<PromptCategory>,
}

/// Request body for the remote categorizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorizeRequest {
    pub prompt: String,
    pub tokens: Vec<String>,
}

fn neutral_fallback(tokens: &[String], reason: String) -> Categorization {
    Categorization {
        categories: vec![PromptCategory::Neutral; tokens.len()],
        warnings: vec![reason],
    }
}

/// Looks tokens up in annotation files keyed by token text.
#[derive(Debug, Clone)]
pub struct AnnotationProvider {
    source: String,
    by_token: HashMap<String, PromptCategory>,
}

impl AnnotationProvider {
    pub fn from_annotations(source: impl Into<String>, docs: &[Annotation]) -> Result<Self> {
        let mut by_token = HashMap::new();
        for doc in docs {
            if doc.tokens.len() != doc.categories.len() {
                return Err(Error::Config(format!(
                    "annotation for {:?} has {} tokens and {} categories",
                    doc.prompt,
                    doc.tokens.len(),
                    doc.categories.len()
                )));
            }
            for (t, c) in doc.tokens.iter().zip(&doc.categories) {
                by_token.insert(t.clone(), *c);
            }
        }
        Ok(Self {
            source: source.into(),
            by_token,
        })
    }

    /// Reads a single annotation document or an array of them.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let docs: Vec<Annotation> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        Self::from_annotations(format!("file:{}", path.display()), &docs)
    }
}

impl CategoryProvider for AnnotationProvider {
    fn identity(&self) -> String {
        self.source.clone()
    }

    fn categorize(&self, _prompt: &str, tokens: &[String]) -> Categorization {
        let mut warnings = Vec::new();
        let categories = tokens
            .iter()
            .map(|t| {
                self.by_token.get(t).copied().unwrap_or_else(|| {
                    warnings.push(format!("no annotation for token {t:?}; using neutral"));
                    PromptCategory::Neutral
                })
            })
            .collect();
        Categorization {
            categories,
            warnings,
        }
    }
}

/// Client for `POST {base_url}/categorize`.
///
/// Any transport error, non-200 status, or malformed body degrades to an
/// all-neutral categorization with a diagnostic. Responses are cached per
/// `(prompt, base_url)`.
#[derive(Debug)]
pub struct RemoteCategorizer {
    base_url: String,
    #[cfg_attr(not(feature = "remote"), allow(dead_code))]
    timeout: Duration,
    cache: Mutex<HashMap<(String, String), Categorization>>,
}

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(10);

impl RemoteCategorizer {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            timeout,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/categorize", self.base_url)
    }

    /// Parses and checks a response body against the request.
    pub fn parse_response(
        body: &str,
        tokens: &[String],
    ) -> std::result::Result<Vec<PromptCategory>, String> {
        let doc: Annotation = serde_json::from_str(body)
            .map_err(|e| format!("malformed categorizer response: {e}"))?;
        if doc.tokens != tokens || doc.categories.len() != tokens.len() {
            return Err(format!(
                "categorizer answered for {} tokens, asked about {}",
                doc.categories.len(),
                tokens.len()
            ));
        }
        Ok(doc.categories)
    }

    #[cfg(feature = "remote")]
    fn fetch(
        &self,
        prompt: &str,
        tokens: &[String],
    ) -> std::result::Result<Vec<PromptCategory>, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let req = CategorizeRequest {
            prompt: prompt.to_owned(),
            tokens: tokens.to_vec(),
        };
        let mut resp = agent
            .post(&self.endpoint())
            .send_json(&req)
            .map_err(|e| format!("categorizer request failed: {e}"))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(format!("categorizer returned HTTP {status}"));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| format!("categorizer body unreadable: {e}"))?;
        Self::parse_response(&body, tokens)
    }

    #[cfg(not(feature = "remote"))]
    fn fetch(
        &self,
        _prompt: &str,
        _tokens: &[String],
    ) -> std::result::Result<Vec<PromptCategory>, String> {
        Err("built without the `remote` feature".into())
    }
}

impl CategoryProvider for RemoteCategorizer {
    fn identity(&self) -> String {
        format!("remote:{}", self.base_url)
    }

    fn categorize(&self, prompt: &str, tokens: &[String]) -> Categorization {
        let key = (prompt.to_owned(), self.identity());
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return hit.clone();
        }
        let result = match self.fetch(prompt, tokens) {
            Ok(categories) => Categorization {
                categories,
                warnings: Vec::new(),
            },
            Err(reason) => {
                neutral_fallback(tokens, format!("{reason}; using neutral for all tokens"))
            }
        };
        // failures are not cached so a later call can recover
        if result.warnings.is_empty() {
            self.cache
                .lock()
                .expect("cache lock")
                .insert(key, result.clone());
        }
        result
    }
}

/// Where prompt categories come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    File {
        path: PathBuf,
    },
    Remote {
        url: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

fn default_timeout_secs() -> f64 {
    DEFAULT_REMOTE_TIMEOUT.as_secs_f64()
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Box<dyn CategoryProvider>> {
        match self {
            ProviderSpec::File { path } => Ok(Box::new(AnnotationProvider::load(path)?)),
            ProviderSpec::Remote { url, timeout_secs } => {
                if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                    return Err(Error::Config("remote timeout must be positive".into()));
                }
                Ok(Box::new(RemoteCategorizer::new(
                    url.clone(),
                    Duration::from_secs_f64(*timeout_secs),
                )))
            }
        }
    }
}
