// SPDX-License-Identifier: Apache-2.0

//! Removal of transient content before output comparison.

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::Response;

/// Upper bound on full passes over the rule list.
const MAX_PASSES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum NormalizationRule {
    StripHeader { name: String },
    MaskRegex { pattern: String, placeholder: String },
    IgnoreJsonField { path: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleError {
    #[error("invalid regex `{pattern}`: {message}")]
    BadRegex { pattern: String, message: String },
    #[error("placeholder `{placeholder}` matches its own pattern `{pattern}`")]
    SelfMatchingPlaceholder { pattern: String, placeholder: String },
    #[error("empty json field path")]
    EmptyPath,
}

#[derive(Debug, Clone)]
enum Compiled {
    StripHeader(String),
    Mask(Regex, String),
    IgnoreJson(Vec<String>),
}

/// Compiled rule list. Applies rules in order, repeating the whole list
/// until the body stops changing, which makes normalization idempotent.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    rules: Vec<Compiled>,
}

impl Normalizer {
    pub fn new(rules: &[NormalizationRule]) -> Result<Self, RuleError> {
        let rules = rules
            .iter()
            .map(|r| match r {
                NormalizationRule::StripHeader { name } => Ok(Compiled::StripHeader(name.to_ascii_lowercase())),
                NormalizationRule::MaskRegex { pattern, placeholder } => {
                    let re = Regex::new(pattern).map_err(|e| RuleError::BadRegex {
                        pattern: pattern.clone(),
                        message: e.to_string(),
                    })?;
                    if re.is_match(placeholder) {
                        return Err(RuleError::SelfMatchingPlaceholder {
                            pattern: pattern.clone(),
                            placeholder: placeholder.clone(),
                        });
                    }
                    Ok(Compiled::Mask(re, placeholder.clone()))
                }
                NormalizationRule::IgnoreJsonField { path } => {
                    let parts: Vec<String> = path.split('.').filter(|p| !p.is_empty()).map(str::to_string).collect();
                    if parts.is_empty() {
                        return Err(RuleError::EmptyPath);
                    }
                    Ok(Compiled::IgnoreJson(parts))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Normalizer { rules })
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn normalize(&self, body: &[u8]) -> Vec<u8> {
        if self.rules.iter().all(|r| matches!(r, Compiled::StripHeader(_))) {
            return body.to_vec();
        }
        let mut history: Vec<Vec<u8>> = vec![body.to_vec()];
        for _ in 0..MAX_PASSES {
            let current = history.last().expect("non-empty");
            let next = self.pass(current);
            if &next == current {
                break;
            }
            // Rules that undo each other cycle; every state on the cycle
            // maps to its smallest member, so repeating stays put.
            if let Some(start) = history.iter().position(|h| *h == next) {
                return smallest_from(history, start);
            }
            history.push(next);
        }
        history.pop().expect("non-empty")
    }

    fn pass(&self, body: &[u8]) -> Vec<u8> {
        let mut out = body.to_vec();
        for rule in &self.rules {
            out = match rule {
                Compiled::StripHeader(_) => out,
                Compiled::Mask(re, placeholder) => match std::str::from_utf8(&out) {
                    Ok(text) => re
                        .replace_all(text, regex::NoExpand(placeholder))
                        .into_owned()
                        .into_bytes(),
                    Err(_) => out,
                },
                Compiled::IgnoreJson(path) => match serde_json::from_slice::<serde_json::Value>(&out) {
                    Ok(mut json) => {
                        remove_path(&mut json, path);
                        serde_json::to_vec(&json).unwrap_or(out)
                    }
                    Err(_) => out,
                },
            };
        }
        out
    }

    /// Drops headers named by strip-header rules.
    pub fn strip_headers(&self, response: &Response) -> Response {
        let mut r = response.clone();
        r.headers.retain(|(k, _)| {
            !self
                .rules
                .iter()
                .any(|rule| matches!(rule, Compiled::StripHeader(n) if k.eq_ignore_ascii_case(n)))
        });
        r
    }
}

fn smallest_from(mut states: Vec<Vec<u8>>, start: usize) -> Vec<u8> {
    let i = (start..states.len()).min_by(|&a, &b| states[a].cmp(&states[b])).expect("cycle is non-empty");
    states.swap_remove(i)
}

fn remove_path(json: &mut serde_json::Value, path: &[String]) {
    let Some((last, parents)) = path.split_last() else {
        return;
    };
    let mut node = json;
    for p in parents {
        match node.get_mut(p) {
            Some(child) => node = child,
            None => return,
        }
    }
    if let Some(obj) = node.as_object_mut() {
        obj.remove(last);
    }
}

/// Applies `rules` to `body`. Rules must already be valid.
pub fn normalize(body: &[u8], rules: &[NormalizationRule]) -> Result<Vec<u8>, RuleError> {
    Ok(Normalizer::new(rules)?.normalize(body))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Comparison {
    Match,
    Mismatch { detail: String },
}

/// Status must match and normalized bodies must be byte-equal. Headers are
/// not compared.
pub fn compare(production: &Response, patched: &Response, normalizer: &Normalizer) -> Comparison {
    if production.status != patched.status {
        return Comparison::Mismatch {
            detail: format!("status {} != {}", production.status, patched.status),
        };
    }
    let a = normalizer.normalize(&production.body);
    let b = normalizer.normalize(&patched.body);
    if a == b {
        Comparison::Match
    } else {
        Comparison::Mismatch {
            detail: format!(
                "body {:?} != {:?}",
                truncate(&String::from_utf8_lossy(&a)),
                truncate(&String::from_utf8_lossy(&b))
            ),
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 120;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        s.chars().take(MAX).collect::<String>() + "…"
    }
}
