use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AnalyzerError;
use crate::session::{Annotation, AnnotationKind};

/// Anything that can select annotations from a log.
pub trait Selection {
    fn selects(&self, a: &Annotation) -> bool;

    fn apply(&self, log: &[Annotation]) -> Vec<Annotation> {
        log.iter().filter(|a| self.selects(a)).cloned().collect()
    }
}

/// Empty sets and absent fields place no constraint; present fields combine
/// conjunctively.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFilter {
    #[serde(default)]
    pub kinds: BTreeSet<AnnotationKind>,
    /// `role:instance` or a bare instance id.
    #[serde(default)]
    pub authors: BTreeSet<String>,
    /// Inclusive media-offset range in ms.
    #[serde(default)]
    pub time_range: Option<(i64, i64)>,
    /// Case-insensitive substring over notes and transcript text.
    #[serde(default)]
    pub text_query: Option<String>,
}

impl AnnotationFilter {
    pub fn kinds(kinds: impl IntoIterator<Item = AnnotationKind>) -> Self {
        AnnotationFilter { kinds: kinds.into_iter().collect(), ..Default::default() }
    }

    pub fn text(q: &str) -> Self {
        AnnotationFilter { text_query: Some(q.to_string()), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty() && self.authors.is_empty() && self.time_range.is_none() && self.text_query.is_none()
    }

    pub fn validate(&self) -> Result<(), AnalyzerError> {
        match self.time_range {
            Some((a, b)) if a > b => Err(AnalyzerError::InvalidFilter(format!("time range start {a} after end {b}"))),
            _ => Ok(()),
        }
    }

    pub fn and(&self, other: &AnnotationFilter) -> Conjunction {
        Conjunction(vec![self.clone(), other.clone()])
    }
}

impl Selection for AnnotationFilter {
    fn selects(&self, a: &Annotation) -> bool {
        if !self.kinds.is_empty() && !self.kinds.contains(&a.kind) {
            return false;
        }
        if !self.authors.is_empty() && !self.authors.contains(&a.author.to_string()) && !self.authors.contains(&a.author.instance) {
            return false;
        }
        if let Some((lo, hi)) = self.time_range {
            match a.media_offset {
                Some(o) if (lo..=hi).contains(&o) => {}
                _ => return false,
            }
        }
        if let Some(q) = &self.text_query {
            let q = q.to_lowercase();
            let hit = |s: &str| s.to_lowercase().contains(&q);
            if !hit(&a.note) && !a.transcript_text().is_some_and(hit) {
                return false;
            }
        }
        true
    }
}

/// All member filters must select.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conjunction(pub Vec<AnnotationFilter>);

impl Conjunction {
    pub fn and(mut self, f: &AnnotationFilter) -> Self {
        self.0.push(f.clone());
        self
    }
}

impl Selection for Conjunction {
    fn selects(&self, a: &Annotation) -> bool {
        self.0.iter().all(|f| f.selects(a))
    }
}
