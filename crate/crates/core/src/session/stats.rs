use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::annotation::{Annotation, AnnotationKind};

/// Top-bar statistics for a run.
///
/// `accuracy` is `correct / (correct + incorrect)` and is `None` when no
/// correctness annotations exist. `pinned` counts annotations per pinned
/// function name; unpinned functions are not tracked here.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LiveStats {
    pub correct: u64,
    pub incorrect: u64,
    pub counter_total: u64,
    pub accuracy: Option<f64>,
    pub pinned: BTreeMap<String, u64>,
}

impl LiveStats {
    pub fn empty(pinned: &[String]) -> Self {
        LiveStats { pinned: pinned.iter().map(|n| (n.clone(), 0)).collect(), ..Default::default() }
    }

    /// Recount from scratch.
    pub fn from_log<'a>(log: impl IntoIterator<Item = &'a Annotation>, pinned: &[String]) -> Self {
        let mut s = LiveStats::empty(pinned);
        for a in log {
            s.add(a);
        }
        s
    }

    pub(crate) fn add(&mut self, a: &Annotation) {
        self.bump(&a.kind, &a.function_name, true);
    }

    pub(crate) fn remove(&mut self, a: &Annotation) {
        self.bump(&a.kind, &a.function_name, false);
    }

    fn bump(&mut self, kind: &AnnotationKind, function: &str, up: bool) {
        let step = |n: &mut u64| if up { *n += 1 } else { *n = n.saturating_sub(1) };
        match kind {
            AnnotationKind::Correct => step(&mut self.correct),
            AnnotationKind::Incorrect => step(&mut self.incorrect),
            AnnotationKind::Counter => step(&mut self.counter_total),
            _ => {}
        }
        if let Some(n) = self.pinned.get_mut(function) {
            step(n);
        }
        self.accuracy = self.accuracy_ratio().map(|(c, t)| c as f64 / t as f64);
    }

    /// `(correct, correct + incorrect)` when the denominator is non-zero.
    pub fn accuracy_ratio(&self) -> Option<(u64, u64)> {
        let total = self.correct + self.incorrect;
        (total > 0).then_some((self.correct, total))
    }

    /// Integer percent, rounded half up; `None` when undefined.
    pub fn accuracy_percent(&self) -> Option<u64> {
        self.accuracy_ratio().map(|(c, t)| (200 * c + t) / (2 * t))
    }

    /// Four-decimal rendering for tabular exports; empty when undefined.
    pub fn accuracy_decimal(&self) -> String {
        match self.accuracy_ratio() {
            None => String::new(),
            Some((c, t)) => {
                // round half up at 4 places on the exact rational
                let scaled = (20_000 * c + t) / (2 * t);
                format!("{}.{:04}", scaled / 10_000, scaled % 10_000)
            }
        }
    }

    /// Display form: `90%`, or U+2014 when nothing has been scored.
    pub fn accuracy_display(&self) -> String {
        match self.accuracy_percent() {
            Some(p) => format!("{p}%"),
            None => "\u{2014}".to_string(),
        }
    }
}
