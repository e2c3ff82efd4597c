use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::annotation::{is_valid_color, AnnotationKind};

/// Maps a keyboard key to an annotation function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShortcutBinding {
    pub key: String,
    pub kind: AnnotationKind,
    pub name: String,
    pub color: String,
    #[serde(default)]
    pub pinned: bool,
}

impl ShortcutBinding {
    pub fn new(key: &str, kind: AnnotationKind, name: &str, color: &str) -> Self {
        ShortcutBinding { key: key.into(), kind, name: name.into(), color: color.into(), pinned: false }
    }

    pub fn pinned(mut self) -> Self {
        self.pinned = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BindingError {
    #[error("key `{0}` is bound more than once")]
    DuplicateKey(String),
    #[error("function name `{0}` is used more than once")]
    DuplicateName(String),
    #[error("`{0}` is not a #RRGGBB color")]
    InvalidColor(String),
    #[error("`{0}` is not a single printable key")]
    InvalidKey(String),
    #[error("binding for key `{0}` has an empty name")]
    EmptyName(String),
}

fn is_single_printable(key: &str) -> bool {
    let mut chars = key.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if !c.is_control() && !c.is_whitespace())
}

/// Checks that keys and names are unique and colors well-formed. Reports the
/// first problem in binding order.
pub fn validate_bindings(bindings: &[ShortcutBinding]) -> Result<(), BindingError> {
    let mut keys = HashSet::new();
    let mut names = HashSet::new();
    for b in bindings {
        if !is_single_printable(&b.key) {
            return Err(BindingError::InvalidKey(b.key.clone()));
        }
        if !keys.insert(b.key.as_str()) {
            return Err(BindingError::DuplicateKey(b.key.clone()));
        }
        if b.name.trim().is_empty() {
            return Err(BindingError::EmptyName(b.key.clone()));
        }
        if !names.insert(b.name.as_str()) {
            return Err(BindingError::DuplicateName(b.name.clone()));
        }
        if !is_valid_color(&b.color) {
            return Err(BindingError::InvalidColor(b.color.clone()));
        }
    }
    Ok(())
}
