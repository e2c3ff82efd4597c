//! The annotation record and its constituent value types.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::media::ImageRef;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SingleUser,
    Wizard,
    Observer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::SingleUser => "single_user",
            Role::Wizard => "wizard",
            Role::Observer => "observer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_user" | "single-user" => Ok(Role::SingleUser),
            "wizard" => Ok(Role::Wizard),
            "observer" => Ok(Role::Observer),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

const BUILTIN_KINDS: [&str; 7] = ["screenshot", "focus", "correct", "incorrect", "counter", "voice", "note"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AnnotationKind {
    Screenshot,
    Focus,
    Correct,
    Incorrect,
    Counter,
    Voice,
    Note,
    Custom(String),
}

impl AnnotationKind {
    /// Builds a custom kind, rejecting empty names and names that shadow a
    /// built-in kind.
    pub fn custom(name: impl Into<String>) -> Result<Self, String> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err("custom kind name is empty".into());
        }
        if BUILTIN_KINDS.contains(&name.to_ascii_lowercase().as_str()) {
            return Err(format!("custom kind `{name}` shadows a built-in kind"));
        }
        Ok(AnnotationKind::Custom(name))
    }

    pub fn label(&self) -> &str {
        match self {
            AnnotationKind::Screenshot => "screenshot",
            AnnotationKind::Focus => "focus",
            AnnotationKind::Correct => "correct",
            AnnotationKind::Incorrect => "incorrect",
            AnnotationKind::Counter => "counter",
            AnnotationKind::Voice => "voice",
            AnnotationKind::Note => "note",
            AnnotationKind::Custom(name) => name,
        }
    }

    pub fn accepts(&self, payload: &AnnotationPayload) -> bool {
        use AnnotationKind as K;
        use AnnotationPayload as P;
        matches!(
            (self, payload),
            (K::Screenshot | K::Focus, P::Image(_))
                | (K::Counter, P::Counter { .. })
                | (K::Voice, P::Transcript { .. })
                | (K::Correct | K::Incorrect | K::Note | K::Custom(_), P::Empty | P::Image(_))
        )
    }
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationKind::Custom(name) => write!(f, "custom:{name}"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for AnnotationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "screenshot" => AnnotationKind::Screenshot,
            "focus" => AnnotationKind::Focus,
            "correct" => AnnotationKind::Correct,
            "incorrect" => AnnotationKind::Incorrect,
            "counter" => AnnotationKind::Counter,
            "voice" => AnnotationKind::Voice,
            "note" => AnnotationKind::Note,
            other => match other.strip_prefix("custom:") {
                Some(name) => AnnotationKind::custom(name)?,
                None => return Err(format!("unknown annotation kind `{other}`")),
            },
        })
    }
}

impl From<AnnotationKind> for String {
    fn from(k: AnnotationKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for AnnotationKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Author {
    pub role: Role,
    pub instance: String,
}

impl Author {
    pub fn new(role: Role, instance: impl Into<String>) -> Self {
        Author { role, instance: instance.into() }
    }
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.role, self.instance)
    }
}

impl FromStr for Author {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (role, instance) = s.split_once(':').ok_or_else(|| format!("author `{s}` lacks role prefix"))?;
        if instance.is_empty() {
            return Err(format!("author `{s}` has empty instance id"));
        }
        Ok(Author { role: role.parse()?, instance: instance.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnnotationPayload {
    Empty,
    Image(ImageRef),
    Counter { value: u64 },
    Transcript { text: String, start_ms: i64, end_ms: i64 },
}

impl AnnotationPayload {
    /// `data` column form: `img:<ref>`, `count:<n>`, `text:<start>-<end>:<text>`, or empty.
    pub fn to_data_field(&self) -> String {
        match self {
            AnnotationPayload::Empty => String::new(),
            AnnotationPayload::Image(r) => format!("img:{r}"),
            AnnotationPayload::Counter { value } => format!("count:{value}"),
            AnnotationPayload::Transcript { text, start_ms, end_ms } => format!("text:{start_ms}-{end_ms}:{text}"),
        }
    }

    pub fn from_data_field(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Ok(AnnotationPayload::Empty);
        }
        let (tag, rest) = s.split_once(':').ok_or_else(|| format!("data `{s}` lacks a kind prefix"))?;
        match tag {
            "img" => rest.parse().map(AnnotationPayload::Image).map_err(|e| e.to_string()),
            "count" => rest
                .parse::<u64>()
                .ok()
                .filter(|v| *v >= 1 && rest == v.to_string())
                .map(|value| AnnotationPayload::Counter { value })
                .ok_or_else(|| format!("bad counter value `{rest}`")),
            "text" => {
                let (span, text) = rest.split_once(':').ok_or_else(|| format!("transcript `{rest}` lacks span"))?;
                let (a, b) = parse_span(span).ok_or_else(|| format!("bad transcript span `{span}`"))?;
                Ok(AnnotationPayload::Transcript { text: text.to_string(), start_ms: a, end_ms: b })
            }
            other => Err(format!("unknown data prefix `{other}`")),
        }
    }

    pub fn image(&self) -> Option<&ImageRef> {
        match self {
            AnnotationPayload::Image(r) => Some(r),
            _ => None,
        }
    }
}

// `-` separates the span ends; starts are non-negative, so the first `-`
// after position 0 is the separator.
fn parse_span(span: &str) -> Option<(i64, i64)> {
    let idx = span.get(1..)?.find('-')? + 1;
    let (a, b) = (&span[..idx], &span[idx + 1..]);
    let (x, y) = (a.parse::<i64>().ok()?, b.parse::<i64>().ok()?);
    (x.to_string() == a && y.to_string() == b).then_some((x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Live,
    Auto,
    Retrospective,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: Uuid,
    pub run_id: Uuid,
    pub author: Author,
    pub kind: AnnotationKind,
    pub function_name: String,
    pub color: String,
    pub wall_time: Timestamp,
    pub media_offset: Option<i64>,
    pub payload: AnnotationPayload,
    #[serde(default)]
    pub note: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub time_substituted: bool,
}

impl Annotation {
    /// Canonical log order: wall time, then author instance id, then id.
    pub fn canonical_cmp(&self, other: &Annotation) -> Ordering {
        self.wall_time
            .cmp(&other.wall_time)
            .then_with(|| self.author.instance.cmp(&other.author.instance))
            .then_with(|| self.id.cmp(&other.id))
    }

    pub fn transcript_text(&self) -> Option<&str> {
        match &self.payload {
            AnnotationPayload::Transcript { text, .. } => Some(text),
            _ => None,
        }
    }
}

/// `#RRGGBB` (case-insensitive hex digits).
pub fn is_valid_color(s: &str) -> bool {
    s.len() == 7 && s.starts_with('#') && s[1..].bytes().all(|b| b.is_ascii_hexdigit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_text_forms() {
        for k in [
            AnnotationKind::Screenshot,
            AnnotationKind::Counter,
            AnnotationKind::custom("target_change").unwrap(),
        ] {
            assert_eq!(k.to_string().parse::<AnnotationKind>().unwrap(), k);
        }
        assert!(AnnotationKind::custom("").is_err());
        assert!(AnnotationKind::custom("Correct").is_err());
        assert!("dance".parse::<AnnotationKind>().is_err());
    }

    #[test]
    fn payload_matching() {
        let img = AnnotationPayload::Image(ImageRef { stream_id: "fpv".into(), seq: 1, region: None });
        assert!(AnnotationKind::Screenshot.accepts(&img));
        assert!(!AnnotationKind::Screenshot.accepts(&AnnotationPayload::Empty));
        assert!(AnnotationKind::Correct.accepts(&AnnotationPayload::Empty));
        assert!(AnnotationKind::Correct.accepts(&img));
        assert!(!AnnotationKind::Voice.accepts(&AnnotationPayload::Empty));
        assert!(!AnnotationKind::Counter.accepts(&img));
    }

    #[test]
    fn data_field_forms() {
        let cases = [
            AnnotationPayload::Empty,
            AnnotationPayload::Counter { value: 3 },
            AnnotationPayload::Transcript { text: "tap the top-left: now".into(), start_ms: 2000, end_ms: 3500 },
            AnnotationPayload::Image(ImageRef { stream_id: "tpv".into(), seq: 9, region: None }),
        ];
        for p in cases {
            assert_eq!(AnnotationPayload::from_data_field(&p.to_data_field()).unwrap(), p);
        }
        assert_eq!(AnnotationPayload::Counter { value: 3 }.to_data_field(), "count:3");
        assert!(AnnotationPayload::from_data_field("count:0").is_err());
        assert!(AnnotationPayload::from_data_field("count:03").is_err());
        assert!(AnnotationPayload::from_data_field("zip:1").is_err());
    }

    #[test]
    fn colors() {
        assert!(is_valid_color("#00AA00"));
        assert!(is_valid_color("#8b4513"));
        assert!(!is_valid_color("00AA00"));
        assert!(!is_valid_color("#00AA0"));
        assert!(!is_valid_color("#00AG00"));
    }

    #[test]
    fn author_text_form() {
        let a = Author::new(Role::Observer, "obs-1");
        assert_eq!(a.to_string(), "observer:obs-1");
        assert_eq!("observer:obs-1".parse::<Author>().unwrap(), a);
        assert!("observer:".parse::<Author>().is_err());
    }
}
