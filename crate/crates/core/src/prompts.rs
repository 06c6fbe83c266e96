//! Age-group taxonomy, rare-token registry and prompt rendering.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_CLASS_LABEL: &str = "person";
pub const DEFAULT_TOKENS: [&str; 4] = ["wzx", "sks", "ams", "ukj"];

/// Six categorical age buckets. Intervals are left-closed, right-open, so
/// boundary ages belong to the older group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgeGroup {
    Child,
    Teenager,
    YoungAdults,
    MiddleAged,
    Elderly,
    Old,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 6] = [
        AgeGroup::Child,
        AgeGroup::Teenager,
        AgeGroup::YoungAdults,
        AgeGroup::MiddleAged,
        AgeGroup::Elderly,
        AgeGroup::Old,
    ];

    /// Caption word; identical to the word used in prompts.
    pub fn word(self) -> &'static str {
        match self {
            AgeGroup::Child => "child",
            AgeGroup::Teenager => "teenager",
            AgeGroup::YoungAdults => "youngadults",
            AgeGroup::MiddleAged => "middleaged",
            AgeGroup::Elderly => "elderly",
            AgeGroup::Old => "old",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<AgeGroup> {
        AgeGroup::ALL.get(i).copied()
    }

    /// Year interval `[lo, hi)`; the last group is unbounded above.
    pub fn interval(self) -> (f64, f64) {
        match self {
            AgeGroup::Child => (0.0, 15.0),
            AgeGroup::Teenager => (15.0, 30.0),
            AgeGroup::YoungAdults => (30.0, 40.0),
            AgeGroup::MiddleAged => (40.0, 50.0),
            AgeGroup::Elderly => (50.0, 65.0),
            AgeGroup::Old => (65.0, f64::INFINITY),
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgeGroup::ALL
            .into_iter()
            .find(|g| g.word() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("`{s}` is not an age-group caption")))
    }
}

impl Serialize for AgeGroup {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.word())
    }
}

impl<'de> Deserialize<'de> for AgeGroup {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn render_caption(group: AgeGroup) -> &'static str {
    group.word()
}

pub fn bucket_age(age: f64) -> Result<AgeGroup> {
    if age.is_nan() || age < 0.0 {
        return Err(Error::Range(format!("age {age} must be >= 0")));
    }
    Ok(AgeGroup::ALL
        .into_iter()
        .find(|g| {
            let (lo, hi) = g.interval();
            age >= lo && age < hi
        })
        .unwrap_or(AgeGroup::Old))
}

/// The set of rare identifier tokens the model knows about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRegistry {
    tokens: BTreeSet<String>,
}

impl Default for TokenRegistry {
    fn default() -> Self {
        Self {
            tokens: DEFAULT_TOKENS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

impl TokenRegistry {
    pub fn empty() -> Self {
        Self {
            tokens: BTreeSet::new(),
        }
    }

    pub fn register(&mut self, token: &str) -> Result<()> {
        if token.is_empty() || !token.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()) {
            return Err(Error::InvalidConfig(format!(
                "rare token `{token}` must be a nonempty lowercase identifier"
            )));
        }
        if token.chars().count() > 3 {
            log::warn!("rare token `{token}` is longer than 3 characters");
        }
        self.tokens.insert(token.to_string());
        Ok(())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn check(&self, token: &str) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::UnknownToken(token.to_string()))
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    pub fn render_prompt(&self, spec: &PromptSpec) -> Result<String> {
        self.check(&spec.token)?;
        Ok(format!(
            "photo of a {} {} as {}",
            spec.token,
            spec.class_label,
            render_caption(spec.age_group)
        ))
    }

    /// Prompt used for the target subject's training images.
    pub fn subject_prompt(&self, token: &str, class_label: &str) -> Result<String> {
        self.check(token)?;
        Ok(format!("photo of a {token} {class_label}"))
    }
}

/// Class-conditioned prompt, optionally with an age caption.
pub fn class_prompt(class_label: &str, group: Option<AgeGroup>) -> String {
    match group {
        Some(g) => format!("photo of a {class_label} as {}", render_caption(g)),
        None => format!("photo of a {class_label}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub token: String,
    pub class_label: String,
    pub age_group: AgeGroup,
}

impl PromptSpec {
    pub fn new(token: impl Into<String>, class_label: impl Into<String>, age_group: AgeGroup) -> Result<Self> {
        let class_label = class_label.into();
        if class_label.trim().is_empty() {
            return Err(Error::InvalidConfig("class label must be nonempty".into()));
        }
        Ok(Self {
            token: token.into(),
            class_label,
            age_group,
        })
    }

    pub fn person(token: impl Into<String>, age_group: AgeGroup) -> Self {
        Self {
            token: token.into(),
            class_label: DEFAULT_CLASS_LABEL.to_string(),
            age_group,
        }
    }
}
