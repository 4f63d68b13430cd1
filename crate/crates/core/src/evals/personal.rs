//! Pattern rules that flag personal or sensitive data in text.
//!
//! The bundled rules are plain regular expressions (plus a Luhn check for card
//! numbers). They only match surface patterns, so expect false positives.

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    /// Highest severity bucket.
    Sensitive,
    Personal,
}

#[derive(Debug, Clone)]
pub struct PersonalDataRule {
    pub name: String,
    pub severity: Severity,
    pattern: Regex,
    validator: Option<fn(&str) -> bool>,
}

impl PersonalDataRule {
    pub fn new(name: impl Into<String>, severity: Severity, pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            name: name.into(),
            severity,
            pattern: Regex::new(pattern)?,
            validator: None,
        })
    }

    /// Adds a predicate every regex match must also satisfy.
    pub fn with_validator(mut self, f: fn(&str) -> bool) -> Self {
        self.validator = Some(f);
        self
    }

    /// Number of non-overlapping matches in `text`.
    pub fn count_matches(&self, text: &str) -> usize {
        self.pattern
            .find_iter(text)
            .filter(|m| self.validator.is_none_or(|ok| ok(m.as_str())))
            .count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityTally {
    pub sensitive: usize,
    pub personal: usize,
}

impl SeverityTally {
    pub fn is_empty(&self) -> bool {
        self.sensitive == 0 && self.personal == 0
    }
}

/// Per-severity match counts of `rules` over `text`.
pub fn classify_personal(text: &str, rules: &[PersonalDataRule]) -> SeverityTally {
    let mut tally = SeverityTally::default();
    for rule in rules {
        let n = rule.count_matches(text);
        match rule.severity {
            Severity::Sensitive => tally.sensitive += n,
            Severity::Personal => tally.personal += n,
        }
    }
    tally
}

fn luhn_valid(s: &str) -> bool {
    let digits: Vec<u32> = s.chars().filter_map(|c| c.to_digit(10)).collect();
    if !(13..=19).contains(&digits.len()) {
        return false;
    }
    let sum: u32 = digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let dd = d * 2;
                if dd > 9 { dd - 9 } else { dd }
            } else {
                d
            }
        })
        .sum();
    sum.is_multiple_of(10)
}

/// The default rule set: email, phone and IPv4 as personal; US social
/// security and payment card numbers as sensitive.
pub fn bundled_rules() -> Vec<PersonalDataRule> {
    vec![
        PersonalDataRule::new(
            "email",
            Severity::Personal,
            r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)+\b",
        ),
        PersonalDataRule::new(
            "phone_number",
            Severity::Personal,
            r"(?:\+\d{1,3}[ .-]?)?\(?\b\d{3}\)?[ .-]\d{3}[ .-]\d{4}\b",
        ),
        PersonalDataRule::new(
            "ipv4_address",
            Severity::Personal,
            r"\b(?:(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)\.){3}(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)\b",
        ),
        PersonalDataRule::new("us_ssn", Severity::Sensitive, r"\b\d{3}-\d{2}-\d{4}\b"),
        PersonalDataRule::new(
            "payment_card",
            Severity::Sensitive,
            r"\b(?:\d[ -]?){12,18}\d\b",
        )
        .map(|r| r.with_validator(luhn_valid)),
    ]
    .into_iter()
    .map(|r| r.expect("bundled patterns compile"))
    .collect()
}
