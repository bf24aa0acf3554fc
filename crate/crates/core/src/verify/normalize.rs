//! Regular-expression cleanup of generated instructions.

use std::collections::HashSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::model::{CleanupEdit, TERMINAL_PUNCTUATION};

pub const MAX_PASSES: usize = 5;

const BUILTIN_RULES: &str = include_str!("../../assets/cleanup_rules.toml");

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rules file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rules file: {0}")]
    Parse(String),
    #[error("rule {rule_id}: {reason}")]
    Invalid { rule_id: String, reason: String },
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("no fixed point after {MAX_PASSES} passes; last rules to fire: {last_rules:?}")]
pub struct NonConvergent {
    pub last_rules: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleEntry {
    rule_id: String,
    pattern: String,
    replacement: String,
    description: String,
}

#[derive(Debug, Deserialize)]
struct RulesFile {
    #[allow(dead_code)]
    version: Option<u32>,
    #[serde(rename = "rule", default)]
    rules: Vec<RuleEntry>,
}

#[derive(Debug, Clone)]
pub struct CleanupRule {
    pub rule_id: String,
    pub pattern: Regex,
    pub replacement: String,
    pub description: String,
}

#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<CleanupRule>,
    version: String,
}

impl RuleSet {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_RULES).expect("bundled cleanup rules are valid")
    }

    pub fn load(path: &Path) -> Result<Self, RuleError> {
        let text = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let file: RulesFile = toml::from_str(text).map_err(|e| RuleError::Parse(e.to_string()))?;
        let mut seen = HashSet::new();
        let mut rules = Vec::with_capacity(file.rules.len());
        for entry in file.rules {
            let invalid = |reason: String| RuleError::Invalid {
                rule_id: entry.rule_id.clone(),
                reason,
            };
            if entry.rule_id.trim().is_empty() {
                return Err(invalid("empty rule_id".into()));
            }
            if !seen.insert(entry.rule_id.clone()) {
                return Err(invalid("duplicate rule_id".into()));
            }
            let pattern = Regex::new(&entry.pattern).map_err(|e| invalid(e.to_string()))?;
            if pattern.is_match("") {
                return Err(invalid("pattern matches the empty string".into()));
            }
            if entry.replacement.chars().any(char::is_control) {
                return Err(invalid("replacement contains control characters".into()));
            }
            rules.push(CleanupRule {
                rule_id: entry.rule_id,
                pattern,
                replacement: entry.replacement,
                description: entry.description,
            });
        }
        Ok(Self {
            rules,
            version: hex::encode(&Sha256::digest(text.as_bytes())[..8]),
        })
    }

    pub fn rules(&self) -> &[CleanupRule] {
        &self.rules
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub text: String,
    pub edits: Vec<CleanupEdit>,
    pub passes: usize,
}

fn apply_regex(text: &str, re: &Regex, replacement: &str, rule_id: &str, edits: &mut Vec<CleanupEdit>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for caps in re.captures_iter(text) {
        let m = caps.get(0).expect("group 0 always participates");
        let mut after = String::new();
        caps.expand(replacement, &mut after);
        out.push_str(&text[last..m.start()]);
        out.push_str(&after);
        last = m.end();
        if m.as_str() != after {
            edits.push(CleanupEdit {
                rule_id: rule_id.to_string(),
                before: m.as_str().to_string(),
                after,
            });
        }
    }
    out.push_str(&text[last..]);
    out
}

static WHITESPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s{2,}|[^\S ]").unwrap());
static EDGES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[\s,;:.!?]+|\s+$").unwrap());

fn pass(text: &str, rules: &RuleSet, edits: &mut Vec<CleanupEdit>) -> String {
    let mut s = text.to_string();
    for rule in &rules.rules {
        s = apply_regex(&s, &rule.pattern, &rule.replacement, &rule.rule_id, edits);
    }
    s = apply_regex(&s, &WHITESPACE, " ", "builtin.whitespace", edits);
    s = apply_regex(&s, &EDGES, "", "builtin.trim", edits);
    if let Some(first) = s.chars().next().filter(|c| c.is_lowercase()) {
        let upper: String = first.to_uppercase().collect();
        edits.push(CleanupEdit {
            rule_id: "builtin.capitalize".into(),
            before: first.to_string(),
            after: upper.clone(),
        });
        s = format!("{upper}{}", &s[first.len_utf8()..]);
    }
    if !s.is_empty() && !s.ends_with(TERMINAL_PUNCTUATION) {
        let tail = s.trim_end_matches([',', ';', ':']).len();
        let before = s[tail..].to_string();
        s.truncate(tail);
        s.push('.');
        edits.push(CleanupEdit {
            rule_id: "builtin.terminal".into(),
            before,
            after: ".".into(),
        });
    }
    s
}

/// Applies every rule once, in order, then the built-in whitespace,
/// capitalization and terminal-punctuation steps; repeats until a pass
/// changes nothing. An empty result means nothing but debris was present.
pub fn normalize(text: &str, rules: &RuleSet) -> Result<Normalized, NonConvergent> {
    let mut edits = Vec::new();
    let mut current = text.to_string();
    for passes in 1..=MAX_PASSES {
        let mut pass_edits = Vec::new();
        let next = pass(&current, rules, &mut pass_edits);
        if next == current {
            return Ok(Normalized {
                text: current,
                edits,
                passes,
            });
        }
        edits.extend(pass_edits);
        current = next;
    }
    let mut probe = Vec::new();
    pass(&current, rules, &mut probe);
    Err(NonConvergent {
        last_rules: probe.into_iter().map(|e| e.rule_id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_run_example() {
        let n = normalize("go straight\u{0000}\u{0000} into the living room", &RuleSet::builtin()).unwrap();
        assert_eq!(n.text, "Go straight into the living room.");
        let ids: Vec<&str> = n.edits.iter().map(|e| e.rule_id.as_str()).collect();
        assert_eq!(ids, ["control.chars", "builtin.whitespace", "builtin.capitalize", "builtin.terminal"]);
        assert_eq!(n.edits[0].before, "\u{0000}\u{0000}");
    }

    #[test]
    fn clean_text_is_untouched() {
        let text = "Start in the kitchen, go straight, then stop in the bedroom.";
        let n = normalize(text, &RuleSet::builtin()).unwrap();
        assert_eq!(n.text, text);
        assert!(n.edits.is_empty());
        assert_eq!(n.passes, 1);
    }

    #[test]
    fn placeholder_fragment_removed() {
        let n = normalize("Start in the kitchen, {{triplets}} go straight, then stop in the bedroom.", &RuleSet::builtin())
            .unwrap();
        assert_eq!(n.text, "Start in the kitchen, go straight, then stop in the bedroom.");
        assert_eq!(n.edits[0].rule_id, "fragment.placeholder");
        assert_eq!(n.edits[0].before, "{{triplets}}");
    }

    #[test]
    fn every_fragment_kind_is_removed() {
        let rules = RuleSet::builtin();
        let base = "Start in the kitchen, turn left, then stop in the bedroom.";
        for frag in crate::gateway::TEMPLATE_FRAGMENTS {
            for at in [0, 13, 21, base.len()] {
                let noisy = format!("{} {frag} {}", &base[..at], &base[at..]);
                assert_eq!(normalize(&noisy, &rules).unwrap().text, base, "{noisy:?}");
            }
        }
    }

    #[test]
    fn invalid_rules_are_refused() {
        let cases = [
            "[[rule]]\nrule_id='a'\npattern='('\nreplacement=''\ndescription=''",
            "[[rule]]\nrule_id='a'\npattern='x*'\nreplacement=''\ndescription=''",
            "[[rule]]\nrule_id='a'\npattern='x'\nreplacement=\"\\u0007\"\ndescription=''",
            "[[rule]]\nrule_id='a'\npattern='x'\nreplacement=''\ndescription=''\n[[rule]]\nrule_id='a'\npattern='y'\nreplacement=''\ndescription=''",
        ];
        for c in cases {
            assert!(matches!(RuleSet::parse(c), Err(RuleError::Invalid { .. })), "{c}");
        }
    }

    #[test]
    fn growing_rule_does_not_converge() {
        let rules = RuleSet::parse("[[rule]]\nrule_id='grow'\npattern='a+'\nreplacement='${0}a'\ndescription='bad'").unwrap();
        let err = normalize("a.", &rules).unwrap_err();
        assert!(err.last_rules.contains(&"grow".to_string()));
    }

    #[test]
    fn only_debris_becomes_empty() {
        assert_eq!(normalize("{{triplets}} @@@ <|im_end|>", &RuleSet::builtin()).unwrap().text, "");
    }
}
