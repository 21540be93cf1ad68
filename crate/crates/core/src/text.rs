//! Text normalization and content-derived identifiers.
//!
//! Every identity in the crate (method ids, question ids, knowledge-node keys)
//! is a hash of normalized text, so independently built structures agree on
//! which items are "the same".

use sha2::{Digest, Sha256};

/// Lowercase and collapse every run of whitespace into a single space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// First 16 hex digits of the SHA-256 of `parts`, each part separated by a
/// unit-separator byte so that `("ab","c")` and `("a","bc")` differ.
pub(crate) fn digest_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Stable identifier of a question: `q-` followed by the hash of its normalized text.
pub fn question_id(question: &str) -> String {
    format!("q-{}", digest_hex(&[&normalize(question)]))
}

/// Stable key of a knowledge node label.
pub fn node_key(label: &str) -> String {
    format!("n-{}", digest_hex(&[&normalize(label)]))
}

/// Stable identifier of a method, derived from its normalized question and solution.
pub fn method_id(question: &str, solution: &str) -> String {
    format!(
        "m-{}",
        digest_hex(&[&normalize(question), &normalize(solution)])
    )
}

/// Split a model reply into list items: one per non-empty line, with common
/// bullet and enumeration markers removed.
pub fn parse_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(strip_marker)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    let line = line
        .strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .or_else(|| line.strip_prefix("• "))
        .unwrap_or(line);
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim();
        }
    }
    line.trim()
}

/// Substitute `{name}` placeholders. Unknown placeholders are left untouched.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
