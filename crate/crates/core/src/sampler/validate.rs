//! Contract checks for emitted negatives.

use std::fmt;

use super::{base_rationale, Lexicons, Method, SoftNegative};
use crate::corpus::Record;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Identity,
    SpanOutOfBounds { span: (usize, usize), len: usize },
    MultiSite,
    Number(String),
    Orientation(String),
    Unit(String),
    OptionText(String),
    Negation(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Identity => f.write_str("negative equals the original"),
            Violation::SpanOutOfBounds { span, len } => {
                write!(f, "span {span:?} outside text of {len} chars")
            }
            Violation::MultiSite => f.write_str("text differs outside the span"),
            Violation::Number(s) => write!(f, "number: {s}"),
            Violation::Orientation(s) => write!(f, "orientation: {s}"),
            Violation::Unit(s) => write!(f, "unit: {s}"),
            Violation::OptionText(s) => write!(f, "option: {s}"),
            Violation::Negation(s) => write!(f, "negation: {s}"),
        }
    }
}

/// The original and replacement segments of a single-site edit.
pub fn diff_segments(original: &str, neg: &SoftNegative) -> Result<(String, String), Violation> {
    let new: Vec<char> = neg.text.chars().collect();
    let old: Vec<char> = original.chars().collect();
    let (s, e) = neg.span;
    if s > e || e > new.len() {
        return Err(Violation::SpanOutOfBounds {
            span: neg.span,
            len: new.len(),
        });
    }
    let suffix = new.len() - e;
    if s + suffix > old.len() || new[..s] != old[..s] || new[e..] != old[old.len() - suffix..] {
        return Err(Violation::MultiSite);
    }
    Ok((
        old[s..old.len() - suffix].iter().collect(),
        new[s..e].iter().collect(),
    ))
}

fn count_not(s: &str) -> usize {
    s.split(|c: char| !c.is_alphabetic())
        .filter(|w| w.eq_ignore_ascii_case("not"))
        .count()
}

/// All violations of `neg` against `record`. With `strict` the replaced
/// segment is also checked against the method's own rules, which assumes
/// one modification per negative.
pub fn check_negative(
    record: &Record,
    neg: &SoftNegative,
    lexicons: &Lexicons,
    strict: bool,
) -> Vec<Violation> {
    let original = base_rationale(record);
    let mut out = Vec::new();
    if neg.text == original {
        out.push(Violation::Identity);
    }
    let (old, new) = match diff_segments(&original, neg) {
        Ok(pair) => pair,
        Err(v) => {
            out.push(v);
            return out;
        }
    };
    if !strict {
        return out;
    }
    let chars: Vec<char> = neg.text.chars().collect();
    match neg.method {
        Method::Number => {
            let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
            let maximal = !(neg.span.0 > 0 && chars[neg.span.0 - 1].is_ascii_digit())
                && !chars.get(neg.span.1).is_some_and(char::is_ascii_digit);
            if !digits(&old) || !digits(&new) || old.len() != new.len() || !maximal {
                out.push(Violation::Number(format!("{old:?} -> {new:?}")));
            } else if old == new || (new.len() > 1 && new.starts_with('0')) {
                out.push(Violation::Number(format!(
                    "bad replacement {old:?} -> {new:?}"
                )));
            }
        }
        Method::Orientation => {
            if lexicons.opposite(&old) != Some(new.to_lowercase().as_str()) {
                out.push(Violation::Orientation(format!("{old:?} -> {new:?}")));
            }
        }
        Method::Unit => match (lexicons.unit_of(&old), lexicons.unit_of(&new)) {
            (Some((c1, u1, p1)), Some((c2, u2, p2))) if c1 == c2 && u1 != u2 && p1 == p2 => {}
            _ => out.push(Violation::Unit(format!("{old:?} -> {new:?}"))),
        },
        Method::OptionText => {
            let correct = record.options[record.answer_index].trim();
            let other = record
                .options
                .iter()
                .enumerate()
                .any(|(i, o)| i != record.answer_index && o.trim().eq_ignore_ascii_case(&new));
            if !old.eq_ignore_ascii_case(correct) || !other {
                out.push(Violation::OptionText(format!("{old:?} -> {new:?}")));
            }
        }
        Method::Negation => {
            if count_not(&old).abs_diff(count_not(&new)) != 1 {
                out.push(Violation::Negation(format!("{old:?} -> {new:?}")));
            }
        }
    }
    out
}
