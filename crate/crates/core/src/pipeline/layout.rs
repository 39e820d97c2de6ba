//! Fixed text layouts for both stages and answer parsing.

use std::sync::OnceLock;

use log::warn;
use regex::Regex;

use crate::corpus::Record;
use crate::text::Vocab;

pub fn option_letter(i: usize) -> char {
    char::from(b'A' + (i % 26) as u8)
}

/// `Question: {Q} Context: {C} Options: (A) … (B) …`, with the context
/// segment left out when empty.
pub fn rationale_input_text(record: &Record) -> String {
    let mut s = format!("Question: {}", record.question.trim());
    let context = record.context.trim();
    if !context.is_empty() {
        s.push_str(" Context: ");
        s.push_str(context);
    }
    s.push_str(" Options:");
    for (i, o) in record.options.iter().enumerate() {
        s.push_str(&format!(" ({}) {}", option_letter(i), o.trim()));
    }
    s
}

/// Rationale-stage input followed by ` Solution: ` and the rationale.
pub fn answer_input_text(record: &Record, rationale: &str) -> String {
    format!("{} Solution: {}", rationale_input_text(record), rationale)
}

pub fn answer_target(record: &Record) -> String {
    format!("The answer is ({}).", option_letter(record.answer_index))
}

/// Encodes `text`, keeping the first `max_len` tokens.
pub fn encode_truncated(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    if ids.len() > max_len {
        warn!("input of {} tokens truncated to {max_len}", ids.len());
        ids.truncate(max_len);
    }
    ids
}

pub fn build_rationale_input(record: &Record, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    encode_truncated(vocab, &rationale_input_text(record), max_len)
}

pub fn build_answer_input(
    record: &Record,
    rationale: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Vec<usize> {
    encode_truncated(vocab, &answer_input_text(record, rationale), max_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extracted {
    pub index: usize,
    /// false when neither a letter nor an option text was found
    pub parsed: bool,
}

/// Reads `(X)` first, then the first option whose text occurs in the
/// output, and finally falls back to option 0.
pub fn extract_answer(generated: &str, options: &[String]) -> Extracted {
    static LETTER: OnceLock<Regex> = OnceLock::new();
    let re = LETTER.get_or_init(|| Regex::new(r"\(\s*([A-Za-z])\s*\)").unwrap());
    for caps in re.captures_iter(generated) {
        let c = caps[1].chars().next().unwrap().to_ascii_uppercase();
        let index = (c as u8 - b'A') as usize;
        if index < options.len() {
            return Extracted {
                index,
                parsed: true,
            };
        }
    }
    let hay = generated.to_lowercase();
    for (index, o) in options.iter().enumerate() {
        let o = o.trim().to_lowercase();
        if !o.is_empty() && hay.contains(&o) {
            return Extracted {
                index,
                parsed: true,
            };
        }
    }
    Extracted {
        index: 0,
        parsed: false,
    }
}
