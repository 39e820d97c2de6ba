//! Word-level tokenizer and vocabulary shared by both stage models.
//!
//! Tokenization rules, fixed so that golden files stay stable:
//! * text is lowercased;
//! * a run of alphabetic characters is one token;
//! * every digit is its own token (`36` becomes `3`, `6`);
//! * every other non-whitespace character is its own token.
//!
//! Unknown words map to [`UNK`].

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<bos>", "<eos>"];

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphabetic() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.extend(std::iter::once(c.to_lowercase().collect()));
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn is_digit_token(t: &str) -> bool {
    t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
}

/// Joins tokens back into readable text. `tokenize(detokenize(t)) == t` for
/// any sequence of tokens produced by [`tokenize`].
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    const NO_SPACE_BEFORE: [&str; 10] = [".", ",", ";", ":", "?", "!", ")", "%", "°", "'"];
    const NO_SPACE_AFTER: [&str; 3] = ["(", "°", "'"];
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for t in tokens {
        let t = t.as_ref();
        if let Some(p) = prev {
            let glue = NO_SPACE_BEFORE.contains(&t)
                || NO_SPACE_AFTER.contains(&p)
                || (is_digit_token(p) && is_digit_token(t));
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from every token of `texts` plus the ten digits,
    /// sorted so the id assignment is independent of input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for d in 0..10 {
            words.insert(d.to_string());
        }
        for t in texts {
            words.extend(tokenize(t));
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !SPECIALS.contains(&w.as_str())),
            )
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Renders ids as text, dropping BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_words_digits_and_punctuation() {
        assert_eq!(
            tokenize("It is 36°C. The answer is (B)."),
            vec!["it", "is", "3", "6", "°", "c", ".", "the", "answer", "is", "(", "b", ")", "."]
        );
    }

    #[test]
    fn detokenize_reads_naturally() {
        let t = tokenize("The answer is (B). It is 36°C, not 25°F.");
        assert_eq!(detokenize(&t), "the answer is (b). it is 36°c, not 25°f.");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::build(["north pole"]);
        assert_eq!(v.encode("south pole"), vec![UNK, v.id("pole")]);
        assert_eq!(v.token(BOS), "<bos>");
    }

    #[test]
    fn vocab_ids_do_not_depend_on_text_order() {
        let a = Vocab::build(["b a", "c"]);
        let b = Vocab::build(["c", "a b"]);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn detokenize_round_trips(s in "[a-zA-Z0-9 .,;:?!()°'%-]{0,40}") {
            let t = tokenize(&s);
            prop_assert_eq!(tokenize(&detokenize(&t)), t);
        }
    }
}
