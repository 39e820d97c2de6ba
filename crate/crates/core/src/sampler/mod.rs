//! Rule-based soft negatives: copies of the gold rationale with one small,
//! meaning-changing edit.
//!
//! Five edit families are supported. Each one is tried on the explanation
//! first and then on the lecture; when neither has a usable site the slot
//! is filled with a negation edit instead. Every (record, epoch, method)
//! triple draws from its own random stream, derived by hashing, so the
//! output does not depend on generation order.

mod lexicon;
pub mod validate;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lexicon::VerbForm;
pub use lexicon::{LexiconFile, Lexicons};

use crate::corpus::{join_rationale, Record};
use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Negation,
    Number,
    Orientation,
    Unit,
    #[serde(rename = "option")]
    OptionText,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Negation,
        Method::Number,
        Method::Orientation,
        Method::Unit,
        Method::OptionText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Negation => "negation",
            Method::Number => "number",
            Method::Orientation => "orientation",
            Method::Unit => "unit",
            Method::OptionText => "option",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transform {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Lecture,
    Explanation,
}

/// How many sites one negative modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mods {
    Count(usize),
    All,
}

impl Default for Mods {
    fn default() -> Self {
        Mods::Count(1)
    }
}

impl FromStr for Mods {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Mods::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Mods::Count(n)),
            _ => Err(Error::Config(format!(
                "mods must be a positive count or \"all\", got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Mods {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mods::Count(n) => write!(f, "{n}"),
            Mods::All => f.write_str("all"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub seed: u64,
    /// reuse the epoch-0 draw every epoch
    pub fixed_negatives: bool,
    pub mods: Mods,
    pub disabled: BTreeSet<Method>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            fixed_negatives: false,
            mods: Mods::default(),
            disabled: BTreeSet::new(),
        }
    }
}

impl SamplerConfig {
    pub fn enabled(&self) -> impl Iterator<Item = Method> + '_ {
        Method::ALL
            .into_iter()
            .filter(|m| !self.disabled.contains(m))
    }
}

/// One soft negative. `text` is the whole mutated rationale and `span`
/// holds character offsets of the modified region within it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftNegative {
    pub method: Method,
    pub text: String,
    pub span: (usize, usize),
    pub source_field: Field,
}

/// A single-text edit result with character offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mutation {
    pub text: String,
    pub span: (usize, usize),
}

#[derive(Clone, Debug)]
enum SiteKind {
    Digits,
    Orientation,
    Unit {
        category: usize,
        unit: usize,
        plural: usize,
        exact: bool,
    },
    OptionText,
    NegInsert,
    NegRemove,
    DoSupport {
        form: VerbForm,
        base: String,
    },
}

/// A modifiable byte range of one text.
#[derive(Clone, Debug)]
struct Site {
    start: usize,
    end: usize,
    kind: SiteKind,
}

struct Edit {
    start: usize,
    end: usize,
    text: String,
}

struct Word {
    start: usize,
    end: usize,
    lower: String,
    sentence: usize,
    contracted: bool,
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '’'
}

fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut sentence = 0;
    let mut start: Option<usize> = None;
    let mut prev: Option<char> = None;
    let mut before_word: Option<char> = None;
    let mut push = |s: usize, e: usize, before: Option<char>, after: Option<char>, sentence| {
        out.push(Word {
            start: s,
            end: e,
            lower: text[s..e].to_lowercase(),
            sentence,
            contracted: before.is_some_and(is_apostrophe) || after.is_some_and(is_apostrophe),
        });
    };
    for (i, c) in text.char_indices() {
        if c.is_alphabetic() {
            if start.is_none() {
                start = Some(i);
                before_word = prev;
            }
        } else {
            if let Some(s) = start.take() {
                push(s, i, before_word, Some(c), sentence);
            }
            if matches!(c, '.' | '!' | '?') {
                sentence += 1;
            }
        }
        prev = Some(c);
    }
    if let Some(s) = start {
        push(s, text.len(), before_word, None, sentence);
    }
    out
}

fn digit_sites(text: &str) -> Vec<Site> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let s = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            out.push(Site {
                start: s,
                end: i,
                kind: SiteKind::Digits,
            });
        } else {
            i += 1;
        }
    }
    out
}

fn orientation_sites(text: &str, lx: &Lexicons) -> Vec<Site> {
    words(text)
        .into_iter()
        .filter(|w| !w.contracted && lx.opposite.contains_key(&w.lower))
        .map(|w| Site {
            start: w.start,
            end: w.end,
            kind: SiteKind::Orientation,
        })
        .collect()
}

fn alpha_run_end(text: &str, from: usize) -> usize {
    text[from..]
        .char_indices()
        .find(|(_, c)| !c.is_alphabetic())
        .map_or(text.len(), |(i, _)| from + i)
}

/// Units count only right after a number, optionally separated by one
/// space or hyphen.
fn unit_sites(text: &str, lx: &Lexicons) -> Vec<Site> {
    let mut out = Vec::new();
    for run in digit_sites(text) {
        let mut starts = vec![run.end];
        if matches!(text.as_bytes().get(run.end), Some(b' ' | b'-')) {
            starts.push(run.end + 1);
        }
        'pos: for p in starts {
            if p >= text.len() {
                continue;
            }
            let rest = &text[p..];
            let word_end = alpha_run_end(text, p);
            for (key, form) in &lx.unit_forms {
                let end = if form.exact {
                    if !rest.starts_with(key.as_str()) {
                        continue;
                    }
                    let e = p + key.len();
                    if text[e..].chars().next().is_some_and(char::is_alphabetic) {
                        continue;
                    }
                    e
                } else {
                    if word_end == p || text[p..word_end].to_lowercase() != *key {
                        continue;
                    }
                    word_end
                };
                out.push(Site {
                    start: p,
                    end,
                    kind: SiteKind::Unit {
                        category: form.category,
                        unit: form.unit,
                        plural: form.plural,
                        exact: form.exact,
                    },
                });
                break 'pos;
            }
        }
    }
    out
}

fn option_alternatives(options: &[String], answer: usize) -> Vec<&str> {
    let Some(correct) = options.get(answer) else {
        return Vec::new();
    };
    let key = correct.trim().to_lowercase();
    let mut seen = BTreeSet::new();
    options
        .iter()
        .enumerate()
        .filter(|&(i, o)| i != answer && !o.trim().is_empty() && o.trim().to_lowercase() != key)
        .map(|(_, o)| o.trim())
        .filter(|o| seen.insert(o.to_lowercase()))
        .collect()
}

fn option_sites(text: &str, options: &[String], answer: usize) -> Vec<Site> {
    if option_alternatives(options, answer).is_empty() {
        return Vec::new();
    }
    let needle = options[answer].trim().to_ascii_lowercase();
    if needle.is_empty() {
        return Vec::new();
    }
    let hay = text.to_ascii_lowercase();
    let boundary = |c: Option<char>| !c.is_some_and(char::is_alphanumeric);
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(off) = hay[from..].find(&needle) {
        let s = from + off;
        let e = s + needle.len();
        if boundary(text[..s].chars().next_back()) && boundary(text[e..].chars().next()) {
            out.push(Site {
                start: s,
                end: e,
                kind: SiteKind::OptionText,
            });
            from = e;
        } else {
            from = s + text[s..].chars().next().map_or(1, char::len_utf8);
        }
    }
    out
}

/// Toggle sites for negation. With `first_per_sentence` each sentence
/// contributes its first auxiliary, or failing that its first listed verb.
fn negation_sites(text: &str, lx: &Lexicons, first_per_sentence: bool) -> Vec<Site> {
    let ws = words(text);
    let mut found: Vec<(usize, bool, Site)> = Vec::new();
    for (i, w) in ws.iter().enumerate() {
        if w.contracted {
            continue;
        }
        if lx.is_aux(&w.lower) {
            let next = ws.get(i + 1);
            let site = match next {
                Some(n)
                    if n.lower == "not"
                        && !n.contracted
                        && text[w.end..n.start].chars().all(char::is_whitespace) =>
                {
                    Site {
                        start: w.end,
                        end: n.end,
                        kind: SiteKind::NegRemove,
                    }
                }
                _ => Site {
                    start: w.end,
                    end: w.end,
                    kind: SiteKind::NegInsert,
                },
            };
            found.push((w.sentence, true, site));
        } else if let Some((form, base)) = lx.verbs.get(&w.lower) {
            let prev = i.checked_sub(1).map(|j| ws[j].lower.as_str());
            if prev.is_some_and(|p| p == "to" || p == "not" || lx.is_aux(p)) {
                continue;
            }
            found.push((
                w.sentence,
                false,
                Site {
                    start: w.start,
                    end: w.end,
                    kind: SiteKind::DoSupport {
                        form: *form,
                        base: base.clone(),
                    },
                },
            ));
        }
    }
    if !first_per_sentence {
        return found.into_iter().map(|(_, _, s)| s).collect();
    }
    let mut out: Vec<Site> = Vec::new();
    let mut sentences: Vec<usize> = found.iter().map(|f| f.0).collect();
    sentences.dedup();
    for s in sentences {
        let in_sentence = || found.iter().filter(move |f| f.0 == s);
        let pick = in_sentence()
            .find(|f| f.1)
            .or_else(|| in_sentence().next())
            .expect("sentence has a site");
        out.push(pick.2.clone());
    }
    out
}

fn capitalized(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn match_case(template: &str, word: &str) -> String {
    let letters: Vec<char> = template.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() > 1 && letters.iter().all(|c| c.is_uppercase()) {
        word.to_uppercase()
    } else if capitalized(template) {
        capitalize(word)
    } else {
        word.to_string()
    }
}

fn random_digits<R: Rng + ?Sized>(original: &str, rng: &mut R) -> String {
    let n = original.len();
    loop {
        let s: String = (0..n)
            .map(|i| {
                let lo = if i == 0 && n > 1 { 1 } else { 0 };
                char::from(b'0' + rng.random_range(lo..10u8))
            })
            .collect();
        if s != original {
            return s;
        }
    }
}

struct Ctx<'a> {
    lx: &'a Lexicons,
    options: &'a [String],
    answer: usize,
}

fn realize<R: Rng + ?Sized>(text: &str, site: &Site, ctx: &Ctx, rng: &mut R) -> Edit {
    let matched = &text[site.start..site.end];
    let replacement = match &site.kind {
        SiteKind::Digits => random_digits(matched, rng),
        SiteKind::Orientation => {
            let other = &ctx.lx.opposite[&matched.to_lowercase()];
            match_case(matched, other)
        }
        SiteKind::Unit {
            category,
            unit,
            plural,
            exact,
        } => {
            let n = ctx.lx.categories[*category].len();
            let mut pick = rng.random_range(0..n - 1);
            if pick >= *unit {
                pick += 1;
            }
            let s = ctx.lx.unit_text(*category, pick, *plural);
            if *exact {
                s.to_string()
            } else {
                match_case(matched, s)
            }
        }
        SiteKind::OptionText => {
            let alts = option_alternatives(ctx.options, ctx.answer);
            let pick = alts[rng.random_range(0..alts.len())];
            if capitalized(matched) {
                capitalize(pick)
            } else {
                pick.to_string()
            }
        }
        SiteKind::NegInsert => " not".to_string(),
        SiteKind::NegRemove => String::new(),
        SiteKind::DoSupport { form, base } => {
            let aux = match form {
                VerbForm::Base => "do not ",
                VerbForm::ThirdPerson => "does not ",
            };
            let verb = match form {
                VerbForm::Base => matched.to_lowercase(),
                VerbForm::ThirdPerson => base.clone(),
            };
            let phrase = format!("{aux}{verb}");
            if capitalized(matched) {
                capitalize(&phrase)
            } else {
                phrase
            }
        }
    };
    Edit {
        start: site.start,
        end: site.end,
        text: replacement,
    }
}

/// Applies sorted, disjoint edits; returns the new text and the byte span
/// enclosing every edit in it.
fn apply(text: &str, edits: &[Edit]) -> (String, (usize, usize)) {
    let mut out = String::with_capacity(text.len() + 16);
    let mut pos = 0;
    let mut span = (usize::MAX, 0);
    for e in edits {
        out.push_str(&text[pos..e.start]);
        span.0 = span.0.min(out.len());
        out.push_str(&e.text);
        span.1 = out.len();
        pos = e.end;
    }
    out.push_str(&text[pos..]);
    (out, span)
}

fn choose<R: Rng + ?Sized>(mut sites: Vec<Site>, mods: Mods, rng: &mut R) -> Vec<Site> {
    match mods {
        Mods::All => sites,
        Mods::Count(n) if sites.len() <= n => sites,
        Mods::Count(n) => {
            let mut picked = index::sample(rng, sites.len(), n).into_vec();
            picked.sort_unstable();
            picked
                .iter()
                .map(|&i| std::mem::replace(&mut sites[i], dummy()))
                .collect()
        }
    }
}

fn dummy() -> Site {
    Site {
        start: 0,
        end: 0,
        kind: SiteKind::NegInsert,
    }
}

fn mutate<R: Rng + ?Sized>(text: &str, sites: Vec<Site>, ctx: &Ctx, rng: &mut R) -> Mutation {
    let edits: Vec<Edit> = sites.iter().map(|s| realize(text, s, ctx, rng)).collect();
    let (new, (bs, be)) = apply(text, &edits);
    let span = (new[..bs].chars().count(), new[..be].chars().count());
    Mutation { text: new, span }
}

fn single<R: Rng + ?Sized>(
    text: &str,
    sites: Vec<Site>,
    ctx: &Ctx,
    rng: &mut R,
) -> Option<Mutation> {
    if sites.is_empty() {
        return None;
    }
    let chosen = choose(sites, Mods::Count(1), rng);
    Some(mutate(text, chosen, ctx, rng))
}

/// Toggles the first negatable clause. `None` when nothing is toggleable.
pub fn transform_negation(text: &str, lexicons: &Lexicons) -> Option<Mutation> {
    let mut sites = negation_sites(text, lexicons, true);
    sites.truncate(1);
    if sites.is_empty() {
        return None;
    }
    let ctx = Ctx {
        lx: lexicons,
        options: &[],
        answer: 0,
    };
    Some(mutate(text, sites, &ctx, &mut ChaCha8Rng::seed_from_u64(0)))
}

/// Replaces one digit run with a different run of the same length.
pub fn transform_number<R: Rng + ?Sized>(text: &str, rng: &mut R) -> Option<Mutation> {
    let lx = Lexicons::builtin();
    let ctx = Ctx {
        lx: &lx,
        options: &[],
        answer: 0,
    };
    single(text, digit_sites(text), &ctx, rng)
}

pub fn transform_orientation<R: Rng + ?Sized>(
    text: &str,
    lexicons: &Lexicons,
    rng: &mut R,
) -> Option<Mutation> {
    let ctx = Ctx {
        lx: lexicons,
        options: &[],
        answer: 0,
    };
    single(text, orientation_sites(text, lexicons), &ctx, rng)
}

pub fn transform_unit<R: Rng + ?Sized>(
    text: &str,
    lexicons: &Lexicons,
    rng: &mut R,
) -> Option<Mutation> {
    let ctx = Ctx {
        lx: lexicons,
        options: &[],
        answer: 0,
    };
    single(text, unit_sites(text, lexicons), &ctx, rng)
}

pub fn transform_option<R: Rng + ?Sized>(
    text: &str,
    options: &[String],
    correct_index: usize,
    rng: &mut R,
) -> Option<Mutation> {
    if options.len() < 2 {
        return None;
    }
    let lx = Lexicons::builtin();
    let ctx = Ctx {
        lx: &lx,
        options,
        answer: correct_index,
    };
    single(text, option_sites(text, options, correct_index), &ctx, rng)
}

/// Independent random stream for one (record, epoch, method) triple.
pub fn stream_rng(seed: u64, record_id: &str, epoch: usize, method: Method) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(record_id.as_bytes());
    h.update([0]);
    h.update((epoch as u64).to_le_bytes());
    h.update(method.name().as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Lecture and explanation as seen by the sampler: an empty rationale is
/// replaced by the placeholder explanation "Not".
pub fn sampler_fields(record: &Record) -> (String, String) {
    if record.lecture.trim().is_empty() && record.explanation.trim().is_empty() {
        (
            String::new(),
            crate::contrastive::EMPTY_RATIONALE.to_string(),
        )
    } else {
        (record.lecture.clone(), record.explanation.clone())
    }
}

/// The rationale every negative of `record` is a mutation of.
pub fn base_rationale(record: &Record) -> String {
    let (l, e) = sampler_fields(record);
    join_rationale(&l, &e)
}

/// Number of sites `method` could modify in `text`.
pub fn count_sites(
    method: Method,
    text: &str,
    options: &[String],
    answer_index: usize,
    lexicons: &Lexicons,
) -> usize {
    let ctx = Ctx {
        lx: lexicons,
        options,
        answer: answer_index,
    };
    sites_for(method, text, &ctx).len()
}

fn sites_for(method: Method, text: &str, ctx: &Ctx) -> Vec<Site> {
    match method {
        Method::Negation => negation_sites(text, ctx.lx, true),
        Method::Number => digit_sites(text),
        Method::Orientation => orientation_sites(text, ctx.lx),
        Method::Unit => unit_sites(text, ctx.lx),
        Method::OptionText => option_sites(text, ctx.options, ctx.answer),
    }
}

/// Up to one negative per enabled method for `record` at `epoch`,
/// with identical texts collapsed.
pub fn sample_soft_negatives(
    record: &Record,
    lexicons: &Lexicons,
    config: &SamplerConfig,
    epoch: usize,
) -> Vec<SoftNegative> {
    let (lecture, explanation) = sampler_fields(record);
    let ctx = Ctx {
        lx: lexicons,
        options: &record.options,
        answer: record.answer_index,
    };
    let epoch = if config.fixed_negatives { 0 } else { epoch };
    let fields = [
        (Field::Explanation, explanation.as_str()),
        (Field::Lecture, lecture.as_str()),
    ];
    let mut out: Vec<SoftNegative> = Vec::new();
    for method in config.enabled() {
        let mut rng = stream_rng(config.seed, &record.id, epoch, method);
        let mut result = None;
        for (field, text) in fields {
            let sites = sites_for(method, text, &ctx);
            if sites.is_empty() {
                continue;
            }
            let chosen = if method == Method::Negation {
                let mut s = sites;
                if let Mods::Count(n) = config.mods {
                    s.truncate(n);
                }
                s
            } else {
                choose(sites, config.mods, &mut rng)
            };
            result = Some((method, field, mutate(text, chosen, &ctx, &mut rng)));
            break;
        }
        if result.is_none() && method != Method::Negation {
            for (field, text) in fields {
                let sites = negation_sites(text, lexicons, false);
                if sites.is_empty() {
                    continue;
                }
                let chosen = choose(sites, config.mods, &mut rng);
                result = Some((
                    Method::Negation,
                    field,
                    mutate(text, chosen, &ctx, &mut rng),
                ));
                break;
            }
        }
        let (method, field, m) = result.unwrap_or_else(|| {
            let (field, text) = if explanation.is_empty() {
                fields[1]
            } else {
                fields[0]
            };
            (Method::Negation, field, last_resort(text))
        });
        let (text, span) = match field {
            Field::Explanation if !lecture.is_empty() => {
                let shift = lecture.chars().count() + 1;
                (
                    join_rationale(&lecture, &m.text),
                    (m.span.0 + shift, m.span.1 + shift),
                )
            }
            Field::Explanation => (m.text, m.span),
            Field::Lecture => (join_rationale(&m.text, &explanation), m.span),
        };
        if out.iter().any(|n| n.text == text) {
            continue;
        }
        out.push(SoftNegative {
            method,
            text,
            span,
            source_field: field,
        });
    }
    out
}

/// Inserts "not" after the first word, or prefixes "Not " when there is
/// no word at all. Total, but not always grammatical.
fn last_resort(text: &str) -> Mutation {
    match words(text).first() {
        Some(w) => {
            let mut s = String::with_capacity(text.len() + 4);
            s.push_str(&text[..w.end]);
            s.push_str(" not");
            s.push_str(&text[w.end..]);
            let at = text[..w.end].chars().count();
            Mutation {
                text: s,
                span: (at, at + 4),
            }
        }
        None => Mutation {
            text: format!("Not {text}"),
            span: (0, 4),
        },
    }
}

/// One line of the negatives JSONL export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRow {
    pub record_id: String,
    pub method: Method,
    pub text: String,
    pub span: (usize, usize),
    pub source_field: Field,
}

impl NegativeRow {
    pub fn new(record_id: &str, n: &SoftNegative) -> Self {
        Self {
            record_id: record_id.to_string(),
            method: n.method,
            text: n.text.clone(),
            span: n.span,
            source_field: n.source_field,
        }
    }
}
