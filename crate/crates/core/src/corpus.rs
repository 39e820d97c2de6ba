//! QA records, the JSONL loader and a small synthetic corpus generator.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VisionFeatures;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One multiple-choice question with its rationale and optional image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub context: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default)]
    pub lecture: String,
    #[serde(default)]
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision: Option<VisionFeatures>,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub context_type: String,
    #[serde(default)]
    pub grade: String,
    pub split: Split,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        if self.options.is_empty() {
            return Err(Error::Schema {
                id: self.id.clone(),
                message: "no options".into(),
            });
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::Schema {
                id: self.id.clone(),
                message: format!(
                    "answer_index {} out of range for {} options",
                    self.answer_index,
                    self.options.len()
                ),
            });
        }
        Ok(())
    }

    /// Gold rationale: lecture followed by explanation.
    pub fn rationale(&self) -> String {
        join_rationale(&self.lecture, &self.explanation)
    }

    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }
}

/// Joins the two rationale parts with one space, skipping empty parts.
pub fn join_rationale(lecture: &str, explanation: &str) -> String {
    match (lecture.is_empty(), explanation.is_empty()) {
        (true, _) => explanation.to_string(),
        (false, true) => lecture.to_string(),
        (false, false) => format!("{lecture} {explanation}"),
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; ids must be unique.
pub fn load_corpus(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Schema {
                id: record.id,
                message: format!("duplicate id on line {}", i + 1),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn split_of(records: &[Record], split: Split) -> Vec<&Record> {
    records.iter().filter(|r| r.split == split).collect()
}

/// Width of synthetic patch features.
pub const SYNTH_VISION_DIM: usize = 32;
const SYNTH_PATCHES: usize = 4;
const TEMPLATES: usize = 5;

struct Draft {
    question: String,
    context: String,
    options: Vec<String>,
    answer_index: usize,
    lecture: &'static str,
    explanation: String,
    subject: &'static str,
    facts: [usize; 2],
}

fn magnets(rng: &mut ChaCha8Rng) -> Draft {
    let poles = ["north", "south"];
    let (a, b) = (rng.random_range(0..2), rng.random_range(0..2));
    let d = rng.random_range(2..10);
    let answer_index = usize::from(a == b);
    let options = vec!["attract".to_string(), "repel".to_string()];
    Draft {
        question: "Will these magnets attract or repel each other?".into(),
        context: format!("The magnets are {d} centimeters apart."),
        explanation: format!(
            "The {} pole is {d} centimeters from the {} pole, so these magnets will {}.",
            poles[a], poles[b], options[answer_index]
        ),
        options,
        answer_index,
        lecture: "Opposite poles attract and like poles repel.",
        subject: "physics",
        facts: [a, b],
    }
}

fn thermometer(rng: &mut ChaCha8Rng) -> Draft {
    let unit = ["°C", "°F"][rng.random_range(0..2)];
    let x = rng.random_range(10..100);
    let mut y = rng.random_range(10..100);
    while y == x {
        y = rng.random_range(10..100);
    }
    let answer_index = rng.random_range(0..2);
    let mut options = vec![format!("{y}{unit}"); 2];
    options[answer_index] = format!("{x}{unit}");
    Draft {
        question: "What temperature does this thermometer show?".into(),
        context: String::new(),
        explanation: format!(
            "The top of the liquid is at {x}{unit}, so the temperature is {x}{unit}."
        ),
        options,
        answer_index,
        lecture: "Thermometers measure temperature.",
        subject: "physics",
        facts: [answer_index, 0],
    }
}

fn compass(rng: &mut ChaCha8Rng) -> Draft {
    let dirs = ["north", "south", "east", "west"];
    let places = ["lake", "school", "farm", "river", "castle"];
    let refs = ["town", "forest", "bridge", "mountain"];
    let place = *places.choose(rng).unwrap();
    let reference = *refs.choose(rng).unwrap();
    let answer_index = rng.random_range(0..4);
    Draft {
        question: format!("Which direction is the {place} from the {reference}?"),
        context: String::new(),
        explanation: format!(
            "The compass shows the {place} is {} of the {reference}.",
            dirs[answer_index]
        ),
        options: dirs.iter().map(|s| s.to_string()).collect(),
        answer_index,
        lecture: "There are 4 cardinal directions.",
        subject: "geography",
        facts: [answer_index, 0],
    }
}

fn ocean(rng: &mut ChaCha8Rng) -> Draft {
    const OCEANS: [(&str, &str); 5] = [
        ("Pacific Ocean", "It is the largest ocean."),
        ("Atlantic Ocean", "It lies east of the Americas."),
        ("Indian Ocean", "It lies south of Asia."),
        ("Arctic Ocean", "It lies north of Europe."),
        ("Southern Ocean", "It lies around Antarctica."),
    ];
    let mut ids: Vec<usize> = (0..OCEANS.len()).collect();
    ids.shuffle(rng);
    ids.truncate(3);
    let answer_index = rng.random_range(0..3);
    let (name, fact) = OCEANS[ids[answer_index]];
    Draft {
        question: "Which ocean is highlighted?".into(),
        context: String::new(),
        explanation: format!("This is the {name}. {fact}"),
        options: ids.iter().map(|&i| OCEANS[i].0.to_string()).collect(),
        answer_index,
        lecture: "The world has 5 oceans.",
        subject: "geography",
        facts: [ids[answer_index], 0],
    }
}

fn particles(rng: &mut ChaCha8Rng) -> Draft {
    let solute = *["pink", "blue", "green"].choose(rng).unwrap();
    let a = rng.random_range(2..10);
    let mut b = rng.random_range(2..10);
    while b == a {
        b = rng.random_range(2..10);
    }
    let answer_index = usize::from(b > a);
    let letter = ['A', 'B'][answer_index];
    Draft {
        question: format!("Which solution has more {solute} particles?"),
        context: String::new(),
        explanation: format!(
            "Solution A has {a} particles and Solution B has {b} particles, so Solution {letter} has more."
        ),
        options: vec!["Solution A".into(), "Solution B".into()],
        answer_index,
        lecture: "Count the particles in each solution.",
        subject: "chemistry",
        facts: [a, b],
    }
}

/// Patch 0 tags the template, patches 1 and 2 carry the answer-relevant
/// facts as one-hots, patch 3 is noise.
fn synth_vision(template: usize, facts: [usize; 2], rng: &mut ChaCha8Rng) -> VisionFeatures {
    let mut data = vec![0.0; SYNTH_PATCHES * SYNTH_VISION_DIM];
    data[template] = 1.0;
    data[SYNTH_VISION_DIM + facts[0]] = 1.0;
    data[2 * SYNTH_VISION_DIM + facts[1]] = 1.0;
    for v in &mut data[3 * SYNTH_VISION_DIM..] {
        *v = f64::from(rng.random_range(-50i32..=50)) / 1024.0;
    }
    VisionFeatures::new(Tensor::new(vec![SYNTH_PATCHES, SYNTH_VISION_DIM], data).unwrap()).unwrap()
}

/// Templated records whose answers depend on the image features. Splits
/// are assigned 70/15/15 after a seeded shuffle.
pub fn synth_corpus(n: usize, seed: u64) -> Result<Vec<Record>> {
    if n < 1 {
        return Err(Error::Config("synth_corpus needs n ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n * 70).div_ceil(100);
    let n_val = (n * 15) / 100;
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut out = Vec::with_capacity(n);
    for (i, split) in split.into_iter().enumerate() {
        let template = i % TEMPLATES;
        let d = match template {
            0 => magnets(&mut rng),
            1 => thermometer(&mut rng),
            2 => compass(&mut rng),
            3 => ocean(&mut rng),
            _ => particles(&mut rng),
        };
        let vision = synth_vision(template, d.facts, &mut rng);
        out.push(Record {
            id: format!("synth-{i:04}"),
            question: d.question,
            context: d.context,
            options: d.options,
            answer_index: d.answer_index,
            lecture: d.lecture.to_string(),
            explanation: d.explanation,
            vision: Some(vision),
            subject: d.subject.to_string(),
            context_type: "image".into(),
            grade: format!("grade{}", 2 + template),
            split,
        });
    }
    Ok(out)
}
