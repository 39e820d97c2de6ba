use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_LEXICONS: &str = include_str!("../../data/lexicons.json");

/// On-disk lexicon layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LexiconFile {
    pub orientation_pairs: Vec<(String, String)>,
    /// category → units as `[singular, plural]`
    pub unit_categories: BTreeMap<String, Vec<(String, String)>>,
    pub negation_aux: Vec<String>,
    /// `[base, third person singular]`
    pub verbs: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub(crate) struct UnitForm {
    pub category: usize,
    pub unit: usize,
    /// 0 singular, 1 plural
    pub plural: usize,
    /// forms with uppercase or non-letters match case-sensitively
    pub exact: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum VerbForm {
    Base,
    ThirdPerson,
}

/// Validated lookup tables used by the transforms.
#[derive(Clone, Debug)]
pub struct Lexicons {
    pub(crate) source: LexiconFile,
    pub(crate) opposite: HashMap<String, String>,
    pub(crate) categories: Vec<Vec<(String, String)>>,
    pub(crate) unit_forms: Vec<(String, UnitForm)>,
    pub(crate) aux: Vec<String>,
    pub(crate) verbs: HashMap<String, (VerbForm, String)>,
}

impl Lexicons {
    /// The bundled default tables.
    pub fn builtin() -> Self {
        static BUILTIN: OnceLock<Lexicons> = OnceLock::new();
        BUILTIN
            .get_or_init(|| {
                let file: LexiconFile =
                    serde_json::from_str(DEFAULT_LEXICONS).expect("bundled lexicons parse");
                Self::from_file(file).expect("bundled lexicons are valid")
            })
            .clone()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn from_file(file: LexiconFile) -> Result<Self> {
        let mut opposite = HashMap::new();
        for (a, b) in &file.orientation_pairs {
            let (a, b) = (a.to_lowercase(), b.to_lowercase());
            if a == b {
                return Err(Error::Config(format!(
                    "orientation word {a:?} paired with itself"
                )));
            }
            for (x, y) in [(&a, &b), (&b, &a)] {
                if let Some(prev) = opposite.insert(x.clone(), y.clone()) {
                    if &prev != y {
                        return Err(Error::Config(format!(
                            "orientation word {x:?} paired with both {prev:?} and {y:?}"
                        )));
                    }
                }
            }
        }

        let mut categories = Vec::new();
        let mut unit_forms: Vec<(String, UnitForm)> = Vec::new();
        let mut owner: HashMap<String, &str> = HashMap::new();
        for (ci, (name, units)) in file.unit_categories.iter().enumerate() {
            if units.len() < 2 {
                return Err(Error::Config(format!(
                    "unit category {name:?} needs ≥ 2 units"
                )));
            }
            for (ui, (sing, plur)) in units.iter().enumerate() {
                for (fi, form) in [sing, plur].into_iter().enumerate() {
                    let exact = form.chars().any(|c| !c.is_lowercase());
                    let key = if exact {
                        form.clone()
                    } else {
                        form.to_lowercase()
                    };
                    if let Some(other) = owner.get(&key) {
                        if *other != name.as_str() {
                            return Err(Error::Config(format!(
                                "unit {form:?} appears in categories {other:?} and {name:?}"
                            )));
                        }
                    }
                    owner.insert(key.clone(), name);
                    if fi == 1 && sing == plur {
                        continue;
                    }
                    unit_forms.push((
                        key,
                        UnitForm {
                            category: ci,
                            unit: ui,
                            plural: fi,
                            exact,
                        },
                    ));
                }
            }
            categories.push(units.clone());
        }
        // longest first so that "kilometers" wins over "meter"-like prefixes
        unit_forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));

        let mut verbs = HashMap::new();
        for (base, third) in &file.verbs {
            verbs.insert(base.to_lowercase(), (VerbForm::Base, base.to_lowercase()));
            verbs.insert(
                third.to_lowercase(),
                (VerbForm::ThirdPerson, base.to_lowercase()),
            );
        }
        let aux = file.negation_aux.iter().map(|s| s.to_lowercase()).collect();
        Ok(Self {
            source: file,
            opposite,
            categories,
            unit_forms,
            aux,
            verbs,
        })
    }

    pub fn file(&self) -> &LexiconFile {
        &self.source
    }

    pub fn opposite(&self, word: &str) -> Option<&str> {
        self.opposite.get(&word.to_lowercase()).map(String::as_str)
    }

    /// `(category, unit, plural)` of a unit form.
    pub fn unit_of(&self, form: &str) -> Option<(usize, usize, usize)> {
        self.unit_forms
            .iter()
            .find(|(key, u)| {
                if u.exact {
                    key == form
                } else {
                    *key == form.to_lowercase()
                }
            })
            .map(|(_, u)| (u.category, u.unit, u.plural))
    }

    pub(crate) fn unit_text(&self, category: usize, unit: usize, plural: usize) -> &str {
        let (s, p) = &self.categories[category][unit];
        if plural == 1 {
            p
        } else {
            s
        }
    }

    pub(crate) fn is_aux(&self, word: &str) -> bool {
        self.aux.iter().any(|a| a == word)
    }
}

impl Default for Lexicons {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tables_are_consistent() {
        let lx = Lexicons::builtin();
        for (a, b) in &lx.opposite {
            assert_eq!(lx.opposite.get(b), Some(a));
        }
        assert_eq!(lx.opposite("North"), Some("south"));
        let (c1, _, p) = lx.unit_of("kilometers").unwrap();
        assert_eq!(p, 1);
        let (c2, _, _) = lx.unit_of("miles").unwrap();
        assert_eq!(c1, c2);
        assert_ne!(
            lx.unit_of("kilograms").unwrap().0,
            lx.unit_of("hours").unwrap().0
        );
        assert!(lx.unit_of("°C").is_some());
        assert!(lx.unit_of("k").is_none());
    }

    #[test]
    fn asymmetric_or_overlapping_tables_are_rejected() {
        let mut f = Lexicons::builtin().source;
        f.orientation_pairs.push(("north".into(), "up".into()));
        assert!(Lexicons::from_file(f).is_err());

        let mut f = Lexicons::builtin().source;
        f.unit_categories
            .get_mut("time")
            .unwrap()
            .push(("meter".into(), "meters".into()));
        assert!(Lexicons::from_file(f).is_err());
    }
}
