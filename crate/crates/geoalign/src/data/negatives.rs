//! Hard-negative synthesis by controlled perturbation of a region phrase:
//! attribute (color) replacement, orientation inversion, and category
//! substitution from a confusion list.
//!
//! Phrases follow the frozen template grammar
//! `"{color} {category} in the {location}"`.

use super::{DataError, HardNegative, NegativeKind, RegionAnnotation};

/// Word lists the perturbations draw from, plus the category confusion map.
#[derive(Debug, Clone)]
pub struct Lexicons {
    pub colors: Vec<String>,
    pub categories: Vec<String>,
    confusions: Vec<(String, String)>,
}

impl Lexicons {
    pub fn new(colors: Vec<String>, categories: Vec<String>) -> Self {
        let confusions = default_confusions(&categories);
        Lexicons {
            colors,
            categories,
            confusions,
        }
    }

    pub fn from_scene_config(cfg: &super::SceneConfig) -> Self {
        Self::new(
            cfg.colors.iter().map(|(n, _)| n.clone()).collect(),
            cfg.categories.clone(),
        )
    }

    /// Confusable partner of a category, falling back to the next category
    /// in list order for unknown pairs.
    fn confusable(&self, category: &str) -> Option<&str> {
        if let Some((_, partner)) = self.confusions.iter().find(|(c, _)| c == category) {
            return Some(partner);
        }
        let idx = self.categories.iter().position(|c| c == category)?;
        if self.categories.len() < 2 {
            return None;
        }
        Some(&self.categories[(idx + 1) % self.categories.len()])
    }
}

/// Visually confusable partners among the default categories.
fn default_confusions(categories: &[String]) -> Vec<(String, String)> {
    [
        ("tank", "vehicle"),
        ("vehicle", "tank"),
        ("pool", "court"),
        ("court", "pool"),
        ("building", "plane"),
        ("plane", "building"),
        ("road", "trees"),
        ("trees", "road"),
    ]
    .iter()
    .filter(|(a, b)| {
        categories.iter().any(|c| c == a) && categories.iter().any(|c| c == b)
    })
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

struct ParsedPhrase {
    color: String,
    category: String,
    location: Vec<String>,
}

impl ParsedPhrase {
    fn render(&self) -> String {
        format!(
            "{} {} in the {}",
            self.color,
            self.category,
            self.location.join(" ")
        )
    }
}

const LOCATION_WORDS: [&str; 5] = ["upper", "lower", "left", "right", "center"];

fn parse_phrase(phrase: &str, lex: &Lexicons) -> Result<ParsedPhrase, DataError> {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    let bad = |msg: &str| {
        DataError::Config(format!("phrase {phrase:?} does not match the grammar: {msg}"))
    };
    if words.len() < 5 {
        return Err(bad("too few words"));
    }
    let (color, category) = (words[0], words[1]);
    if !lex.colors.iter().any(|c| c == color) {
        return Err(bad(&format!("unknown color {color:?}")));
    }
    if !lex.categories.iter().any(|c| c == category) {
        return Err(bad(&format!("unknown category {category:?}")));
    }
    if words[2] != "in" || words[3] != "the" {
        return Err(bad("missing \"in the\""));
    }
    let location: Vec<String> = words[4..].iter().map(|w| w.to_string()).collect();
    if location.is_empty() || location.iter().any(|w| !LOCATION_WORDS.contains(&w.as_str())) {
        return Err(bad("unknown location words"));
    }
    Ok(ParsedPhrase {
        color: color.to_string(),
        category: category.to_string(),
        location,
    })
}

fn flip(location: &[String], horizontal: bool, vertical: bool) -> Vec<String> {
    location
        .iter()
        .map(|w| {
            let flipped = match w.as_str() {
                "left" if horizontal => "right",
                "right" if horizontal => "left",
                "upper" if vertical => "lower",
                "lower" if vertical => "upper",
                other => other,
            };
            flipped.to_string()
        })
        .collect()
}

/// Candidate phrases per perturbation kind, in deterministic preference
/// order. Orientation of a pure-center phrase yields no candidates.
fn candidates(parsed: &ParsedPhrase, lex: &Lexicons, kind: NegativeKind) -> Vec<String> {
    match kind {
        NegativeKind::Attribute => lex
            .colors
            .iter()
            .filter(|c| **c != parsed.color)
            .map(|c| {
                ParsedPhrase {
                    color: c.clone(),
                    category: parsed.category.clone(),
                    location: parsed.location.clone(),
                }
                .render()
            })
            .collect(),
        NegativeKind::Orientation => {
            let has_h = parsed.location.iter().any(|w| w == "left" || w == "right");
            let has_v = parsed.location.iter().any(|w| w == "upper" || w == "lower");
            let mut out = Vec::new();
            let push = |loc: Vec<String>, out: &mut Vec<String>| {
                let text = ParsedPhrase {
                    color: parsed.color.clone(),
                    category: parsed.category.clone(),
                    location: loc,
                }
                .render();
                if !out.contains(&text) {
                    out.push(text);
                }
            };
            if has_h {
                push(flip(&parsed.location, true, false), &mut out);
            }
            if has_v {
                push(flip(&parsed.location, false, true), &mut out);
            }
            if has_h && has_v {
                push(flip(&parsed.location, true, true), &mut out);
            }
            out
        }
        NegativeKind::Category => {
            let mut cats: Vec<&str> = Vec::new();
            if let Some(partner) = lex.confusable(&parsed.category) {
                cats.push(partner);
            }
            for c in &lex.categories {
                if c != &parsed.category && !cats.contains(&c.as_str()) {
                    cats.push(c);
                }
            }
            cats.into_iter()
                .map(|c| {
                    ParsedPhrase {
                        color: parsed.color.clone(),
                        category: c.to_string(),
                        location: parsed.location.clone(),
                    }
                    .render()
                })
                .collect()
        }
    }
}

/// Attach `q_minus_1` distinct hard negatives to a region annotation,
/// cycling attribute / orientation / category perturbations. The seed
/// rotates the cycle's starting kind; substitutions themselves follow a
/// deterministic preference order. Phrases that cannot take a kind (a pure
/// "center" location has no orientation inversion) fall through to the next
/// kind in the cycle.
pub fn synth_hard_negatives(
    ann: &RegionAnnotation,
    lex: &Lexicons,
    q_minus_1: usize,
    seed: u64,
) -> Result<RegionAnnotation, DataError> {
    let parsed = parse_phrase(&ann.phrase, lex)?;
    let kinds = {
        let base = [
            NegativeKind::Attribute,
            NegativeKind::Orientation,
            NegativeKind::Category,
        ];
        let rot = (seed % 3) as usize;
        [base[rot], base[(rot + 1) % 3], base[(rot + 2) % 3]]
    };
    let pools: Vec<(NegativeKind, Vec<String>)> = kinds
        .iter()
        .map(|&k| (k, candidates(&parsed, lex, k)))
        .collect();

    let mut used: std::collections::BTreeSet<String> = Default::default();
    used.insert(ann.phrase.clone());
    let mut negatives = Vec::with_capacity(q_minus_1);
    let mut cursor = vec![0usize; pools.len()];
    while negatives.len() < q_minus_1 {
        let before = negatives.len();
        for (i, (kind, pool)) in pools.iter().enumerate() {
            if negatives.len() == q_minus_1 {
                break;
            }
            while cursor[i] < pool.len() {
                let text = pool[cursor[i]].clone();
                cursor[i] += 1;
                if used.insert(text.clone()) {
                    negatives.push(HardNegative { text, kind: *kind });
                    break;
                }
            }
        }
        if negatives.len() == before {
            return Err(DataError::Config(format!(
                "phrase {:?}: lexicons support only {} distinct negatives, {q_minus_1} requested",
                ann.phrase,
                negatives.len()
            )));
        }
    }
    Ok(RegionAnnotation {
        bbox: ann.bbox,
        phrase: ann.phrase.clone(),
        hard_negatives: negatives,
    })
}
