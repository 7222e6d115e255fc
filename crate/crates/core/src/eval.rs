//! SQuAD-style answer scoring: normalization, token F1, exact match, and a
//! per-question-category report.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::QAExample;
use crate::error::{QaError, Result};

/// Lowercase, drop ASCII punctuation, split on whitespace, drop articles.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub em: u8,
}

pub fn f1_score(prediction: &str, truth: &str) -> MatchStats {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(truth);
    let em = u8::from(pred == gold);
    if pred.is_empty() || gold.is_empty() {
        let v = if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
        return MatchStats {
            precision: v,
            recall: v,
            f1: v,
            em,
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return MatchStats {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            em,
        };
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    MatchStats {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
        em,
    }
}

pub fn em_score(prediction: &str, truth: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum QuestionCategory {
    Who,
    When,
    Where,
    Why,
    What,
    Which,
    How,
    Other,
}

impl QuestionCategory {
    const KEYWORDS: [(&'static str, QuestionCategory); 7] = [
        ("who", QuestionCategory::Who),
        ("when", QuestionCategory::When),
        ("where", QuestionCategory::Where),
        ("why", QuestionCategory::Why),
        ("what", QuestionCategory::What),
        ("which", QuestionCategory::Which),
        ("how", QuestionCategory::How),
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionCategory::Who => "Who",
            QuestionCategory::When => "When",
            QuestionCategory::Where => "Where",
            QuestionCategory::Why => "Why",
            QuestionCategory::What => "What",
            QuestionCategory::Which => "Which",
            QuestionCategory::How => "How",
            QuestionCategory::Other => "Other",
        }
    }
}

/// First keyword of who/when/where/why/what/which/how that appears as a whole
/// word (case-insensitive), else `Other`. Keyword order decides, not position.
pub fn categorize_question(question: &str) -> QuestionCategory {
    let lower = question.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).collect();
    QuestionCategory::KEYWORDS
        .iter()
        .find(|(kw, _)| words.contains(kw))
        .map_or(QuestionCategory::Other, |&(_, cat)| cat)
}

/// Answer strings keyed by question id.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Predictions(BTreeMap<String, String>);

impl Predictions {
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut map = BTreeMap::new();
        for (qid, answer) in pairs {
            if map.insert(qid.clone(), answer).is_some() {
                return Err(QaError::Input(format!("duplicate prediction for question {qid}")));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, qid: &str) -> Option<&str> {
        self.0.get(qid).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.0.iter()
    }
}

struct PairList(Vec<(String, String)>);

impl<'de> Deserialize<'de> for PairList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = PairList;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping question ids to answer strings")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<PairList, A::Error> {
                let mut pairs = Vec::new();
                while let Some(pair) = map.next_entry::<String, String>()? {
                    pairs.push(pair);
                }
                Ok(PairList(pairs))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parses a `{qid: answer}` JSON object, rejecting repeated keys.
pub fn parse_predictions(json: &str, path: &Path) -> Result<Predictions> {
    let pairs: PairList = serde_json::from_str(json).map_err(|source| QaError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    Predictions::from_pairs(pairs.0)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| QaError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryScore {
    pub f1: f64,
    pub em: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean best-over-answers F1, times 100.
    pub f1: f64,
    /// Percentage of exact matches.
    pub em: f64,
    pub total: usize,
    /// Questions without a prediction; scored zero.
    pub missing: usize,
    pub categories: BTreeMap<QuestionCategory, CategoryScore>,
}

/// Best F1 and EM of `prediction` over all of an example's answers.
pub fn score_against_answers(prediction: &str, answers: &[String]) -> (f64, u8) {
    answers.iter().fold((0.0, 0), |(f1, em), truth| {
        let m = f1_score(prediction, truth);
        (f1.max(m.f1), em.max(m.em))
    })
}

pub fn evaluate(predictions: &Predictions, examples: &[QAExample]) -> EvalReport {
    // Sum in qid order so the result does not depend on example order.
    let mut order: Vec<&QAExample> = examples.iter().collect();
    order.sort_by(|a, b| a.qid.cmp(&b.qid));

    let mut sums: BTreeMap<QuestionCategory, (f64, f64, usize)> = BTreeMap::new();
    let (mut f1_total, mut em_total, mut missing) = (0.0, 0.0, 0);
    for e in &order {
        let (f1, em) = match predictions.get(&e.qid) {
            Some(p) => score_against_answers(p, &e.answer_texts),
            None => {
                missing += 1;
                (0.0, 0)
            }
        };
        f1_total += f1;
        em_total += f64::from(em);
        let entry = sums.entry(categorize_question(&e.question)).or_default();
        entry.0 += f1;
        entry.1 += f64::from(em);
        entry.2 += 1;
    }
    let pct = |sum: f64, n: usize| if n == 0 { 0.0 } else { 100.0 * sum / n as f64 };
    EvalReport {
        f1: pct(f1_total, order.len()),
        em: pct(em_total, order.len()),
        total: order.len(),
        missing,
        categories: sums
            .into_iter()
            .map(|(cat, (f1, em, n))| {
                (
                    cat,
                    CategoryScore {
                        f1: pct(f1, n),
                        em: pct(em, n),
                        count: n,
                    },
                )
            })
            .collect(),
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "Category", "F1", "EM", "Count")?;
        writeln!(f, "{:<10} {:>8.2} {:>8.2} {:>8}", "Total", self.f1, self.em, self.total)?;
        for (cat, s) in &self.categories {
            writeln!(f, "{:<10} {:>8.2} {:>8.2} {:>8}", cat.name(), s.f1, s.em, s.count)?;
        }
        if self.missing > 0 {
            writeln!(f, "missing predictions: {}", self.missing)?;
        }
        Ok(())
    }
}
