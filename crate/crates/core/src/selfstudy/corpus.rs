use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::numerics::seeded_rng;
use crate::{token_digest, Token};

use super::tokens_of;

/// Options per multiple-choice question.
pub const NUM_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    /// Inclusive integer value range.
    pub min: u32,
    pub max: u32,
}

impl AttributeSpec {
    pub fn new(name: &str, min: u32, max: u32) -> Self {
        Self {
            name: name.to_string(),
            min,
            max,
        }
    }

    fn range_size(&self) -> u64 {
        (self.max as u64 + 1).saturating_sub(self.min as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Label prefix of each entity line, e.g. `P` gives `P00`, `P01`, ...
    pub entity_prefix: String,
    pub num_entities: usize,
    pub attributes: Vec<AttributeSpec>,
    /// Upper bound on corpus length in tokens.
    pub max_corpus_len: usize,
}

impl TaskSpec {
    /// Patient-style records: several clinical attributes per entity.
    pub fn records(num_entities: usize) -> Self {
        Self {
            name: "records".into(),
            entity_prefix: "P".into(),
            num_entities,
            attributes: vec![
                AttributeSpec::new("age", 18, 95),
                AttributeSpec::new("dose", 100, 999),
                AttributeSpec::new("bp", 90, 189),
                AttributeSpec::new("hr", 40, 139),
                AttributeSpec::new("wt", 40, 149),
                AttributeSpec::new("ward", 1, 60),
                AttributeSpec::new("stay", 1, 90),
                AttributeSpec::new("lab", 100, 999),
            ],
            max_corpus_len: 2048,
        }
    }

    /// Filing-style numeric facts about business segments.
    pub fn filings(num_entities: usize) -> Self {
        Self {
            name: "filings".into(),
            entity_prefix: "SEG".into(),
            num_entities,
            attributes: vec![
                AttributeSpec::new("rev", 1000, 9999),
                AttributeSpec::new("cost", 500, 4999),
                AttributeSpec::new("staff", 10, 999),
                AttributeSpec::new("sites", 1, 99),
                AttributeSpec::new("debt", 100, 9999),
                AttributeSpec::new("capex", 10, 999),
            ],
            max_corpus_len: 2048,
        }
    }

    /// Built-in spec by name.
    pub fn builtin(name: &str, num_entities: usize) -> Result<Self> {
        match name {
            "records" => Ok(Self::records(num_entities)),
            "filings" => Ok(Self::filings(num_entities)),
            other => Err(invalid(format!("unknown task '{other}' (expected records or filings)"))),
        }
    }

    /// The same spec restricted to its first `n` attributes.
    pub fn with_attributes(mut self, n: usize) -> Self {
        self.attributes.truncate(n);
        self
    }

    pub fn entity_label(&self, entity: usize) -> String {
        format!("{}{:02}", self.entity_prefix, entity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: usize,
    pub attribute: usize,
    pub value: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub task_name: String,
    #[serde(skip)]
    pub tokens: Vec<Token>,
    pub facts: Vec<Fact>,
    pub digest: String,
    pub entity_labels: Vec<String>,
    pub attribute_names: Vec<String>,
    pub seed: u64,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn fact(&self, entity: usize, attribute: usize) -> Option<&Fact> {
        self.facts
            .iter()
            .find(|f| f.entity == entity && f.attribute == attribute)
    }

    /// Question tokens asking for one fact, e.g. `P07 dose=`.
    pub fn question(&self, entity: usize, attribute: usize) -> Vec<Token> {
        tokens_of(&format!(
            "{} {}=",
            self.entity_labels[entity], self.attribute_names[attribute]
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question: Vec<Token>,
    pub options: Vec<Vec<Token>>,
    pub answer_index: usize,
    /// Fact the question asks about.
    pub entity: usize,
    pub attribute: usize,
}

impl EvalItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() != NUM_OPTIONS {
            return Err(invalid(format!(
                "eval item has {} options, expected {NUM_OPTIONS}",
                self.options.len()
            )));
        }
        if self.answer_index >= NUM_OPTIONS {
            return Err(invalid("answer index out of range"));
        }
        if self.question.is_empty() || self.options.iter().any(|o| o.is_empty()) {
            return Err(invalid("eval item has an empty question or option"));
        }
        Ok(())
    }
}

fn generation(msg: impl Into<String>) -> LabError {
    LabError::Generation(msg.into())
}

/// Seeded corpus plus one multiple-choice item per fact.
///
/// Values of an attribute are distinct across entities. Distractors are other
/// entities' values for the same attribute; with fewer than four other
/// entities the remainder are nearby unused values from the attribute range.
pub fn make_corpus(spec: &TaskSpec, seed: u64) -> Result<(SyntheticCorpus, Vec<EvalItem>)> {
    if spec.num_entities < 2 {
        return Err(invalid("a task needs at least two entities"));
    }
    if spec.attributes.is_empty() {
        return Err(invalid("a task needs at least one attribute"));
    }
    for a in &spec.attributes {
        if a.min > a.max {
            return Err(invalid(format!("attribute '{}' has min > max", a.name)));
        }
        let needed = spec.num_entities.max(NUM_OPTIONS) as u64;
        if a.range_size() < needed {
            return Err(generation(format!(
                "attribute '{}' range {}..={} holds {} values, need {needed} distinct",
                a.name,
                a.min,
                a.max,
                a.range_size()
            )));
        }
        if a.name.is_empty() || !a.name.is_ascii() {
            return Err(invalid("attribute names must be non-empty ASCII"));
        }
    }

    let mut rng = seeded_rng(seed, 0);
    // values[attr][entity]
    let mut values: Vec<Vec<u32>> = Vec::with_capacity(spec.attributes.len());
    for a in &spec.attributes {
        let mut chosen = Vec::with_capacity(spec.num_entities);
        while chosen.len() < spec.num_entities {
            let v = rng.random_range(a.min..=a.max);
            if !chosen.contains(&v) {
                chosen.push(v);
            }
        }
        values.push(chosen);
    }

    let entity_labels: Vec<String> = (0..spec.num_entities).map(|e| spec.entity_label(e)).collect();
    let mut text = String::new();
    let mut facts = Vec::new();
    for (e, label) in entity_labels.iter().enumerate() {
        text.push_str(label);
        for (ai, a) in spec.attributes.iter().enumerate() {
            let v = values[ai][e];
            text.push_str(&format!(" {}={}", a.name, v));
            facts.push(Fact {
                entity: e,
                attribute: ai,
                value: tokens_of(&v.to_string()),
            });
        }
        text.push('\n');
    }
    let tokens = tokens_of(&text);
    if tokens.len() > spec.max_corpus_len {
        return Err(generation(format!(
            "corpus of {} tokens exceeds the limit of {}",
            tokens.len(),
            spec.max_corpus_len
        )));
    }

    let mut items = Vec::with_capacity(facts.len());
    for f in &facts {
        let a = &spec.attributes[f.attribute];
        let truth = values[f.attribute][f.entity];
        let mut others: Vec<u32> = values[f.attribute]
            .iter()
            .enumerate()
            .filter(|&(e, _)| e != f.entity)
            .map(|(_, &v)| v)
            .collect();
        others.shuffle(&mut rng);
        others.truncate(NUM_OPTIONS - 1);
        let mut step = 1u32;
        while others.len() < NUM_OPTIONS - 1 {
            for cand in [truth.checked_add(step), truth.checked_sub(step)].into_iter().flatten() {
                if others.len() < NUM_OPTIONS - 1
                    && (a.min..=a.max).contains(&cand)
                    && !values[f.attribute].contains(&cand)
                    && !others.contains(&cand)
                {
                    others.push(cand);
                }
            }
            step += 1;
            if step > a.max - a.min + 1 {
                return Err(generation(format!(
                    "cannot find {} distractors for attribute '{}'",
                    NUM_OPTIONS - 1,
                    a.name
                )));
            }
        }
        let answer_index = rng.random_range(0..NUM_OPTIONS);
        let mut options: Vec<Vec<Token>> = others.iter().map(|v| tokens_of(&v.to_string())).collect();
        options.insert(answer_index, f.value.clone());
        items.push(EvalItem {
            question: tokens_of(&format!("{} {}=", entity_labels[f.entity], a.name)),
            options,
            answer_index,
            entity: f.entity,
            attribute: f.attribute,
        });
    }

    let corpus = SyntheticCorpus {
        task_name: spec.name.clone(),
        digest: token_digest(&tokens),
        tokens,
        facts,
        entity_labels,
        attribute_names: spec.attributes.iter().map(|a| a.name.clone()).collect(),
        seed,
    };
    Ok((corpus, items))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the corpus as raw bytes at `path` and its facts to `<path>.json`.
pub fn save_corpus(corpus: &SyntheticCorpus, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = corpus
        .tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| invalid(format!("token {t} is not a byte"))))
        .collect::<Result<_>>()?;
    fs::write(path, bytes)?;
    fs::write(sidecar(path), serde_json::to_vec_pretty(corpus)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<SyntheticCorpus> {
    let bytes = fs::read(path)?;
    let mut corpus: SyntheticCorpus = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    corpus.tokens = bytes.into_iter().map(Token::from).collect();
    if token_digest(&corpus.tokens) != corpus.digest {
        return Err(LabError::Format(format!(
            "corpus bytes at {} do not match the digest in its sidecar",
            path.display()
        )));
    }
    Ok(corpus)
}

/// One JSON object per line.
pub fn save_eval_items(items: &[EvalItem], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_eval_items(path: &Path) -> Result<Vec<EvalItem>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let it: EvalItem = serde_json::from_str(&line)?;
        it.validate()?;
        items.push(it);
    }
    Ok(items)
}
