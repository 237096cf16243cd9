//! JSONL datasets and the synthetic cross-passage task.
//!
//! A dataset file holds one JSON object per line:
//! `{"id": ..., "question": ..., "passages": [...], "answer": ...}`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::vocab::tokenize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub passages: Vec<String>,
    pub answer: String,
}

/// A tokenized and truncated record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub question: Vec<String>,
    pub passages: Vec<Vec<String>>,
    pub answer: Vec<String>,
}

impl Example {
    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            id: self.id.clone(),
            question: self.question.join(" "),
            passages: self.passages.iter().map(|p| p.join(" ")).collect(),
            answer: self.answer.join(" "),
        }
    }
}

/// Truncation limits applied at ingest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_passages: usize,
    pub question_len: usize,
    pub passage_len: usize,
    pub answer_len: usize,
}

impl From<&ModelConfig> for Limits {
    fn from(cfg: &ModelConfig) -> Self {
        Limits {
            max_passages: cfg.max_passages,
            question_len: cfg.max_question_len,
            passage_len: cfg.max_passage_len,
            answer_len: cfg.max_answer_len,
        }
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field: field.to_owned(),
        message: message.into(),
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, line: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        None => Err(schema(line, field, "missing")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(line, field, "expected a string")),
    }
}

fn nonempty_tokens(text: &str, line: usize, field: &str, limit: usize) -> Result<Vec<String>> {
    let mut toks = tokenize(text);
    if toks.is_empty() {
        return Err(schema(line, field, "must contain at least one token"));
    }
    toks.truncate(limit);
    Ok(toks)
}

/// Parses and validates one JSONL line (1-based `line` for messages).
pub fn parse_line(text: &str, line: usize, limits: &Limits) -> Result<Example> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line,
        message: "expected a JSON object".into(),
    })?;
    let id = match obj.get("id") {
        None => return Err(schema(line, "id", "missing")),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(schema(line, "id", "expected a string")),
    };
    let question = string_field(obj, line, "question")?;
    let answer = string_field(obj, line, "answer")?;
    let passages = match obj.get("passages") {
        None => return Err(schema(line, "passages", "missing")),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(schema(line, "passages", "expected an array of strings")),
    };
    if passages.is_empty() {
        return Err(schema(line, "passages", "needs at least one passage"));
    }
    let mut tokenized = Vec::new();
    for (i, p) in passages.iter().take(limits.max_passages).enumerate() {
        let field = format!("passages[{i}]");
        let text = p
            .as_str()
            .ok_or_else(|| schema(line, &field, "expected a string"))?;
        tokenized.push(nonempty_tokens(text, line, &field, limits.passage_len)?);
    }
    Ok(Example {
        id,
        question: nonempty_tokens(&question, line, "question", limits.question_len)?,
        passages: tokenized,
        answer: nonempty_tokens(&answer, line, "answer", limits.answer_len)?,
    })
}

/// Parses a whole JSONL document; blank lines are skipped.
pub fn parse_dataset(text: &str, limits: &Limits) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1, limits)?);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "dataset contains no records".into(),
        });
    }
    Ok(out)
}

pub fn ingest(path: &Path, limits: &Limits) -> Result<Vec<Example>> {
    parse_dataset(&fs::read_to_string(path)?, limits)
}

pub fn records_to_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes examples back as JSONL with space-joined tokens.
pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let records: Vec<DatasetRecord> = examples.iter().map(Example::to_record).collect();
    fs::write(path, records_to_jsonl(&records))?;
    Ok(())
}

/// Parameters of the synthetic cross-passage task.
///
/// Every example has a key entity that occurs in `cooccurrence` of its
/// passages and `distractors` other entities that occur in exactly one
/// passage each. The question names a topic token present in every
/// passage, and the answer is `answer <key entity>`. Every marked token
/// occurs once. Each passage without the key holds exactly one distractor
/// and the rest are spread evenly over the passages that hold the key, so
/// spreading copy mass evenly over the entities of each passage and then
/// averaging does not single out the key; counting the passages a token
/// appears in does.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Number of content tokens (topics, entities and fillers together).
    pub vocab_size: usize,
    pub passages: usize,
    pub passage_len: usize,
    pub examples: usize,
    pub cooccurrence: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 48,
            passages: 3,
            passage_len: 12,
            examples: 32,
            cooccurrence: 2,
            distractors: 5,
            seed: 1,
        }
    }
}

/// Fixed words outside the content pools.
pub const QUESTION_WORDS: [&str; 4] = ["which", "entity", "links", "?"];
pub const ANSWER_WORD: &str = "answer";

/// Sizes of the topic, entity and filler pools.
pub fn pool_sizes(vocab_size: usize) -> (usize, usize, usize) {
    let topics = (vocab_size / 8).max(1);
    let entities = vocab_size.saturating_sub(topics) / 2;
    let fillers = vocab_size.saturating_sub(topics + entities);
    (topics, entities, fillers)
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (topics, entities, fillers) = pool_sizes(self.vocab_size);
        let k = self.passages;
        let m = self.cooccurrence;
        if k == 0 || self.examples == 0 {
            return Err(Error::Config("synthetic task needs passages and examples".into()));
        }
        if m < 2 || m > k {
            return Err(Error::Config(format!(
                "co-occurrence count must lie in 2..={k}, got {m}"
            )));
        }
        if self.distractors < k - m {
            return Err(Error::Config(format!(
                "{} distractors cannot cover the {} passages without the key entity",
                self.distractors,
                k - m
            )));
        }
        if topics == 0 || fillers == 0 || entities < 1 + self.distractors {
            return Err(Error::Config(format!(
                "vocab_size {} is too small for 1 + {} entities per example",
                self.vocab_size, self.distractors
            )));
        }
        let per_key_passage = (self.distractors - (k - m)).div_ceil(m);
        let needed = 2 + per_key_passage;
        if self.passage_len < needed {
            return Err(Error::Config(format!(
                "passage_len {} cannot hold {needed} marked tokens",
                self.passage_len
            )));
        }
        Ok(())
    }
}

fn pool(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Generates the synthetic dataset described by `spec`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let (n_topics, n_entities, n_fillers) = pool_sizes(spec.vocab_size);
    let topics = pool("t", n_topics);
    let entities = pool("e", n_entities);
    let fillers = pool("w", n_fillers);
    let mut rng = SeededRng::new(spec.seed);
    let k = spec.passages;
    let mut records = Vec::with_capacity(spec.examples);
    for ex in 0..spec.examples {
        let topic = &topics[rng.below(n_topics)];
        let chosen = rng.sample_distinct(n_entities, 1 + spec.distractors);
        let key = &entities[chosen[0]];
        let mut order: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut order);
        let (with_key, without_key) = order.split_at(spec.cooccurrence);
        let mut marked: Vec<Vec<&str>> = vec![vec![topic.as_str()]; k];
        for &p in with_key {
            marked[p].push(key);
        }
        // one distractor per passage without the key, the rest spread evenly
        // over the passages that hold it
        let distractors = chosen[1..].iter().map(|&i| entities[i].as_str());
        let hosts = without_key.iter().chain(with_key.iter().cycle());
        for (&p, d) in hosts.zip(distractors) {
            marked[p].push(d);
        }
        let passages = marked
            .into_iter()
            .map(|tokens| {
                let mut slots: Vec<String> = (0..spec.passage_len)
                    .map(|_| fillers[rng.below(n_fillers)].clone())
                    .collect();
                let positions = rng.sample_distinct(spec.passage_len, tokens.len());
                for (pos, tok) in positions.into_iter().zip(tokens) {
                    slots[pos] = tok.to_owned();
                }
                slots.join(" ")
            })
            .collect();
        let mut question = QUESTION_WORDS.to_vec();
        question.insert(3, topic);
        records.push(DatasetRecord {
            id: format!("syn-{ex}"),
            question: question.join(" "),
            passages,
            answer: format!("{ANSWER_WORD} {key}"),
        });
    }
    Ok(records)
}

/// Number of passages of `example` that contain `token`.
pub fn document_frequency(example: &Example, token: &str) -> usize {
    example
        .passages
        .iter()
        .filter(|p| p.iter().any(|t| t == token))
        .count()
}

/// Entity tokens (`e<number>`) of an example.
pub fn entity_tokens(example: &Example) -> HashSet<&str> {
    example
        .passages
        .iter()
        .flatten()
        .map(String::as_str)
        .filter(|t| t.starts_with('e') && t[1..].chars().all(|c| c.is_ascii_digit()) && t.len() > 1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> Limits {
        Limits::from(&ModelConfig::default())
    }

    #[test]
    fn table_style_record_parses() {
        let line = r#"{"id": "q1", "question": "What is the largest spider in the world?",
            "passages": ["The giant huntsman spider is the largest by leg span.",
                         "Goliath birdeater is the heaviest spider.",
                         "Spiders are arachnids."],
            "answer": "The giant huntsman spider."}"#
            .replace('\n', " ");
        let ex = parse_line(&line, 1, &limits()).unwrap();
        assert_eq!(ex.passages.len(), 3);
        assert_eq!(ex.question.last().unwrap(), "?");
        assert_eq!(ex.answer, ["the", "giant", "huntsman", "spider", "."]);
    }

    #[test]
    fn long_passage_truncated() {
        let long = vec!["word"; 200].join(" ");
        let line = serde_json::json!({"id": "x", "question": "q", "passages": [long], "answer": "a"});
        let ex = parse_line(&line.to_string(), 1, &limits()).unwrap();
        assert_eq!(ex.passages[0].len(), 130);
    }

    #[test]
    fn schema_errors_name_field_and_line() {
        let text = "{\"id\":\"a\",\"question\":\"q\",\"passages\":[\"p\"],\"answer\":\"a\"}\n\
                    {\"id\":\"b\",\"question\":\"q\",\"passages\":[\"p\"]}\n";
        match parse_dataset(text, &limits()) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "answer");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_dataset("{not json", &limits()),
            Err(Error::Parse { line: 1, .. })
        ));
        let empty_passage = r#"{"id":"a","question":"q","passages":["  "],"answer":"a"}"#;
        assert!(matches!(
            parse_line(empty_passage, 3, &limits()),
            Err(Error::Schema { line: 3, .. })
        ));
    }

    #[test]
    fn passages_capped_at_max() {
        let line = serde_json::json!({"id": "x", "question": "q",
            "passages": ["a", "b", "c", "d", "e"], "answer": "a"});
        let ex = parse_line(&line.to_string(), 1, &limits()).unwrap();
        assert_eq!(ex.passages.len(), 3);
    }

    #[test]
    fn ingest_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"id":"1","question":"Where's the Lake?","passages":["It's BIG, really!","x"],"answer":"Lake-side."}"#;
        let first = parse_dataset(text, &limits()).unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &first).unwrap();
        let second = ingest(&path, &limits()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn synthetic_frequency_audit() {
        let spec = SyntheticTaskSpec {
            examples: 200,
            ..SyntheticTaskSpec::default()
        };
        let records = gen_synthetic(&spec).unwrap();
        let text = records_to_jsonl(&records);
        let examples = parse_dataset(&text, &limits()).unwrap();
        for ex in &examples {
            let key = &ex.answer[1];
            assert_eq!(document_frequency(ex, key), spec.cooccurrence);
            let ents = entity_tokens(ex);
            assert_eq!(ents.len(), 1 + spec.distractors);
            for e in ents {
                if e != key {
                    assert_eq!(document_frequency(ex, e), 1);
                }
                let occurrences = ex.passages.iter().flatten().filter(|t| *t == e).count();
                assert_eq!(occurrences, document_frequency(ex, e));
            }
            for p in ex.passages.iter().filter(|p| !p.contains(key)) {
                assert_eq!(p.iter().filter(|t| t.starts_with('e')).count(), 1);
            }
            // the topic appears in every passage
            assert_eq!(document_frequency(ex, &ex.question[3]), spec.passages);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let spec = SyntheticTaskSpec::default();
        assert_eq!(
            records_to_jsonl(&gen_synthetic(&spec).unwrap()),
            records_to_jsonl(&gen_synthetic(&spec).unwrap())
        );
        let mk = SyntheticTaskSpec {
            passages: 2,
            cooccurrence: 2,
            ..spec.clone()
        };
        for r in gen_synthetic(&mk).unwrap() {
            let key = r.answer.split_whitespace().nth(1).unwrap().to_owned();
            assert!(r.passages.iter().all(|p| p.split_whitespace().any(|t| t == key)));
        }
        let too_small = SyntheticTaskSpec {
            vocab_size: 6,
            ..spec.clone()
        };
        assert!(matches!(gen_synthetic(&too_small), Err(Error::Config(_))));
        let bad_m = SyntheticTaskSpec {
            cooccurrence: 4,
            ..spec
        };
        assert!(matches!(gen_synthetic(&bad_m), Err(Error::Config(_))));
    }
}
