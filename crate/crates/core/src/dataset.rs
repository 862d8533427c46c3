//! Multiple-choice dataset ingestion, batching and synthesis.
//!
//! Canonical format is JSON Lines, one item per line:
//!
//! ```text
//! {"id": "q1", "question": "...", "options": {"A": "...", ..., "F": "..."},
//!  "label": "C", "level": "Beginner"}
//! ```
//!
//! `label` is optional only for the permissive loader used by prediction
//! on unlabeled splits. Arabic (or any UTF-8) text passes through
//! verbatim; no cleaning or normalization is applied.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::losses::CONTRASTIVE_NEGATIVES;
use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("item {item_id:?}: {msg}")]
    Validation { item_id: String, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Option letters A through F, in ranking tie-break order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum OptionLetter {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl OptionLetter {
    pub const ALL: [OptionLetter; 6] = [
        OptionLetter::A,
        OptionLetter::B,
        OptionLetter::C,
        OptionLetter::D,
        OptionLetter::E,
        OptionLetter::F,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OptionLetter::A => "A",
            OptionLetter::B => "B",
            OptionLetter::C => "C",
            OptionLetter::D => "D",
            OptionLetter::E => "E",
            OptionLetter::F => "F",
        }
    }
}

impl std::fmt::Display for OptionLetter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Difficulty levels of the benchmark items.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Level {
    Beginner,
    Intermediate,
    Advanced,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Beginner, Level::Intermediate, Level::Advanced];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Beginner => "Beginner",
            Level::Intermediate => "Intermediate",
            Level::Advanced => "Advanced",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One multiple-choice item. Options are keyed by letter, which keeps
/// them ordered and duplicate-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<OptionLetter, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<OptionLetter>,
    pub level: Level,
}

impl McqItem {
    /// Structural invariants: between 2 and 6 options, and the label (when
    /// present, or when required) names one of them.
    pub fn validate(&self, require_label: bool) -> Result<(), DataError> {
        let invalid = |msg: String| DataError::Validation { item_id: self.id.clone(), msg };
        if self.id.is_empty() {
            return Err(DataError::Validation { item_id: "<empty>".into(), msg: "empty id".into() });
        }
        if self.options.len() < 2 || self.options.len() > 6 {
            return Err(invalid(format!("expected 2..=6 options, got {}", self.options.len())));
        }
        match self.label {
            Some(label) if !self.options.contains_key(&label) => {
                Err(invalid(format!("label {label} is not among the options")))
            }
            None if require_label => Err(invalid("missing label".into())),
            _ => Ok(()),
        }
    }

    /// Incorrect options in letter order.
    pub fn incorrect_options(&self) -> Vec<(OptionLetter, &str)> {
        self.options
            .iter()
            .filter(|(letter, _)| Some(**letter) != self.label)
            .map(|(letter, text)| (*letter, text.as_str()))
            .collect()
    }
}

fn load_impl(path: &Path, require_label: bool) -> Result<Vec<McqItem>, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io { path: display.clone(), source })?;
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|source| DataError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: McqItem = serde_json::from_str(&line).map_err(|e| DataError::Format {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        item.validate(require_label)?;
        items.push(item);
    }
    Ok(items)
}

/// Loads and validates a labeled dataset, in file order.
pub fn load_dataset(path: &Path) -> Result<Vec<McqItem>, DataError> {
    load_impl(path, true)
}

/// Loader variant for unlabeled splits (prediction only).
pub fn load_dataset_permissive(path: &Path) -> Result<Vec<McqItem>, DataError> {
    load_impl(path, false)
}

/// Writes items in the canonical JSON Lines format.
pub fn save_dataset(path: &Path, items: &[McqItem]) -> Result<(), DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io { path: display.clone(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Item counts per difficulty level.
pub fn level_histogram(items: &[McqItem]) -> BTreeMap<Level, usize> {
    let mut hist = BTreeMap::new();
    for item in items {
        *hist.entry(item.level).or_insert(0) += 1;
    }
    hist
}

/// One training item with its positive/negative split. The contrastive
/// negatives are all incorrect options, padded by seeded resampling with
/// replacement to exactly [`CONTRASTIVE_NEGATIVES`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub question: String,
    pub level: Level,
    pub positive: (OptionLetter, String),
    /// Distinct incorrect options, letter order.
    pub incorrect: Vec<(OptionLetter, String)>,
    /// Exactly [`CONTRASTIVE_NEGATIVES`] entries; may repeat.
    pub contrastive_negatives: Vec<(OptionLetter, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub items: Vec<BatchItem>,
}

/// Shuffles the items and splits them into batches of `batch_size`
/// (the trailing short batch is kept). Every item appears exactly once.
pub fn make_batches(
    items: &[McqItem],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TrainBatch>, DataError> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    if items.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut substream(seed, "shuffle"));
    let mut neg_rng = substream(seed, "negatives");

    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut batch_items = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let item = &items[idx];
            let label = item.label.ok_or_else(|| DataError::Validation {
                item_id: item.id.clone(),
                msg: "training item lacks label".into(),
            })?;
            let positive = (label, item.options[&label].clone());
            let incorrect: Vec<(OptionLetter, String)> = item
                .incorrect_options()
                .into_iter()
                .map(|(l, t)| (l, t.to_string()))
                .collect();
            if incorrect.is_empty() {
                return Err(DataError::Validation {
                    item_id: item.id.clone(),
                    msg: "no incorrect options to sample negatives from".into(),
                });
            }
            let mut negatives = incorrect.clone();
            while negatives.len() < CONTRASTIVE_NEGATIVES {
                let pick = neg_rng.random_range(0..incorrect.len());
                negatives.push(incorrect[pick].clone());
            }
            negatives.truncate(CONTRASTIVE_NEGATIVES);
            batch_items.push(BatchItem {
                id: item.id.clone(),
                question: item.question.clone(),
                level: item.level,
                positive,
                incorrect,
                contrastive_negatives: negatives,
            });
        }
        batches.push(TrainBatch { items: batch_items });
    }
    Ok(batches)
}

/// Generates a learnable synthetic dataset: each question plants three
/// pattern tokens that reappear only in the correct option, while
/// distractors draw from a disjoint token pool. Six options per item,
/// levels assigned round-robin.
pub fn synthesize_toy_dataset(n_items: usize, seed: u64) -> Vec<McqItem> {
    assert!(n_items >= 1, "n_items must be at least 1");
    let patterns: Vec<String> = (0..40).map(|i| format!("p{i:02}")).collect();
    let distractors: Vec<String> = (0..80).map(|i| format!("d{i:02}")).collect();
    let fillers: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();

    let mut rng = substream(seed, "synth");
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let mut pool: Vec<&String> = patterns.iter().collect();
        pool.shuffle(&mut rng);
        let planted: Vec<&String> = pool.into_iter().take(3).collect();

        let filler = |rng: &mut rand_chacha::ChaCha8Rng| {
            fillers[rng.random_range(0..fillers.len())].clone()
        };
        let question = format!(
            "{} {} {} {} {}",
            filler(&mut rng),
            planted[0],
            planted[1],
            planted[2],
            filler(&mut rng)
        );
        let correct = format!("{} {} {}", planted[0], planted[1], planted[2]);

        let label = OptionLetter::ALL[rng.random_range(0..OptionLetter::ALL.len())];
        let mut options = BTreeMap::new();
        for letter in OptionLetter::ALL {
            if letter == label {
                options.insert(letter, correct.clone());
            } else {
                let mut pool: Vec<&String> = distractors.iter().collect();
                pool.shuffle(&mut rng);
                options.insert(
                    letter,
                    format!("{} {} {}", pool[0], pool[1], pool[2]),
                );
            }
        }

        items.push(McqItem {
            id: format!("syn-{i:05}"),
            question,
            options,
            label: Some(label),
            level: Level::ALL[i % Level::ALL.len()],
        });
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[&str]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    const GOOD_LINE: &str = r#"{"id":"q1","question":"سؤال","options":{"A":"أ","B":"ب","C":"ج"},"label":"B","level":"Beginner"}"#;

    #[test]
    fn load_well_formed_file_counts_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "train.jsonl",
            &[
                GOOD_LINE,
                r#"{"id":"q2","question":"x","options":{"A":"1","B":"2"},"label":"A","level":"Advanced"}"#,
                r#"{"id":"q3","question":"y","options":{"C":"1","D":"2"},"label":"D","level":"Beginner"}"#,
            ],
        );
        let items = load_dataset(&path).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].id, "q1");
        let hist = level_histogram(&items);
        assert_eq!(hist[&Level::Beginner], 2);
        assert_eq!(hist[&Level::Advanced], 1);
        assert!(!hist.contains_key(&Level::Intermediate));
    }

    #[test]
    fn label_missing_from_options_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[r#"{"id":"q9","question":"x","options":{"A":"1","B":"2"},"label":"F","level":"Beginner"}"#],
        );
        match load_dataset(&path) {
            Err(DataError::Validation { item_id, msg }) => {
                assert_eq!(item_id, "q9");
                assert!(msg.contains('F'));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, "bad.jsonl", &[GOOD_LINE, "{broken"]);
        match load_dataset(&path) {
            Err(DataError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unlabeled_items_need_the_permissive_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "test.jsonl",
            &[r#"{"id":"t1","question":"x","options":{"A":"1","B":"2"},"level":"Advanced"}"#],
        );
        assert!(matches!(load_dataset(&path), Err(DataError::Validation { .. })));
        let items = load_dataset_permissive(&path).unwrap();
        assert_eq!(items[0].label, None);
    }

    #[test]
    fn too_few_options_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "one.jsonl",
            &[r#"{"id":"q1","question":"x","options":{"A":"1"},"label":"A","level":"Beginner"}"#],
        );
        assert!(matches!(load_dataset(&path), Err(DataError::Validation { .. })));
    }

    #[test]
    fn save_load_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.jsonl");
        let items = synthesize_toy_dataset(12, 3);
        save_dataset(&path, &items).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(items, back);
    }

    #[test]
    fn batches_cover_every_item_once() {
        let items = synthesize_toy_dataset(23, 5);
        let batches = make_batches(&items, 4, 99).unwrap();
        assert_eq!(batches.len(), 6);
        assert_eq!(batches.last().unwrap().items.len(), 3);
        let mut seen: Vec<&str> =
            batches.iter().flat_map(|b| b.items.iter().map(|i| i.id.as_str())).collect();
        seen.sort_unstable();
        let mut want: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
        want.sort_unstable();
        assert_eq!(seen, want);
    }

    #[test]
    fn batches_are_deterministic_in_the_seed() {
        let items = synthesize_toy_dataset(16, 7);
        let a = make_batches(&items, 4, 123).unwrap();
        let b = make_batches(&items, 4, 123).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&items, 4, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn six_option_item_negatives_are_the_five_incorrect_texts() {
        let items = synthesize_toy_dataset(4, 11);
        let batches = make_batches(&items, 2, 1).unwrap();
        for item in batches.iter().flat_map(|b| &b.items) {
            assert_eq!(item.incorrect.len(), 5);
            assert_eq!(item.contrastive_negatives, item.incorrect);
        }
    }

    fn three_option_item() -> McqItem {
        let mut options = BTreeMap::new();
        options.insert(OptionLetter::A, "right".to_string());
        options.insert(OptionLetter::B, "wrong-one".to_string());
        options.insert(OptionLetter::C, "wrong-two".to_string());
        McqItem {
            id: "tri".into(),
            question: "q".into(),
            options,
            label: Some(OptionLetter::A),
            level: Level::Beginner,
        }
    }

    #[test]
    fn short_option_items_pad_negatives_with_replacement() {
        // Base negatives always include every incorrect option, so both
        // wrong texts appear in each seed's padded list; across many
        // seeds the resampled tail also covers both.
        let items = vec![three_option_item()];
        let mut tail_seen: BTreeSet<String> = BTreeSet::new();
        for seed in 0..1000u64 {
            let batches = make_batches(&items, 1, seed).unwrap();
            let negs = &batches[0].items[0].contrastive_negatives;
            assert_eq!(negs.len(), CONTRASTIVE_NEGATIVES);
            for wrong in ["wrong-one", "wrong-two"] {
                assert!(negs.iter().any(|(_, t)| t == wrong), "seed {seed} missing {wrong}");
            }
            for (_, text) in &negs[2..] {
                tail_seen.insert(text.clone());
            }
        }
        assert!(tail_seen.contains("wrong-one") && tail_seen.contains("wrong-two"));
    }

    #[test]
    fn synthetic_items_are_valid_and_planted() {
        let items = synthesize_toy_dataset(30, 17);
        assert_eq!(items.len(), 30);
        for (i, item) in items.iter().enumerate() {
            item.validate(true).unwrap();
            assert_eq!(item.options.len(), 6);
            assert_eq!(item.level, Level::ALL[i % 3]);
            let label = item.label.unwrap();
            let question_tokens: BTreeSet<&str> = item.question.split_whitespace().collect();
            let planted: Vec<&str> = item.options[&label]
                .split_whitespace()
                .filter(|t| t.starts_with('p'))
                .collect();
            assert_eq!(planted.len(), 3);
            for tok in planted {
                assert!(question_tokens.contains(tok), "item {i} missing planted token {tok}");
            }
            for (letter, text) in &item.options {
                if *letter != label {
                    assert!(
                        text.split_whitespace().all(|t| !t.starts_with('p')),
                        "distractor {letter} leaked a pattern token"
                    );
                }
            }
        }
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(matches!(make_batches(&[], 4, 1), Err(DataError::EmptyDataset)));
    }

    proptest! {
        // Negatives are always drawn from the item's own incorrect
        // options and never equal the positive.
        #[test]
        fn negatives_never_equal_positive(seed in 0u64..200, n in 1usize..20, batch in 1usize..8) {
            let items = synthesize_toy_dataset(n, seed);
            let batches = make_batches(&items, batch, seed ^ 0x55).unwrap();
            for item in batches.iter().flat_map(|b| &b.items) {
                for (letter, text) in &item.contrastive_negatives {
                    prop_assert_ne!(*letter, item.positive.0);
                    prop_assert_ne!(text, &item.positive.1);
                    prop_assert!(item.incorrect.iter().any(|(l, t)| l == letter && t == text));
                }
            }
        }
    }
}
