//! Cross-episode memory bank and episode-start retrieval.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{jaccard, word_set};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("bank line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("failed to persist bank: {0}")]
    PersistFailure(std::io::Error),
    #[error("bank io: {0}")]
    Io(#[from] std::io::Error),
    #[error("entry `{0}` has an empty trajectory")]
    EmptyTrajectory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub observation: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: String,
    pub goal: String,
    pub trajectory: Vec<TrajectoryStep>,
    pub rationale: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub outcome: Outcome,
}

impl MemoryEntry {
    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.trajectory.iter().map(|s| s.action.as_str())
    }

    /// Plain-text rendering: goal, outcome, rationale, then each step.
    pub fn render(&self, with_observations: bool) -> String {
        let outcome = match self.outcome {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
        };
        let mut out = format!("[{}] goal: {}. outcome: {outcome}.", self.id, self.goal);
        if !self.rationale.is_empty() {
            out.push_str(&format!(" note: {}.", self.rationale));
        }
        for (i, s) in self.trajectory.iter().enumerate() {
            if with_observations {
                out.push_str(&format!("\n  {i}. {} > {}", s.observation, s.action));
            } else {
                out.push_str(&format!("\n  {i}. {}", s.action));
            }
        }
        out
    }
}

/// All pool entries, one block each.
pub fn render_pool(pool: &CandidatePool, with_observations: bool) -> String {
    if pool.is_empty() {
        return "(empty)".into();
    }
    pool.entries.iter().map(|e| e.render(with_observations)).collect::<Vec<_>>().join("\n")
}

/// Top-k retrieval result, sorted by descending score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub entries: Vec<MemoryEntry>,
    pub scores: Vec<f64>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBank {
    pub entries: Vec<MemoryEntry>,
    /// When set, `record_episode` appends each new entry to this JSONL file.
    pub path: Option<PathBuf>,
}

impl MemoryBank {
    pub fn new(entries: Vec<MemoryEntry>) -> Self {
        Self { entries, path: None }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Top-`k` entries by Jaccard similarity of lowercase token sets between
    /// `goal` and the entry goal plus tags. Ties go to the smaller id.
    pub fn retrieve(&self, goal: &str, k: usize) -> CandidatePool {
        self.retrieve_filtered(goal, k, |_| true)
    }

    pub fn retrieve_filtered(&self, goal: &str, k: usize, keep: impl Fn(&MemoryEntry) -> bool) -> CandidatePool {
        let query = word_set(goal);
        let mut scored: Vec<(f64, &MemoryEntry)> = self
            .entries
            .iter()
            .filter(|e| keep(e))
            .map(|e| {
                let mut keys = word_set(&e.goal);
                for t in &e.tags {
                    keys.extend(word_set(t));
                }
                (jaccard(&query, &keys), e)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        scored.truncate(k.max(1));
        CandidatePool {
            scores: scored.iter().map(|s| s.0).collect(),
            entries: scored.into_iter().map(|s| s.1.clone()).collect(),
        }
    }

    /// Appends a finished episode and returns its id. A colliding id gets a
    /// numeric suffix until it is unique.
    pub fn record_episode(
        &mut self,
        id: &str,
        goal: &str,
        trajectory: Vec<TrajectoryStep>,
        success: bool,
        rationale: &str,
        tags: Vec<String>,
    ) -> Result<String, MemoryError> {
        if trajectory.is_empty() {
            return Err(MemoryError::EmptyTrajectory(id.to_string()));
        }
        let mut unique = id.to_string();
        let mut n = 1;
        while self.contains_id(&unique) {
            unique = format!("{id}-{n}");
            n += 1;
        }
        let entry = MemoryEntry {
            id: unique.clone(),
            goal: goal.to_string(),
            trajectory,
            rationale: rationale.to_string(),
            tags,
            outcome: if success { Outcome::Success } else { Outcome::Failure },
        };
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(MemoryError::PersistFailure)?;
            writeln!(f, "{line}").map_err(MemoryError::PersistFailure)?;
        }
        self.entries.push(entry);
        Ok(unique)
    }

    /// One JSON object per line, in bank order.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(MemoryError::PersistFailure)
    }

    /// Loads a JSONL bank. Blank lines are skipped; line numbers are 1-based.
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path)?;
        let mut bank = Self::parse_jsonl(&text)?;
        bank.path = Some(path.to_path_buf());
        Ok(bank)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, MemoryError> {
        let mut entries: Vec<MemoryEntry> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: MemoryEntry = serde_json::from_str(line)
                .map_err(|err| MemoryError::Parse { line: i + 1, msg: err.to_string() })?;
            if e.trajectory.is_empty() {
                return Err(MemoryError::Parse { line: i + 1, msg: "empty trajectory".into() });
            }
            if !seen.insert(e.id.clone()) {
                return Err(MemoryError::Parse { line: i + 1, msg: format!("duplicate id `{}`", e.id) });
            }
            entries.push(e);
        }
        Ok(Self::new(entries))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, goal: &str) -> MemoryEntry {
        MemoryEntry {
            id: id.into(),
            goal: goal.into(),
            trajectory: vec![TrajectoryStep { observation: "o".into(), action: "goto desk".into() }],
            rationale: String::new(),
            tags: vec![],
            outcome: Outcome::Success,
        }
    }

    #[test]
    fn retrieve_hand_example() {
        let bank = MemoryBank::new(vec![entry("a", "heat apple"), entry("b", "clean mug")]);
        let pool = bank.retrieve("heat the apple", 1);
        assert_eq!(pool.entries[0].id, "a");
        assert!((pool.scores[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_goal_ranks_first_with_score_one() {
        let bank = MemoryBank::new(vec![entry("a", "clean mug"), entry("b", "heat apple")]);
        let pool = bank.retrieve("heat apple", 2);
        assert_eq!(pool.entries[0].id, "b");
        assert_eq!(pool.scores[0], 1.0);
        assert_eq!(pool.scores[1], 0.0);
    }

    #[test]
    fn ties_break_by_id() {
        let bank = MemoryBank::new(vec![entry("z", "x"), entry("a", "y")]);
        let pool = bank.retrieve("q", 2);
        assert_eq!(pool.entries[0].id, "a");
    }

    #[test]
    fn empty_bank_gives_empty_pool() {
        assert!(MemoryBank::default().retrieve("anything", 3).is_empty());
    }

    #[test]
    fn collisions_get_suffixes() {
        let mut bank = MemoryBank::default();
        let t = entry("x", "g").trajectory;
        let a = bank.record_episode("ep", "g", t.clone(), true, "", vec![]).unwrap();
        let b = bank.record_episode("ep", "g", t.clone(), false, "", vec![]).unwrap();
        let c = bank.record_episode("ep", "g", t, true, "", vec![]).unwrap();
        assert_eq!((a.as_str(), b.as_str(), c.as_str()), ("ep", "ep-1", "ep-2"));
        assert_eq!(bank.entries[1].outcome, Outcome::Failure);
    }

    #[test]
    fn bad_line_reports_number() {
        let good = serde_json::to_string(&entry("a", "g")).unwrap();
        let text = format!("{good}\n{{not json\n");
        match MemoryBank::parse_jsonl(&text) {
            Err(MemoryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
