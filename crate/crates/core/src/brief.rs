//! Brief State: the structured runtime context the memory compiler maintains.
//!
//! A [`BriefState`] has two halves. The task-progress half is a subgoal pipeline
//! (completed, current, pending); the environment-belief half is an ordered
//! key/value map. States are immutable snapshots: [`apply`] returns a new state and
//! never touches its input.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BriefError {
    #[error("goal must not be empty")]
    EmptyGoal,
    #[error("subgoal description must not be empty")]
    EmptySubgoal,
    #[error("no {section} entry with key `{key}`")]
    MissingKey { section: Section, key: String },
    #[error("{section} key `{key}` already exists")]
    DuplicateKey { section: Section, key: String },
    #[error("no current subgoal to fold")]
    NothingToFold,
    #[error("malformed op: {0}")]
    InvalidOp(String),
    #[error("brief text parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalRecord {
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub completed_at: Option<u32>,
}

impl SubgoalRecord {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        Self { id: id.into(), description: description.into(), completed_at: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefState {
    pub goal: String,
    pub completed_subgoals: Vec<SubgoalRecord>,
    pub current_subgoal: Option<SubgoalRecord>,
    pub pending_subgoals: Vec<SubgoalRecord>,
    pub beliefs: IndexMap<String, String>,
    pub step_created: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Create,
    Update,
    Delete,
    Fold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Progress,
    Belief,
}

impl std::fmt::Display for Section {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Section::Progress => "progress",
            Section::Belief => "belief",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefOp {
    pub kind: OpKind,
    pub section: Section,
    pub key: String,
    #[serde(default)]
    pub value: Option<String>,
}

impl BriefOp {
    pub fn create(section: Section, key: impl Into<String>, value: impl Into<String>) -> Self {
        Self { kind: OpKind::Create, section, key: key.into(), value: Some(value.into()) }
    }

    pub fn update(section: Section, key: impl Into<String>, value: impl Into<String>) -> Self {
        Self { kind: OpKind::Update, section, key: key.into(), value: Some(value.into()) }
    }

    pub fn delete(section: Section, key: impl Into<String>) -> Self {
        Self { kind: OpKind::Delete, section, key: key.into(), value: None }
    }

    /// FOLD of the current subgoal. `key` may name the subgoal id or be empty.
    pub fn fold(key: impl Into<String>) -> Self {
        Self { kind: OpKind::Fold, section: Section::Progress, key: key.into(), value: None }
    }

    /// Structural checks that do not depend on the state.
    pub fn validate(&self) -> Result<(), BriefError> {
        match self.kind {
            OpKind::Create | OpKind::Update => {
                if self.value.is_none() {
                    return Err(BriefError::InvalidOp(format!("{:?} requires a value", self.kind)));
                }
                if self.key.trim().is_empty() {
                    return Err(BriefError::InvalidOp("key must not be empty".into()));
                }
            }
            OpKind::Delete => {
                if self.value.is_some() {
                    return Err(BriefError::InvalidOp("DELETE takes no value".into()));
                }
                if self.key.trim().is_empty() {
                    return Err(BriefError::InvalidOp("key must not be empty".into()));
                }
            }
            OpKind::Fold => {
                if self.value.is_some() {
                    return Err(BriefError::InvalidOp("FOLD takes no value".into()));
                }
                if self.section != Section::Progress {
                    return Err(BriefError::InvalidOp("FOLD is only valid on progress".into()));
                }
            }
        }
        Ok(())
    }
}

/// Non-empty list of ops, applied left to right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefDelta {
    pub ops: Vec<BriefOp>,
}

impl BriefDelta {
    /// Returns `None` for an empty op list; the empty update is expressed by the
    /// compiler output variant, not by an empty delta.
    pub fn new(ops: Vec<BriefOp>) -> Option<Self> {
        (!ops.is_empty()).then_some(Self { ops })
    }

    pub fn single(op: BriefOp) -> Self {
        Self { ops: vec![op] }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

/// Builds the initial state: the first subgoal is current, the rest pending.
pub fn init_brief<S: AsRef<str>>(goal: &str, subgoals: &[S]) -> Result<BriefState, BriefError> {
    let goal = goal.trim();
    if goal.is_empty() {
        return Err(BriefError::EmptyGoal);
    }
    let mut records = Vec::with_capacity(subgoals.len());
    for (i, s) in subgoals.iter().enumerate() {
        let d = s.as_ref().trim();
        if d.is_empty() {
            return Err(BriefError::EmptySubgoal);
        }
        records.push(SubgoalRecord::new(format!("s{}", i + 1), d));
    }
    let mut it = records.into_iter();
    let current = it.next();
    Ok(BriefState {
        goal: goal.to_string(),
        completed_subgoals: Vec::new(),
        current_subgoal: current,
        pending_subgoals: it.collect(),
        beliefs: IndexMap::new(),
        step_created: 0,
    })
}

impl BriefState {
    /// Same state re-stamped at `step`; FOLDs applied to it record this step.
    pub fn at_step(mut self, step: u32) -> Self {
        self.step_created = step;
        self
    }

    /// All subgoal ids in pipeline order.
    pub fn subgoal_ids(&self) -> impl Iterator<Item = &str> {
        self.completed_subgoals
            .iter()
            .chain(self.current_subgoal.iter())
            .chain(self.pending_subgoals.iter())
            .map(|s| s.id.as_str())
    }

    fn has_subgoal_id(&self, id: &str) -> bool {
        self.subgoal_ids().any(|s| s == id)
    }

    /// True when the three subgoal sets share no id and belief keys are non-empty.
    pub fn check_invariants(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        let disjoint = self.subgoal_ids().all(|id| seen.insert(id.to_string()));
        let stamped = self.completed_subgoals.iter().all(|s| s.completed_at.is_some())
            && self.current_subgoal.iter().all(|s| s.completed_at.is_none())
            && self.pending_subgoals.iter().all(|s| s.completed_at.is_none());
        let keys_ok = self.beliefs.keys().all(|k| !k.trim().is_empty());
        disjoint && stamped && keys_ok
    }

    /// Applies one op in place. Callers that need atomicity work on a clone.
    fn apply_op(&mut self, op: &BriefOp) -> Result<(), BriefError> {
        op.validate()?;
        let key = op.key.trim();
        match (op.kind, op.section) {
            (OpKind::Create, Section::Belief) => {
                if self.beliefs.contains_key(key) {
                    return Err(BriefError::DuplicateKey { section: Section::Belief, key: key.into() });
                }
                self.beliefs.insert(key.to_string(), op.value.clone().unwrap_or_default());
            }
            (OpKind::Update, Section::Belief) => match self.beliefs.get_mut(key) {
                Some(v) => *v = op.value.clone().unwrap_or_default(),
                None => {
                    return Err(BriefError::MissingKey { section: Section::Belief, key: key.into() })
                }
            },
            (OpKind::Delete, Section::Belief) => {
                if self.beliefs.shift_remove(key).is_none() {
                    return Err(BriefError::MissingKey { section: Section::Belief, key: key.into() });
                }
            }
            (OpKind::Create, Section::Progress) => {
                if self.has_subgoal_id(key) {
                    return Err(BriefError::DuplicateKey { section: Section::Progress, key: key.into() });
                }
                let desc = op.value.clone().unwrap_or_default();
                if desc.trim().is_empty() {
                    return Err(BriefError::EmptySubgoal);
                }
                self.pending_subgoals.push(SubgoalRecord::new(key, desc.trim()));
            }
            (OpKind::Update, Section::Progress) => {
                let desc = op.value.clone().unwrap_or_default();
                let rec = self
                    .current_subgoal
                    .iter_mut()
                    .chain(self.pending_subgoals.iter_mut())
                    .find(|s| s.id == key);
                match rec {
                    Some(r) => r.description = desc.trim().to_string(),
                    None => {
                        return Err(BriefError::MissingKey {
                            section: Section::Progress,
                            key: key.into(),
                        })
                    }
                }
            }
            (OpKind::Delete, Section::Progress) => {
                match self.pending_subgoals.iter().position(|s| s.id == key) {
                    Some(i) => {
                        self.pending_subgoals.remove(i);
                    }
                    None => {
                        return Err(BriefError::MissingKey {
                            section: Section::Progress,
                            key: key.into(),
                        })
                    }
                }
            }
            (OpKind::Fold, _) => {
                let Some(mut cur) = self.current_subgoal.take() else {
                    return Err(BriefError::NothingToFold);
                };
                if !key.is_empty() && key != cur.id {
                    let id = cur.id.clone();
                    self.current_subgoal = Some(cur);
                    return Err(BriefError::InvalidOp(format!(
                        "FOLD names `{key}` but current subgoal is `{id}`"
                    )));
                }
                cur.completed_at = Some(self.step_created);
                self.completed_subgoals.push(cur);
                if !self.pending_subgoals.is_empty() {
                    self.current_subgoal = Some(self.pending_subgoals.remove(0));
                }
            }
        }
        Ok(())
    }
}

/// `Apply(delta, state)`: ops left to right, fail-fast. The first failing op aborts
/// the whole delta; the input state is never modified.
pub fn apply(delta: &BriefDelta, state: &BriefState) -> Result<BriefState, BriefError> {
    let mut next = state.clone();
    for op in &delta.ops {
        next.apply_op(op)?;
    }
    Ok(next)
}

/// Lenient variant for model-emitted deltas: failing ops are skipped and reported
/// with their index.
pub fn apply_lenient(delta: &BriefDelta, state: &BriefState) -> (BriefState, Vec<(usize, BriefError)>) {
    let mut next = state.clone();
    let mut skipped = Vec::new();
    for (i, op) in delta.ops.iter().enumerate() {
        let mut trial = next.clone();
        match trial.apply_op(op) {
            Ok(()) => next = trial,
            Err(e) => {
                tracing::debug!(index = i, error = %e, "skipping brief op");
                skipped.push((i, e));
            }
        }
    }
    (next, skipped)
}

const NONE_MARK: &str = "(none)";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '=' => out.push_str("\\="),
            ']' => out.push_str("\\]"),
            '@' => out.push_str("\\@"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(ch) = it.next() {
        if ch == '\\' {
            match it.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(c) => out.push(c),
                None => out.push('\\'),
            }
        } else {
            out.push(ch);
        }
    }
    out
}

/// Finds the first occurrence of `pat` that is not preceded by an escape.
fn find_unescaped(s: &str, pat: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            i += 2;
            continue;
        }
        if s[i..].starts_with(pat) {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn render_record(rec: &SubgoalRecord) -> String {
    let mut s = format!("[{}] {}", escape(&rec.id), escape(&rec.description));
    if let Some(at) = rec.completed_at {
        s.push_str(&format!(" @{at}"));
    }
    s
}

fn parse_record(text: &str, line: usize) -> Result<SubgoalRecord, BriefError> {
    let err = |msg: &str| BriefError::Parse { line, msg: msg.to_string() };
    let rest = text.strip_prefix('[').ok_or_else(|| err("expected `[id]`"))?;
    let close = find_unescaped(rest, "]").ok_or_else(|| err("unterminated id"))?;
    let id = unescape(&rest[..close]);
    let mut body = rest[close + 1..].strip_prefix(' ').unwrap_or(&rest[close + 1..]);
    let mut completed_at = None;
    if let Some(at) = find_unescaped(body, " @") {
        let n = body[at + 2..].parse::<u32>().map_err(|_| err("bad completion step"))?;
        completed_at = Some(n);
        body = &body[..at];
    }
    Ok(SubgoalRecord { id, description: unescape(body), completed_at })
}

/// Line-oriented rendering with a fixed section order:
/// `GOAL`, `COMPLETED`, `CURRENT SUBGOAL`, `PENDING`, `BELIEFS`, `STEP`.
pub fn render_brief(state: &BriefState) -> String {
    let mut out = String::new();
    out.push_str(&format!("GOAL: {}\n", escape(&state.goal)));
    out.push_str("COMPLETED:\n");
    for rec in &state.completed_subgoals {
        out.push_str(&format!("- {}\n", render_record(rec)));
    }
    match &state.current_subgoal {
        Some(rec) => out.push_str(&format!("CURRENT SUBGOAL: {}\n", render_record(rec))),
        None => out.push_str(&format!("CURRENT SUBGOAL: {NONE_MARK}\n")),
    }
    out.push_str("PENDING:\n");
    for rec in &state.pending_subgoals {
        out.push_str(&format!("- {}\n", render_record(rec)));
    }
    out.push_str("BELIEFS:\n");
    for (k, v) in &state.beliefs {
        out.push_str(&format!("- {} = {}\n", escape(k), escape(v)));
    }
    out.push_str(&format!("STEP: {}\n", state.step_created));
    out
}

/// Inverse of [`render_brief`].
pub fn parse_brief(text: &str) -> Result<BriefState, BriefError> {
    #[derive(PartialEq)]
    enum Block {
        None,
        Completed,
        Pending,
        Beliefs,
    }
    let mut goal = None;
    let mut completed = Vec::new();
    let mut current = None;
    let mut pending = Vec::new();
    let mut beliefs = IndexMap::new();
    let mut step = 0;
    let mut block = Block::None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: &str| BriefError::Parse { line: line_no, msg: msg.to_string() };
        if raw.is_empty() {
            continue;
        }
        if let Some(rest) = raw.strip_prefix("- ") {
            match block {
                Block::Completed => completed.push(parse_record(rest, line_no)?),
                Block::Pending => pending.push(parse_record(rest, line_no)?),
                Block::Beliefs => {
                    let at = find_unescaped(rest, " = ").ok_or_else(|| err("expected `key = value`"))?;
                    beliefs.insert(unescape(&rest[..at]), unescape(&rest[at + 3..]));
                }
                Block::None => return Err(err("list item outside a section")),
            }
            continue;
        }
        if let Some(rest) = raw.strip_prefix("GOAL: ") {
            goal = Some(unescape(rest));
            block = Block::None;
        } else if raw == "COMPLETED:" {
            block = Block::Completed;
        } else if let Some(rest) = raw.strip_prefix("CURRENT SUBGOAL: ") {
            current = if rest == NONE_MARK { None } else { Some(parse_record(rest, line_no)?) };
            block = Block::None;
        } else if raw == "PENDING:" {
            block = Block::Pending;
        } else if raw == "BELIEFS:" {
            block = Block::Beliefs;
        } else if let Some(rest) = raw.strip_prefix("STEP: ") {
            step = rest.trim().parse().map_err(|_| err("bad step"))?;
            block = Block::None;
        } else {
            return Err(err("unrecognized line"));
        }
    }
    Ok(BriefState {
        goal: goal.ok_or(BriefError::Parse { line: 0, msg: "missing GOAL".into() })?,
        completed_subgoals: completed,
        current_subgoal: current,
        pending_subgoals: pending,
        beliefs,
        step_created: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat_apple() -> BriefState {
        init_brief("heat apple", &["find apple", "heat apple", "place apple"]).unwrap()
    }

    #[test]
    fn init_makes_first_subgoal_current() {
        let s = heat_apple();
        assert_eq!(s.current_subgoal.as_ref().unwrap().description, "find apple");
        assert_eq!(s.pending_subgoals.len(), 2);
        assert!(s.beliefs.is_empty());
        assert!(s.completed_subgoals.is_empty());
    }

    #[test]
    fn init_with_empty_plan() {
        let s = init_brief::<&str>("g", &[]).unwrap();
        assert!(s.current_subgoal.is_none());
        assert!(s.pending_subgoals.is_empty());
    }

    #[test]
    fn init_rejects_blank_goal() {
        assert_eq!(init_brief("  ", &["a"]).unwrap_err(), BriefError::EmptyGoal);
        assert_eq!(init_brief("g", &["a", " "]).unwrap_err(), BriefError::EmptySubgoal);
    }

    #[test]
    fn create_then_delete_restores_beliefs() {
        let s = heat_apple();
        let d = BriefDelta {
            ops: vec![
                BriefOp::create(Section::Belief, "apple_loc", "counter"),
                BriefOp::delete(Section::Belief, "apple_loc"),
            ],
        };
        assert_eq!(apply(&d, &s).unwrap().beliefs, s.beliefs);
    }

    #[test]
    fn fold_promotes_next_pending() {
        let s = init_brief("heat apple", &["find apple", "heat apple"]).unwrap().at_step(4);
        let next = apply(&BriefDelta::single(BriefOp::fold("")), &s).unwrap();
        assert_eq!(next.completed_subgoals.len(), 1);
        assert_eq!(next.completed_subgoals[0].description, "find apple");
        assert_eq!(next.completed_subgoals[0].completed_at, Some(4));
        assert_eq!(next.current_subgoal.unwrap().description, "heat apple");
        assert!(next.pending_subgoals.is_empty());
    }

    #[test]
    fn fold_with_empty_pending_exhausts_plan() {
        let s = init_brief("g", &["only"]).unwrap();
        let next = apply(&BriefDelta::single(BriefOp::fold("s1")), &s).unwrap();
        assert!(next.current_subgoal.is_none());
        let again = apply(&BriefDelta::single(BriefOp::fold("")), &next);
        assert_eq!(again.unwrap_err(), BriefError::NothingToFold);
    }

    #[test]
    fn update_missing_key_fails() {
        let s = heat_apple();
        let d = BriefDelta::single(BriefOp::update(Section::Belief, "mug_loc", "sink"));
        assert!(matches!(apply(&d, &s), Err(BriefError::MissingKey { .. })));
    }

    #[test]
    fn duplicate_create_fails() {
        let s = heat_apple();
        let d = BriefDelta {
            ops: vec![
                BriefOp::create(Section::Belief, "k", "a"),
                BriefOp::create(Section::Belief, "k", "b"),
            ],
        };
        assert!(matches!(apply(&d, &s), Err(BriefError::DuplicateKey { .. })));
    }

    #[test]
    fn failing_op_leaves_state_unchanged() {
        let s = heat_apple();
        let d = BriefDelta {
            ops: vec![BriefOp::create(Section::Belief, "a", "1"), BriefOp::delete(Section::Belief, "zzz")],
        };
        assert!(apply(&d, &s).is_err());
        let (lenient, skipped) = apply_lenient(&d, &s);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].0, 1);
        assert_eq!(lenient.beliefs.get("a").map(String::as_str), Some("1"));
    }

    #[test]
    fn keys_are_trimmed() {
        let s = heat_apple();
        let d = BriefDelta {
            ops: vec![
                BriefOp::create(Section::Belief, " mug_loc ", "sink"),
                BriefOp::update(Section::Belief, "mug_loc", "desk"),
            ],
        };
        assert_eq!(apply(&d, &s).unwrap().beliefs["mug_loc"], "desk");
    }

    #[test]
    fn progress_ops() {
        let s = heat_apple();
        let d = BriefDelta {
            ops: vec![
                BriefOp::create(Section::Progress, "s9", "wash hands"),
                BriefOp::update(Section::Progress, "s2", "heat the apple"),
                BriefOp::delete(Section::Progress, "s3"),
            ],
        };
        let next = apply(&d, &s).unwrap();
        let pending: Vec<_> = next.pending_subgoals.iter().map(|r| r.description.as_str()).collect();
        assert_eq!(pending, vec!["heat the apple", "wash hands"]);
        let dup = BriefDelta::single(BriefOp::create(Section::Progress, "s1", "again"));
        assert!(matches!(apply(&dup, &s), Err(BriefError::DuplicateKey { .. })));
    }

    #[test]
    fn structural_validation() {
        let bad = BriefOp { kind: OpKind::Fold, section: Section::Belief, key: String::new(), value: None };
        assert!(matches!(bad.validate(), Err(BriefError::InvalidOp(_))));
        let bad = BriefOp { kind: OpKind::Create, section: Section::Belief, key: "k".into(), value: None };
        assert!(bad.validate().is_err());
        assert!(BriefDelta::new(vec![]).is_none());
    }

    #[test]
    fn render_has_all_sections_and_round_trips() {
        let s = init_brief("g", &["a"]).unwrap();
        let text = render_brief(&s);
        for h in ["GOAL", "CURRENT SUBGOAL", "BELIEFS", "PENDING", "COMPLETED"] {
            assert!(text.contains(h), "missing {h}");
        }
        assert_eq!(parse_brief(&text).unwrap(), s);
    }

    #[test]
    fn render_escapes_awkward_text() {
        let mut s = heat_apple();
        s.beliefs.insert("odd = key]".into(), "multi\nline @ 3 \\ value".into());
        s.goal = "goal with [brackets] @7".into();
        let s = apply(&BriefDelta::single(BriefOp::fold("")), &s.at_step(3)).unwrap();
        let text = render_brief(&s);
        assert_eq!(parse_brief(&text).unwrap(), s);
        assert_eq!(render_brief(&parse_brief(&text).unwrap()), text);
    }

    #[test]
    fn json_field_names() {
        let s = heat_apple();
        let v = serde_json::to_value(&s).unwrap();
        for k in ["goal", "completed_subgoals", "current_subgoal", "pending_subgoals", "beliefs", "step_created"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        let d = BriefDelta::single(BriefOp::fold(""));
        let j = serde_json::to_string(&d).unwrap();
        assert_eq!(j, r#"{"ops":[{"kind":"FOLD","section":"progress","key":"","value":null}]}"#);
    }
}
