//! Template expander: turns a selected memory entry into a one-action directive
//! for the current subgoal.

use crate::env::{Action, SubgoalVerb, LOCATIONS, OBJECTS};
use crate::env::Subgoal;
use crate::memory::MemoryEntry;
use crate::text::words;

use super::percept::{perceive, Percept};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    /// Next action in canonical text form.
    pub action: String,
    /// `(object, location)` read from the entry, for location subgoals.
    pub learned: Option<(String, String)>,
    pub entry_id: String,
}

/// Where the agent stood when it took step `i` of the entry.
fn location_at(entry: &MemoryEntry, i: usize) -> Option<String> {
    if let Some(l) = perceive(&entry.trajectory[i].observation).location {
        return Some(l);
    }
    entry.trajectory[..i].iter().rev().find_map(|s| match Action::parse(&s.action) {
        Some(Action::Goto(l)) => Some(LOCATIONS[l].to_string()),
        _ => None,
    })
}

fn verb_matches(a: &Action, verb: SubgoalVerb) -> bool {
    matches!(
        (a, verb),
        (Action::Clean(_), SubgoalVerb::Clean)
            | (Action::Heat(_), SubgoalVerb::Heat)
            | (Action::Cool(_), SubgoalVerb::Cool)
            | (Action::Examine(_), SubgoalVerb::Examine)
            | (Action::Put(..), SubgoalVerb::Put)
    )
}

/// Directive for `sub` backed by `entry`, or `None` when the entry carries no
/// usable evidence for it.
pub fn expand(sub: &Subgoal, entry: &MemoryEntry, here: &Percept) -> Option<Expansion> {
    let actions: Vec<Option<Action>> = entry.trajectory.iter().map(|s| Action::parse(&s.action)).collect();
    let at = |loc: &str| here.location.as_deref() == Some(loc);
    let (action, learned) = match sub.verb {
        SubgoalVerb::Find | SubgoalVerb::Take => {
            let i = actions
                .iter()
                .position(|a| matches!(a, Some(Action::Take(o)) if OBJECTS[*o] == sub.object))?;
            let loc = location_at(entry, i)?;
            let act = if at(&loc) { format!("take {}", sub.object) } else { format!("goto {loc}") };
            (act, Some((sub.object.clone(), loc)))
        }
        SubgoalVerb::Put => {
            actions.iter().flatten().find(|a| verb_matches(a, sub.verb))?;
            let dest = sub.dest.as_deref()?;
            let act = if at(dest) { format!("put {} {dest}", sub.object) } else { format!("goto {dest}") };
            (act, None)
        }
        verb => {
            let i = actions.iter().position(|a| a.as_ref().is_some_and(|a| verb_matches(a, verb)))?;
            let station = location_at(entry, i)?;
            let name = match verb {
                SubgoalVerb::Clean => "clean",
                SubgoalVerb::Heat => "heat",
                SubgoalVerb::Cool => "cool",
                _ => "examine",
            };
            let act = if at(&station) { format!("{name} {}", sub.object) } else { format!("goto {station}") };
            (act, None)
        }
    };
    Some(Expansion { action, learned, entry_id: entry.id.clone() })
}

/// Object and location words seen in the entry's observations that the
/// guidance text does not already mention, in first-seen order.
pub fn descriptor_words(entry: &MemoryEntry, guidance: &str) -> Vec<String> {
    let said: Vec<String> = words(guidance);
    let mut out: Vec<String> = Vec::new();
    for step in &entry.trajectory {
        for w in words(&step.observation) {
            let perceptual = OBJECTS.contains(&w.as_str()) || LOCATIONS.contains(&w.as_str());
            if perceptual && !said.contains(&w) && !out.contains(&w) {
                out.push(w);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::parse_subgoal;
    use crate::memory::{Outcome, TrajectoryStep};

    fn entry() -> MemoryEntry {
        let step = |o: &str, a: &str| TrajectoryStep { observation: o.into(), action: a.into() };
        MemoryEntry {
            id: "e1".into(),
            goal: "heat some apple and put it in desk".into(),
            trajectory: vec![
                step("x. task: t. you are at desk. you see book. you carry nothing.", "goto cabinet"),
                step("x. task: t. you are at cabinet. you see apple. you carry nothing.", "take apple"),
                step("x. task: t. you are at cabinet. you see nothing. you carry apple.", "goto microwave"),
                step("x. task: t. you are at microwave. you see nothing. you carry apple.", "heat apple"),
            ],
            rationale: "apples live in the cabinet".into(),
            tags: vec![],
            outcome: Outcome::Success,
        }
    }

    #[test]
    fn find_reads_location() {
        let sub = parse_subgoal("find apple").unwrap();
        let here = perceive("x. task: t. you are at desk. you see nothing. you carry nothing.");
        let e = expand(&sub, &entry(), &here).unwrap();
        assert_eq!(e.action, "goto cabinet");
        assert_eq!(e.learned, Some(("apple".into(), "cabinet".into())));
        let there = perceive("x. task: t. you are at cabinet. you see apple. you carry nothing.");
        assert_eq!(expand(&sub, &entry(), &there).unwrap().action, "take apple");
    }

    #[test]
    fn process_verb_uses_station() {
        let sub = parse_subgoal("heat apple").unwrap();
        let here = perceive("x. task: t. you are at cabinet. you see nothing. you carry apple.");
        assert_eq!(expand(&sub, &entry(), &here).unwrap().action, "goto microwave");
        assert!(expand(&parse_subgoal("cool apple").unwrap(), &entry(), &here).is_none());
        assert!(expand(&parse_subgoal("take mug").unwrap(), &entry(), &here).is_none());
    }

    #[test]
    fn descriptors_skip_guidance_words() {
        let d = descriptor_words(&entry(), "goto cabinet");
        assert_eq!(d, vec!["desk", "book", "apple", "microwave"]);
    }
}
