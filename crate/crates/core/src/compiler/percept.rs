//! Reads the agent's situation back out of MiniHouse observation text.

use crate::env::parse_subgoal;
use crate::env::Subgoal;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Percept {
    pub location: Option<String>,
    pub visible: Vec<String>,
    pub carrying: Option<String>,
    pub carried_tags: Vec<String>,
}

fn clause<'a>(obs: &'a str, marker: &str) -> Option<&'a str> {
    let start = obs.find(marker)? + marker.len();
    let rest = &obs[start..];
    Some(rest[..rest.find('.').unwrap_or(rest.len())].trim())
}

pub fn perceive(obs: &str) -> Percept {
    let location = clause(obs, "you are at ").map(str::to_string);
    let visible = match clause(obs, "you see ") {
        Some("nothing") | None => vec![],
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    };
    let (carrying, carried_tags) = match clause(obs, "you carry ") {
        Some("nothing") | None => (None, vec![]),
        Some(c) => match c.split_once('(') {
            Some((name, tags)) => (
                Some(name.trim().to_string()),
                tags.trim_end_matches(')').split(',').map(|t| t.trim().to_string()).collect(),
            ),
            None => (Some(c.to_string()), vec![]),
        },
    };
    Percept { location, visible, carrying, carried_tags }
}

pub const SUBGOAL_FEATURES: usize = 8;

/// Observation features for judging whether `sub` is complete: object visible
/// or held, held, at destination, object seen at destination, held object
/// clean / hot / cold / examined.
pub fn subgoal_features(p: &Percept, sub: &Subgoal) -> [f64; SUBGOAL_FEATURES] {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let held = p.carrying.as_deref() == Some(sub.object.as_str());
    let seen = p.visible.iter().any(|v| *v == sub.object);
    let at_dest = sub.dest.is_some() && p.location == sub.dest;
    let tag = |t: &str| held && p.carried_tags.iter().any(|x| x == t);
    [
        b(seen || held),
        b(held),
        b(at_dest),
        b(at_dest && seen),
        b(tag("clean")),
        b(tag("hot")),
        b(tag("cold")),
        b(tag("examined")),
    ]
}

/// Features for a subgoal given as text; `None` if it does not parse.
pub fn subgoal_features_text(obs: &str, subgoal: &str) -> Option<(Subgoal, [f64; SUBGOAL_FEATURES])> {
    let sub = parse_subgoal(subgoal)?;
    let f = subgoal_features(&perceive(obs), &sub);
    Some((sub, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_observation() {
        let p = perceive("you heat the apple. task: heat some apple and put it in desk. you are at microwave. you see mug, cup. you carry apple (hot, clean).");
        assert_eq!(p.location.as_deref(), Some("microwave"));
        assert_eq!(p.visible, vec!["mug", "cup"]);
        assert_eq!(p.carrying.as_deref(), Some("apple"));
        assert_eq!(p.carried_tags, vec!["hot", "clean"]);
        let q = perceive("nothing happens. task: x. you are at desk. you see nothing. you carry nothing.");
        assert!(q.visible.is_empty() && q.carrying.is_none());
    }
}
