//! Scripted teacher compiler with privileged access to the simulator.
//!
//! Cascade: loop guard, then fold every subgoal the probe reports done, then
//! expand the first pool entry that has evidence for the (new) current subgoal.

use rand_chacha::ChaCha8Rng;

use crate::brief::{apply, BriefDelta, BriefOp, BriefState, Section};
use crate::env::{parse_subgoal, GroundTruth, ProbeAnswer, ProbeQuery};
use crate::memory::CandidatePool;
use crate::scalar::Scalar;

use super::expand::{expand, Expansion};
use super::percept::perceive;
use super::{loop_directive, Compiled, CompiledOutput, CompilerBackend, RuntimeState};

/// What the teacher decided, in the learned backend's decision space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherLabel {
    pub loop_guard: bool,
    pub folds: usize,
    /// Pool index of the entry used, `None` for no guidance.
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct OracleCompiler;

/// Belief op recording `object -> location` when the brief does not hold it yet.
pub fn location_belief(brief: &BriefState, learned: &Option<(String, String)>) -> Option<BriefOp> {
    let (obj, loc) = learned.as_ref()?;
    let key = format!("{obj}_loc");
    match brief.beliefs.get(&key) {
        None => Some(BriefOp::create(Section::Belief, key, loc.clone())),
        Some(v) if v != loc => Some(BriefOp::update(Section::Belief, key, loc.clone())),
        Some(_) => None,
    }
}

/// Applies one FOLD of the current subgoal to `brief`.
pub fn fold_once(brief: &BriefState) -> Option<(BriefOp, BriefState)> {
    let id = brief.current_subgoal.as_ref()?.id.clone();
    let op = BriefOp::fold(id);
    let next = apply(&BriefDelta::single(op.clone()), brief).ok()?;
    Some((op, next))
}

impl OracleCompiler {
    pub fn teach(
        &self,
        state: &RuntimeState,
        pool: &CandidatePool,
        probe: Option<&dyn GroundTruth>,
    ) -> (CompiledOutput, TeacherLabel) {
        if let Some(a) = state.looping_action() {
            let out = CompiledOutput::from_parts(Some(loop_directive(a)), Some("loop detected".into()), None);
            return (out, TeacherLabel { loop_guard: true, folds: 0, selected: None });
        }
        let mut brief = state.brief.clone();
        let mut ops = Vec::new();
        if let Some(probe) = probe {
            while let Some(cur) = &brief.current_subgoal {
                let done = matches!(
                    probe.probe(&ProbeQuery::SubgoalSatisfied(cur.description.clone())),
                    Ok(ProbeAnswer::Flag(true))
                );
                if !done {
                    break;
                }
                let Some((op, next)) = fold_once(&brief) else { break };
                ops.push(op);
                brief = next;
            }
        }
        let folds = ops.len();
        let here = perceive(&state.observation);
        let mut chosen: Option<(usize, Expansion)> = None;
        if let Some(sub) = brief.current_subgoal.as_ref().and_then(|c| parse_subgoal(&c.description)) {
            chosen = pool.entries.iter().enumerate().find_map(|(i, e)| expand(&sub, e, &here).map(|x| (i, x)));
        }
        let (guidance, reason) = match &chosen {
            Some((i, x)) => {
                if let Some(op) = location_belief(&brief, &x.learned) {
                    ops.push(op);
                }
                let rationale = &pool.entries[*i].rationale;
                let reason = if rationale.is_empty() { format!("from memory {}", x.entry_id) } else { rationale.clone() };
                (Some(x.action.clone()), Some(reason))
            }
            None if folds > 0 => (None, Some("subgoal completed".to_string())),
            None => (None, None),
        };
        let out = CompiledOutput::from_parts(guidance, reason, BriefDelta::new(ops));
        (out, TeacherLabel { loop_guard: false, folds, selected: chosen.map(|c| c.0) })
    }
}

impl<T: Scalar> CompilerBackend<T> for OracleCompiler {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn compile(
        &self,
        state: &RuntimeState,
        pool: &CandidatePool,
        probe: Option<&dyn GroundTruth>,
        _rng: &mut ChaCha8Rng,
    ) -> Compiled<T> {
        Compiled::plain(self.teach(state, pool, probe).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brief::init_brief;
    use crate::compiler::Variant;
    use crate::env::{reset, House, TaskFamily, TaskSpec, TaskTarget};
    use rand::SeedableRng;

    fn compile(state: &RuntimeState, pool: &CandidatePool, probe: Option<&dyn GroundTruth>) -> CompiledOutput {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        CompilerBackend::<f64>::compile(&OracleCompiler, state, pool, probe, &mut rng).output
    }

    #[test]
    fn loop_guard_fires() {
        let mut s = RuntimeState::new("o", init_brief("g", &["find banana"]).unwrap());
        for _ in 0..3 {
            s.push_action("take banana");
        }
        let out = compile(&s, &CandidatePool::default(), None);
        assert_eq!(out.variant, Variant::Experience);
        let g = out.guidance.unwrap();
        assert!(g.to_lowercase().contains("do not") && g.contains("take banana"));
    }

    #[test]
    fn empty_pool_is_noaction() {
        let s = RuntimeState::new("o", init_brief("g", &["find apple"]).unwrap());
        assert_eq!(compile(&s, &CandidatePool::default(), None).variant, Variant::NoAction);
    }

    #[test]
    fn satisfied_subgoal_folds() {
        let house = House::generate("h", 1);
        let target = TaskTarget { object: "apple".into(), second_object: None, receptacle: Some("desk".into()) };
        let spec = TaskSpec::new("t", &house, TaskFamily::PickPlace, target, 0);
        let (mut world, _, plan) = reset(&spec, &house, 0).unwrap();
        world.agent_location = house.home("apple").unwrap().to_string();
        let obs = crate::env::observe(&world, "ok.");
        let s = RuntimeState::new(obs, init_brief(&spec.goal, &plan).unwrap());
        let out = compile(&s, &CandidatePool::default(), Some(&world));
        assert_eq!(out.variant, Variant::Brief);
        assert_eq!(out.delta.as_ref().unwrap().ops.len(), 1);
        assert!(apply(out.delta.as_ref().unwrap(), &s.brief).is_ok());
    }
}
