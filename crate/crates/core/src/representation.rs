//! Agent-centred interaction representation: relative offsets of nearby
//! objects and how they change from one frame to the next.

use std::collections::HashMap;
use std::path::Path;

use crate::env::Cell;
use crate::error::{Error, Result};
use crate::tracker::ObjectView;

/// Ordered type pair; `agent` is always the controlled object's type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypePair {
    pub agent: u32,
    pub other: u32,
}

/// Offset of the other object from the agent, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InteractionState {
    pub pair: TypePair,
    pub dx: i32,
    pub dy: i32,
}

impl InteractionState {
    pub fn chebyshev(&self) -> i32 {
        self.dx.abs().max(self.dy.abs())
    }
}

/// What became of a nearby object one frame later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum After {
    Offset(InteractionState),
    /// Disappeared on the agent's new cell.
    Contact,
    /// Disappeared anywhere else.
    Vanished,
    /// Still present but beyond the interaction radius.
    OutOfRange,
}

impl After {
    pub fn ends_interaction(&self) -> bool {
        matches!(self, After::Contact | After::Vanished)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionEvent {
    pub agent_id: u64,
    pub other_id: u64,
    pub before: InteractionState,
    pub after: After,
    pub step: usize,
}

/// Type id of the object the agent controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentIdentity(pub u32);

/// Per-type motion statistics over a calibration episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionStats {
    pub type_id: u32,
    pub max_instances: usize,
    pub transitions: usize,
    pub moves: usize,
}

impl MotionStats {
    pub fn fraction(&self) -> f64 {
        if self.transitions == 0 {
            0.0
        } else {
            self.moves as f64 / self.transitions as f64
        }
    }
}

pub fn motion_stats(history: &[Vec<ObjectView>]) -> Vec<MotionStats> {
    let mut stats: HashMap<u32, MotionStats> = HashMap::new();
    for frame in history {
        let mut per_type: HashMap<u32, usize> = HashMap::new();
        for o in frame {
            *per_type.entry(o.type_id).or_default() += 1;
        }
        for (t, n) in per_type {
            let s = stats.entry(t).or_insert(MotionStats {
                type_id: t,
                max_instances: 0,
                transitions: 0,
                moves: 0,
            });
            s.max_instances = s.max_instances.max(n);
        }
    }
    for pair in history.windows(2) {
        for o in &pair[1] {
            if let Some(p) = pair[0].iter().find(|p| p.id == o.id && p.type_id == o.type_id) {
                let s = stats.get_mut(&o.type_id).expect("type seen above");
                s.transitions += 1;
                if p.cell != o.cell {
                    s.moves += 1;
                }
            }
        }
    }
    let mut out: Vec<MotionStats> = stats.into_values().collect();
    out.sort_by_key(|s| s.type_id);
    out
}

/// The single-instance type that moves in the largest fraction of frames.
pub fn identify_agent(history: &[Vec<ObjectView>], min_fraction: f64) -> Result<AgentIdentity> {
    if history.len() < 10 {
        return Err(Error::Calibration(format!("need at least 10 frames, got {}", history.len())));
    }
    let mut candidates: Vec<(u32, f64)> = motion_stats(history)
        .into_iter()
        .filter(|s| s.max_instances == 1)
        .map(|s| (s.type_id, s.fraction()))
        .filter(|&(_, f)| f >= min_fraction)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    match candidates.as_slice() {
        [] => Err(Error::Calibration("no single object moves in at least half the frames".into())),
        [(_, a), (_, b), ..] if a == b => Err(Error::Calibration(format!("two types tie at motion fraction {a:.3}"))),
        [(t, _), ..] => Ok(AgentIdentity(*t)),
    }
}

/// The agent object of a frame, if present exactly once.
pub fn find_agent(objects: &[ObjectView], agent: AgentIdentity) -> Option<ObjectView> {
    let mut it = objects.iter().filter(|o| o.type_id == agent.0);
    match (it.next(), it.next()) {
        (Some(a), None) => Some(*a),
        _ => None,
    }
}

/// Objects within Chebyshev radius `r` of the agent with their offsets.
pub fn nearby(objects: &[ObjectView], agent: AgentIdentity, r: i32) -> Vec<(ObjectView, InteractionState)> {
    let Some(a) = find_agent(objects, agent) else {
        return Vec::new();
    };
    objects
        .iter()
        .filter(|o| o.id != a.id)
        .filter_map(|o| {
            let state = offset_state(a, *o, agent);
            (state.chebyshev() <= r).then_some((*o, state))
        })
        .collect()
}

fn offset_state(a: ObjectView, o: ObjectView, agent: AgentIdentity) -> InteractionState {
    InteractionState {
        pair: TypePair {
            agent: agent.0,
            other: o.type_id,
        },
        dx: o.cell.x - a.cell.x,
        dy: o.cell.y - a.cell.y,
    }
}

/// One event per object near the agent in `prev`, describing where it is
/// relative to the agent in `cur`.
pub fn extract_interactions(
    prev: &[ObjectView],
    cur: &[ObjectView],
    agent: AgentIdentity,
    r: i32,
    step: usize,
) -> Vec<InteractionEvent> {
    let Some(a0) = find_agent(prev, agent) else {
        return Vec::new();
    };
    let a1 = cur
        .iter()
        .find(|o| o.id == a0.id)
        .copied()
        .or_else(|| find_agent(cur, agent));
    nearby(prev, agent, r)
        .into_iter()
        .map(|(o, before)| {
            let after = match (cur.iter().find(|c| c.id == o.id), a1) {
                (Some(now), Some(a1)) => {
                    let s = InteractionState {
                        pair: before.pair,
                        ..offset_state(a1, *now, agent)
                    };
                    if s.chebyshev() <= r && (s.dx, s.dy) != (0, 0) {
                        After::Offset(s)
                    } else {
                        After::OutOfRange
                    }
                }
                (Some(_), None) => After::OutOfRange,
                (None, Some(a1)) if a1.cell == o.cell => After::Contact,
                (None, _) => After::Vanished,
            };
            InteractionEvent {
                agent_id: a0.id,
                other_id: o.id,
                before,
                after,
                step,
            }
        })
        .collect()
}

/// Writes events with the reward of their step as CSV.
pub fn write_events_csv(path: impl AsRef<Path>, events: &[(InteractionEvent, i32)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "pair", "dx_before", "dy_before", "dx_after", "dy_after", "contact", "reward"])?;
    for (e, reward) in events {
        let (dxa, dya) = match e.after {
            After::Offset(s) => (s.dx.to_string(), s.dy.to_string()),
            _ => (String::new(), String::new()),
        };
        w.write_record([
            e.step.to_string(),
            format!("{}-{}", e.before.pair.agent, e.before.pair.other),
            e.before.dx.to_string(),
            e.before.dy.to_string(),
            dxa,
            dya,
            (e.after == After::Contact).to_string(),
            reward.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shifts every object by `(dx, dy)`; used to check translation invariance.
pub fn translate(objects: &[ObjectView], dx: i32, dy: i32) -> Vec<ObjectView> {
    objects
        .iter()
        .map(|o| ObjectView {
            cell: Cell::new(o.cell.x + dx, o.cell.y + dy),
            ..*o
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const AGENT: AgentIdentity = AgentIdentity(1);

    fn v(id: u64, t: u32, x: i32, y: i32) -> ObjectView {
        ObjectView {
            id,
            type_id: t,
            cell: Cell::new(x, y),
        }
    }

    #[test]
    fn approach_shrinks_offset() {
        let prev = [v(1, 1, 5, 5), v(2, 2, 5, 3)];
        let cur = [v(1, 1, 5, 4), v(2, 2, 5, 3)];
        let ev = extract_interactions(&prev, &cur, AGENT, 3, 0);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].before.dx, ev[0].before.dy), (0, -2));
        match ev[0].after {
            After::Offset(s) => assert_eq!((s.dx, s.dy), (0, -1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collection_is_contact() {
        let prev = [v(1, 1, 5, 5), v(2, 2, 5, 4)];
        let cur = [v(1, 1, 5, 4)];
        let ev = extract_interactions(&prev, &cur, AGENT, 3, 7);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].after, After::Contact);
        assert_eq!(ev[0].step, 7);
    }

    #[test]
    fn far_objects_are_ignored() {
        let prev = [v(1, 1, 0, 0), v(2, 2, 4, 0), v(3, 2, 9, 9)];
        assert!(extract_interactions(&prev, &prev, AGENT, 3, 0).is_empty());
        assert!(nearby(&prev, AGENT, 3).is_empty());
    }

    #[test]
    fn leaving_the_radius() {
        let prev = [v(1, 1, 5, 5), v(2, 2, 2, 5)];
        let cur = [v(1, 1, 6, 5), v(2, 2, 2, 5)];
        let ev = extract_interactions(&prev, &cur, AGENT, 3, 0);
        assert_eq!(ev[0].after, After::OutOfRange);
    }

    #[test]
    fn identifies_the_mover() {
        let mut history = Vec::new();
        for t in 0..20 {
            history.push(vec![v(1, 3, t % 10, 0), v(2, 1, 4, 4), v(3, 1, 6, 6), v(4, 2, 1, 1)]);
        }
        assert_eq!(identify_agent(&history, 0.5).unwrap(), AgentIdentity(3));

        let still: Vec<Vec<ObjectView>> = (0..20).map(|_| vec![v(1, 1, 0, 0), v(2, 2, 3, 3)]).collect();
        assert!(identify_agent(&still, 0.5).is_err());

        let tie: Vec<Vec<ObjectView>> = (0..20).map(|t| vec![v(1, 1, t % 2, 0), v(2, 2, 5, t % 2)]).collect();
        assert!(matches!(identify_agent(&tie, 0.5), Err(Error::Calibration(_))));

        assert!(identify_agent(&history[..5], 0.5).is_err());
    }

    #[test]
    fn translation_does_not_change_events() {
        let prev = [v(1, 1, 3, 3), v(2, 2, 4, 2), v(3, 5, 1, 3)];
        let cur = [v(1, 1, 4, 3), v(3, 5, 1, 3)];
        let a = extract_interactions(&prev, &cur, AGENT, 3, 0);
        let b = extract_interactions(&translate(&prev, 2, 3), &translate(&cur, 2, 3), AGENT, 3, 0);
        assert_eq!(a, b);
    }
}
