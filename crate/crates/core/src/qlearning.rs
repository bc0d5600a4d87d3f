//! One tabular Q function per (agent type, other type) pair. Actions are
//! chosen by summing the Q values of every object currently in view.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::representation::{After, InteractionEvent, InteractionState, TypePair};

/// Placement of the discount in the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateForm {
    /// `Q += alpha * (r + gamma * max_a Q(s', a) - Q)`.
    Textbook,
    /// `Q += alpha * (r + gamma * (max_a Q(s', a) - Q))`.
    Printed,
}

impl UpdateForm {
    pub fn name(self) -> &'static str {
        match self {
            UpdateForm::Textbook => "textbook",
            UpdateForm::Printed => "printed",
        }
    }
}

impl FromStr for UpdateForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textbook" => Ok(UpdateForm::Textbook),
            "printed" => Ok(UpdateForm::Printed),
            _ => Err(Error::InvalidArgument(format!("unknown update form `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Interaction radius in cells (Chebyshev).
    pub radius: i32,
    pub epsilon: f64,
    pub update_form: UpdateForm,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            alpha: 0.1,
            gamma: 0.85,
            radius: 3,
            epsilon: 0.1,
            update_form: UpdateForm::Textbook,
        }
    }
}

impl QConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config("q.alpha must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("q.gamma must lie in [0, 1)".into()));
        }
        if self.radius < 1 {
            return Err(Error::Config("q.radius must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("q.epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QStore {
    pub alpha: f64,
    pub gamma: f64,
    pub form: UpdateForm,
    radius: i32,
    agent_type: u32,
    tables: BTreeMap<TypePair, Vec<f64>>,
}

impl QStore {
    pub fn new(cfg: &QConfig, agent_type: u32) -> Self {
        QStore {
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            form: cfg.update_form,
            radius: cfg.radius,
            agent_type,
            tables: BTreeMap::new(),
        }
    }

    pub fn radius(&self) -> i32 {
        self.radius
    }

    pub fn agent_type(&self) -> u32 {
        self.agent_type
    }

    pub fn pairs(&self) -> impl Iterator<Item = TypePair> + '_ {
        self.tables.keys().copied()
    }

    fn side(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    fn slot(&self, s: &InteractionState) -> Option<usize> {
        let r = self.radius;
        if s.dx.abs() > r || s.dy.abs() > r {
            return None;
        }
        Some(((s.dy + r) as usize * self.side() + (s.dx + r) as usize) * Action::COUNT)
    }

    pub fn q(&self, s: &InteractionState, a: Action) -> f64 {
        match (self.tables.get(&s.pair), self.slot(s)) {
            (Some(t), Some(i)) => t[i + a.index()],
            _ => 0.0,
        }
    }

    pub fn values(&self, s: &InteractionState) -> [f64; Action::COUNT] {
        let mut out = [0.0; Action::COUNT];
        if let (Some(t), Some(i)) = (self.tables.get(&s.pair), self.slot(s)) {
            out.copy_from_slice(&t[i..i + Action::COUNT]);
        }
        out
    }

    pub fn max_q(&self, s: &InteractionState) -> f64 {
        self.values(s).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn set(&mut self, s: &InteractionState, a: Action, value: f64) -> Result<()> {
        let i = self.slot(s).ok_or_else(|| Error::InvalidArgument(format!("offset ({}, {}) outside radius", s.dx, s.dy)))?;
        let len = self.side() * self.side() * Action::COUNT;
        self.tables.entry(s.pair).or_insert_with(|| vec![0.0; len])[i + a.index()] = value;
        Ok(())
    }

    /// Bootstrap value of the state after the event; removal ends the
    /// interaction and an object out of view contributes nothing.
    fn next_value(&self, after: &After) -> f64 {
        match after {
            After::Offset(s) => self.max_q(s),
            After::Contact | After::Vanished | After::OutOfRange => 0.0,
        }
    }

    pub fn q_update(&mut self, event: &InteractionEvent, action: Action, reward: i32) -> Result<f64> {
        let s = event.before;
        if s.pair.agent != self.agent_type {
            return Err(Error::InvalidArgument(format!(
                "pair ({}, {}) does not start with the agent type {}",
                s.pair.agent, s.pair.other, self.agent_type
            )));
        }
        let next = self.next_value(&event.after);
        let q = self.q(&s, action);
        let r = f64::from(reward);
        let updated = match self.form {
            UpdateForm::Textbook => q + self.alpha * (r + self.gamma * next - q),
            UpdateForm::Printed => q + self.alpha * (r + self.gamma * (next - q)),
        };
        self.set(&s, action, updated)?;
        Ok(updated)
    }

    /// Summed Q values over the relevant states, per action.
    pub fn summed(&self, relevant: &[InteractionState]) -> [f64; Action::COUNT] {
        let mut sum = [0.0; Action::COUNT];
        for s in relevant {
            for (acc, v) in sum.iter_mut().zip(self.values(s)) {
                *acc += v;
            }
        }
        sum
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# q store\n");
        let _ = writeln!(s, "alpha {}", self.alpha);
        let _ = writeln!(s, "gamma {}", self.gamma);
        let _ = writeln!(s, "form {}", self.form.name());
        let _ = writeln!(s, "radius {}", self.radius);
        let _ = writeln!(s, "agent_type {}", self.agent_type);
        let _ = writeln!(s, "# pair_agent pair_other dx dy action value");
        let r = self.radius;
        for (pair, table) in &self.tables {
            for dy in -r..=r {
                for dx in -r..=r {
                    let i = ((dy + r) as usize * self.side() + (dx + r) as usize) * Action::COUNT;
                    for a in Action::ALL {
                        let _ = writeln!(s, "q {} {} {dx} {dy} {a:?} {}", pair.agent, pair.other, table[i + a.index()]);
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |n: usize, d: &str| Error::format("q store", format!("line {}: {d}", n + 1));
        let mut header: BTreeMap<&str, &str> = BTreeMap::new();
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["q", rest @ ..] if rest.len() == 6 => records.push((n, rest.to_vec())),
                [key, value] => {
                    header.insert(key, value);
                }
                _ => return Err(bad(n, "unexpected record")),
            }
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| Error::format("q store", format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::format("q store", format!("bad `{k}`"))) };
        let cfg = QConfig {
            alpha: num("alpha")?,
            gamma: num("gamma")?,
            radius: num("radius")? as i32,
            epsilon: 0.0,
            update_form: get("form")?.parse()?,
        };
        let mut store = QStore::new(&cfg, num("agent_type")? as u32);
        for (n, r) in records {
            let int = |s: &str| s.parse::<i64>().map_err(|_| bad(n, "bad integer"));
            let action = match r[4] {
                "Up" => Action::Up,
                "Down" => Action::Down,
                "Left" => Action::Left,
                "Right" => Action::Right,
                _ => return Err(bad(n, "bad action")),
            };
            let value: f64 = r[5].parse().map_err(|_| bad(n, "bad value"))?;
            let state = InteractionState {
                pair: TypePair {
                    agent: int(r[0])? as u32,
                    other: int(r[1])? as u32,
                },
                dx: int(r[2])? as i32,
                dy: int(r[3])? as i32,
            };
            store.set(&state, action, value)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        QStore::from_text(&std::fs::read_to_string(path)?)
    }
}

/// The states whose tables matter at a step: one per object in view.
pub fn relevant_tables(events: &[InteractionEvent]) -> Vec<InteractionState> {
    events.iter().map(|e| e.before).collect()
}

/// Index of the largest value, ties broken uniformly at random.
pub fn argmax_random<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..values.len()).filter(|&i| values[i] == best).collect();
    ties[rng.gen_range(0..ties.len())]
}

/// Greedy on the summed Q values with probability `1 - epsilon`, otherwise
/// one of the other actions uniformly. Nothing in view means a uniformly
/// random move.
pub fn select_action<R: Rng + ?Sized>(store: &QStore, relevant: &[InteractionState], epsilon: f64, rng: &mut R) -> Action {
    if relevant.is_empty() {
        return Action::from_index(rng.gen_range(0..Action::COUNT));
    }
    let explore = epsilon > 0.0 && rng.gen_bool(epsilon);
    let greedy = argmax_random(&store.summed(relevant), rng);
    if explore {
        let k = rng.gen_range(0..Action::COUNT - 1);
        Action::from_index(if k >= greedy { k + 1 } else { k })
    } else {
        Action::from_index(greedy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStream;

    const CROSS: TypePair = TypePair { agent: 1, other: 2 };
    const CIRCLE: TypePair = TypePair { agent: 1, other: 3 };

    fn st(pair: TypePair, dx: i32, dy: i32) -> InteractionState {
        InteractionState { pair, dx, dy }
    }

    fn event(before: InteractionState, after: After) -> InteractionEvent {
        InteractionEvent {
            agent_id: 1,
            other_id: 2,
            before,
            after,
            step: 0,
        }
    }

    fn store(form: UpdateForm) -> QStore {
        QStore::new(
            &QConfig {
                gamma: 0.9,
                update_form: form,
                ..Default::default()
            },
            1,
        )
    }

    #[test]
    fn terminal_reward_from_zero() {
        for form in [UpdateForm::Printed, UpdateForm::Textbook] {
            let mut q = store(form);
            let s = st(CROSS, 0, -1);
            let v = q.q_update(&event(s, After::Contact), Action::Up, 1).unwrap();
            assert_eq!(v, 0.0 + 0.1 * (1.0 + 0.9 * (0.0 - 0.0)));
            assert_eq!(q.q(&s, Action::Up), 0.1);
        }
    }

    #[test]
    fn printed_form_fixed_point_example() {
        let mut q = store(UpdateForm::Printed);
        let s = st(CROSS, 0, -2);
        let s2 = st(CROSS, 0, -1);
        q.set(&s, Action::Up, 0.5).unwrap();
        q.set(&s2, Action::Left, 0.5).unwrap();
        let v = q.q_update(&event(s, After::Offset(s2)), Action::Up, 0).unwrap();
        assert_eq!(v, 0.5 + 0.1 * (0.0 + 0.9 * (0.5 - 0.5)));
    }

    #[test]
    fn repeated_contact_closed_forms() {
        let s = st(CROSS, 0, -1);
        let e = event(s, After::Contact);
        let mut t = store(UpdateForm::Textbook);
        let mut p = store(UpdateForm::Printed);
        for _ in 0..50 {
            t.q_update(&e, Action::Up, 1).unwrap();
            p.q_update(&e, Action::Up, 1).unwrap();
        }
        // Textbook: Q_n = 1 - (1 - alpha)^n.
        let tb = 1.0 - 0.9f64.powi(50);
        assert!((t.q(&s, Action::Up) - tb).abs() < 1e-12);
        assert!(tb > 0.99 && tb < 1.0);
        // Printed: Q_n = (1 - (1 - alpha gamma)^n) / gamma.
        let pr = (1.0 - 0.91f64.powi(50)) / 0.9;
        assert!((p.q(&s, Action::Up) - pr).abs() < 1e-12);
    }

    #[test]
    fn tables_are_independent() {
        let mut q = store(UpdateForm::Textbook);
        q.q_update(&event(st(CIRCLE, 1, 0), After::Contact), Action::Right, -1).unwrap();
        assert_eq!(q.pairs().collect::<Vec<_>>(), vec![CIRCLE]);
        assert_eq!(q.q(&st(CROSS, 1, 0), Action::Right), 0.0);
        let bad = event(st(TypePair { agent: 2, other: 1 }, 1, 0), After::Contact);
        assert!(q.q_update(&bad, Action::Up, 0).is_err());
    }

    #[test]
    fn greedy_and_summed_choices() {
        let mut rng = SeedStream::new(1).rng();
        let mut q = store(UpdateForm::Textbook);
        let a = st(CROSS, 0, -1);
        q.set(&a, Action::Up, 1.0).unwrap();
        assert_eq!(select_action(&q, &[a], 0.0, &mut rng), Action::Up);

        let b = st(CIRCLE, 0, -2);
        q.set(&b, Action::Up, -2.0).unwrap();
        for _ in 0..200 {
            assert_ne!(select_action(&q, &[a, b], 0.0, &mut rng), Action::Up);
        }
    }

    #[test]
    fn relevant_tables_follow_events() {
        let events = [
            event(st(CIRCLE, 1, 0), After::Contact),
            event(st(CIRCLE, -2, 1), After::Vanished),
            event(st(CROSS, 0, 3), After::OutOfRange),
        ];
        let rel = relevant_tables(&events);
        assert_eq!(rel.len(), 3);
        assert_eq!(rel.iter().filter(|s| s.pair == CIRCLE).count(), 2);
        assert!(relevant_tables(&[]).is_empty());
    }

    #[test]
    fn text_round_trip() {
        let mut q = store(UpdateForm::Printed);
        q.set(&st(CROSS, -3, 3), Action::Down, 0.123456789).unwrap();
        q.set(&st(CIRCLE, 1, 0), Action::Left, -0.75).unwrap();
        assert_eq!(QStore::from_text(&q.to_text()).unwrap(), q);
    }
}
