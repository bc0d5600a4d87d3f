//! Frame-to-frame object identities.
//!
//! Each (previous, current) pair is scored by
//! `L = w1 * L_dist + w2 * L_trans + w3 * L_neigh` and pairs are taken
//! greedily in descending `L`. Type 0 stands for "does not exist", so
//! appearances are `0 -> t` and disappearances `t -> 0` transitions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Cell;
use crate::error::{Error, Result};
use crate::symbols::DetectedObject;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub w_dist: f64,
    pub w_trans: f64,
    pub w_neigh: f64,
    /// Neighbour radius in cells (Euclidean).
    pub d_max: f64,
    pub l_min: f64,
    pub prior: f64,
    pub diagonal_prior: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            w_dist: 0.3,
            w_trans: 0.5,
            w_neigh: 0.2,
            d_max: 4.0,
            l_min: 0.3,
            prior: 1.0,
            diagonal_prior: 5.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_dist, self.w_trans, self.w_neigh];
        if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("tracker weights must be non-negative and sum to 1, got {w:?}")));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::Config("tracker.d_max must be positive".into()));
        }
        if !(self.l_min > 0.0 && self.l_min < 1.0) {
            return Err(Error::Config("tracker.l_min must lie in (0, 1)".into()));
        }
        if !(self.prior > 0.0) || self.diagonal_prior < 0.0 {
            return Err(Error::Config("tracker priors must be positive".into()));
        }
        Ok(())
    }
}

pub fn l_dist(a: Cell, b: Cell) -> f64 {
    1.0 / (1.0 + a.distance(b))
}

pub fn l_neigh(n1: usize, n2: usize) -> f64 {
    1.0 / (1.0 + n1.abs_diff(n2) as f64)
}

/// Counts of type-to-type transitions over types `0..=K`, smoothed by
/// priors.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    counts: Vec<Vec<f64>>,
    prior: f64,
    diagonal_prior: f64,
}

impl TransitionMatrix {
    /// Matrix over types `0..=k`.
    pub fn new(k: u32, prior: f64, diagonal_prior: f64) -> Self {
        let mut m = TransitionMatrix {
            counts: Vec::new(),
            prior,
            diagonal_prior,
        };
        m.ensure_type(k);
        m
    }

    pub fn from_config(k: u32, cfg: &MatchConfig) -> Self {
        TransitionMatrix::new(k, cfg.prior, cfg.diagonal_prior)
    }

    /// Number of types including type 0.
    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    /// Grows the matrix so that type `k` exists; new entries start at the
    /// prior.
    pub fn ensure_type(&mut self, k: u32) {
        let n = k as usize + 1;
        if n <= self.counts.len() {
            return;
        }
        for row in &mut self.counts {
            row.resize(n, self.prior);
        }
        while self.counts.len() < n {
            let i = self.counts.len();
            let mut row = vec![self.prior; n];
            row[i] += self.diagonal_prior;
            self.counts.push(row);
        }
    }

    pub fn count(&self, from: u32, to: u32) -> Result<f64> {
        self.check(from)?;
        self.check(to)?;
        Ok(self.counts[from as usize][to as usize])
    }

    fn check(&self, t: u32) -> Result<()> {
        if (t as usize) < self.counts.len() {
            Ok(())
        } else {
            Err(Error::UnknownType(t))
        }
    }

    /// Row-normalised transition probability.
    pub fn prob(&self, from: u32, to: u32) -> Result<f64> {
        self.check(from)?;
        self.check(to)?;
        let row = &self.counts[from as usize];
        Ok(row[to as usize] / row.iter().sum::<f64>())
    }

    pub fn row(&self, from: u32) -> Result<Vec<f64>> {
        self.check(from)?;
        let row = &self.counts[from as usize];
        let s: f64 = row.iter().sum();
        Ok(row.iter().map(|c| c / s).collect())
    }

    pub fn observe(&mut self, from: u32, to: u32) {
        self.ensure_type(from.max(to));
        self.counts[from as usize][to as usize] += 1.0;
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dimension {}\n", self.dim());
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, prior: f64, diagonal_prior: f64) -> Result<Self> {
        let bad = |d: &str| Error::format("transition matrix", d.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let dim: usize = header
            .strip_prefix("dimension ")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| bad("missing dimension header"))?;
        let counts = lines
            .map(|l| {
                l.split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| bad("bad count")))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        if counts.len() != dim || counts.iter().any(|r| r.len() != dim) {
            return Err(bad("rows do not match dimension"));
        }
        Ok(TransitionMatrix {
            counts,
            prior,
            diagonal_prior,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn l_trans(from: u32, to: u32, t: &TransitionMatrix) -> Result<f64> {
    t.prob(from, to)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedObject {
    pub id: u64,
    pub type_id: u32,
    pub cell: Cell,
    pub history: Vec<(u32, Cell)>,
}

/// A tracked object as seen in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectView {
    pub id: u64,
    pub type_id: u32,
    pub cell: Cell,
}

impl TrackedObject {
    pub fn view(&self) -> ObjectView {
        ObjectView {
            id: self.id,
            type_id: self.type_id,
            cell: self.cell,
        }
    }
}

/// Outcome of matching one frame against the previous one, by index into
/// the two input lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(prev index, cur index, L)`.
    pub assignments: Vec<(usize, usize, f64)>,
    pub appearances: Vec<usize>,
    pub disappearances: Vec<usize>,
}

fn neighbour_counts(cells: &[Cell], d_max: f64) -> Vec<usize> {
    cells
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            cells
                .iter()
                .enumerate()
                .filter(|&(j, &o)| j != i && c.distance(o) <= d_max)
                .count()
        })
        .collect()
}

/// Combined likelihood of every (prev, cur) pair, row-major over `prev`.
pub fn likelihoods(prev: &[(u32, Cell)], cur: &[(u32, Cell)], cfg: &MatchConfig, t: &TransitionMatrix) -> Result<Vec<f64>> {
    let pc: Vec<Cell> = prev.iter().map(|p| p.1).collect();
    let cc: Vec<Cell> = cur.iter().map(|p| p.1).collect();
    let np = neighbour_counts(&pc, cfg.d_max);
    let nc = neighbour_counts(&cc, cfg.d_max);
    let mut out = Vec::with_capacity(prev.len() * cur.len());
    for (i, &(pt, pcell)) in prev.iter().enumerate() {
        for (j, &(ct, ccell)) in cur.iter().enumerate() {
            let l = cfg.w_dist * l_dist(pcell, ccell) + cfg.w_trans * l_trans(pt, ct, t)? + cfg.w_neigh * l_neigh(np[i], nc[j]);
            out.push(l);
        }
    }
    Ok(out)
}

/// Greedy assignment in descending likelihood. Ties are resolved by the
/// lower previous index, then the lower current index.
pub fn match_objects(prev: &[(u32, Cell)], cur: &[(u32, Cell)], cfg: &MatchConfig, t: &TransitionMatrix) -> Result<MatchResult> {
    let l = likelihoods(prev, cur, cfg, t)?;
    let mut pairs: Vec<(usize, usize)> = (0..prev.len())
        .flat_map(|i| (0..cur.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| l[i * cur.len() + j] >= cfg.l_min)
        .collect();
    pairs.sort_by(|a, b| l[b.0 * cur.len() + b.1].total_cmp(&l[a.0 * cur.len() + a.1]).then(a.cmp(b)));
    let mut used_prev = vec![false; prev.len()];
    let mut used_cur = vec![false; cur.len()];
    let mut result = MatchResult::default();
    for (i, j) in pairs {
        if used_prev[i] || used_cur[j] {
            continue;
        }
        used_prev[i] = true;
        used_cur[j] = true;
        result.assignments.push((i, j, l[i * cur.len() + j]));
    }
    result.appearances = (0..cur.len()).filter(|&j| !used_cur[j]).collect();
    result.disappearances = (0..prev.len()).filter(|&i| !used_prev[i]).collect();
    Ok(result)
}

pub fn update_transitions(t: &mut TransitionMatrix, prev: &[(u32, Cell)], cur: &[(u32, Cell)], m: &MatchResult) {
    for &(i, j, _) in &m.assignments {
        t.observe(prev[i].0, cur[j].0);
    }
    for &j in &m.appearances {
        t.observe(0, cur[j].0);
    }
    for &i in &m.disappearances {
        t.observe(prev[i].0, 0);
    }
}

/// Identity changes produced by one tracker update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackEvents {
    /// `(id, type before, type after)`.
    pub moved: Vec<(u64, u32, u32)>,
    pub appeared: Vec<(u64, u32)>,
    pub disappeared: Vec<(u64, u32)>,
}

/// Tracker state for one episode.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: MatchConfig,
    matrix: TransitionMatrix,
    objects: Vec<TrackedObject>,
    next_id: u64,
    learn: bool,
}

impl Tracker {
    pub fn new(cfg: MatchConfig, matrix: TransitionMatrix) -> Self {
        Tracker {
            cfg,
            matrix,
            objects: Vec::new(),
            next_id: 1,
            learn: true,
        }
    }

    /// When off, the transition matrix is read but never updated.
    pub fn set_learning(&mut self, on: bool) {
        self.learn = on;
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> TransitionMatrix {
        self.matrix
    }

    pub fn objects(&self) -> &[TrackedObject] {
        &self.objects
    }

    pub fn snapshot(&self) -> Vec<ObjectView> {
        self.objects.iter().map(TrackedObject::view).collect()
    }

    /// Forgets all identities; the transition matrix is kept.
    pub fn reset(&mut self) {
        self.objects.clear();
        self.next_id = 1;
    }

    /// Matches `detections` against the current objects, using the matrix as
    /// it was before this frame, then folds the frame's events into it.
    pub fn update(&mut self, detections: &[DetectedObject]) -> Result<TrackEvents> {
        let obs: Vec<(u32, Cell)> = detections.iter().map(|d| (d.type_id, d.cell)).collect();
        self.update_cells(&obs)
    }

    pub fn update_cells(&mut self, cur: &[(u32, Cell)]) -> Result<TrackEvents> {
        if let Some(&(t, _)) = cur.iter().max_by_key(|o| o.0) {
            self.matrix.ensure_type(t);
        }
        let prev: Vec<(u32, Cell)> = self.objects.iter().map(|o| (o.type_id, o.cell)).collect();
        let m = match_objects(&prev, cur, &self.cfg, &self.matrix)?;
        if self.learn {
            update_transitions(&mut self.matrix, &prev, cur, &m);
        }

        let mut events = TrackEvents::default();
        let mut next: Vec<Option<TrackedObject>> = vec![None; cur.len()];
        let mut old: Vec<Option<TrackedObject>> = std::mem::take(&mut self.objects).into_iter().map(Some).collect();
        for &(i, j, _) in &m.assignments {
            let mut o = old[i].take().expect("each previous object is assigned once");
            let before = o.type_id;
            o.type_id = cur[j].0;
            o.cell = cur[j].1;
            o.history.push(cur[j]);
            events.moved.push((o.id, before, o.type_id));
            next[j] = Some(o);
        }
        for &j in &m.appearances {
            let id = self.next_id;
            self.next_id += 1;
            events.appeared.push((id, cur[j].0));
            next[j] = Some(TrackedObject {
                id,
                type_id: cur[j].0,
                cell: cur[j].1,
                history: vec![cur[j]],
            });
        }
        for &i in &m.disappearances {
            let o = old[i].take().expect("unassigned previous object");
            events.disappeared.push((o.id, o.type_id));
        }
        self.objects = next.into_iter().map(|o| o.expect("every detection is tracked")).collect();
        Ok(events)
    }
}
