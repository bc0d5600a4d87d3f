//! Grid game with four layout variants, rendered to grayscale frames.
//!
//! The agent (`+`) moves on a 10x10 board and collects crosses (`x`, +1) and
//! circles (`o`, -1). Every cell is drawn as a 5x5 binary stencil, so a board
//! renders to a 50x50 frame. Frames are the only thing the learning pipeline
//! ever sees; [`WorldState::ground_truth`] exists for tests.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedStream;

/// Side length of a glyph stencil in pixels; one stencil per cell.
pub const STENCIL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    GridNeg,
    GridMixed,
    RandomNeg,
    RandomMixed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::GridNeg,
        Variant::GridMixed,
        Variant::RandomNeg,
        Variant::RandomMixed,
    ];

    pub fn is_grid(self) -> bool {
        matches!(self, Variant::GridNeg | Variant::GridMixed)
    }

    pub fn is_mixed(self) -> bool {
        matches!(self, Variant::GridMixed | Variant::RandomMixed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::GridNeg => "grid-neg",
            Variant::GridMixed => "grid-mixed",
            Variant::RandomNeg => "random-neg",
            Variant::RandomMixed => "random-mixed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Glyph {
    Agent,
    Cross,
    Circle,
}

const AGENT_STENCIL: [[u8; STENCIL]; STENCIL] = [
    [0, 0, 1, 0, 0],
    [0, 0, 1, 0, 0],
    [1, 1, 1, 1, 1],
    [0, 0, 1, 0, 0],
    [0, 0, 1, 0, 0],
];

const CROSS_STENCIL: [[u8; STENCIL]; STENCIL] = [
    [1, 0, 0, 0, 1],
    [0, 1, 0, 1, 0],
    [0, 0, 1, 0, 0],
    [0, 1, 0, 1, 0],
    [1, 0, 0, 0, 1],
];

const CIRCLE_STENCIL: [[u8; STENCIL]; STENCIL] = [
    [0, 1, 1, 1, 0],
    [1, 0, 0, 0, 1],
    [1, 0, 0, 0, 1],
    [1, 0, 0, 0, 1],
    [0, 1, 1, 1, 0],
];

impl Glyph {
    pub const ALL: [Glyph; 3] = [Glyph::Agent, Glyph::Cross, Glyph::Circle];

    pub fn stencil(self) -> &'static [[u8; STENCIL]; STENCIL] {
        match self {
            Glyph::Agent => &AGENT_STENCIL,
            Glyph::Cross => &CROSS_STENCIL,
            Glyph::Circle => &CIRCLE_STENCIL,
        }
    }

    /// Reward for walking into an object of this glyph.
    pub fn reward(self) -> i32 {
        match self {
            Glyph::Agent => 0,
            Glyph::Cross => 1,
            Glyph::Circle => -1,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Glyph::Agent => '+',
            Glyph::Cross => 'x',
            Glyph::Circle => 'o',
        }
    }
}

/// Board coordinates: `x` is the column, `y` the row, (0, 0) top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Cell {
    pub y: i32,
    pub x: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Cell::new(self.x + dx, self.y + dy)
    }

    pub fn distance(self, other: Cell) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

/// Board geometry and object counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    /// Objects placed in the random variants (half crosses in the mixed one).
    pub random_objects: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            width: 10,
            height: 10,
            random_objects: 12,
        }
    }
}

impl EnvConfig {
    pub fn frame_width(&self) -> usize {
        self.width * STENCIL
    }

    pub fn frame_height(&self) -> usize {
        self.height * STENCIL
    }

    pub fn center(&self) -> Cell {
        Cell::new((self.width / 2) as i32, (self.height / 2) as i32)
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.x >= 0 && cell.y >= 0 && (cell.x as usize) < self.width && (cell.y as usize) < self.height
    }

    /// Fixed layout of the grid variants: every cell with two odd
    /// coordinates except the centre, where the agent starts.
    pub fn lattice(&self, mixed: bool) -> Vec<(Cell, Glyph)> {
        let center = self.center();
        let mut out = Vec::new();
        for y in (1..self.height).step_by(2) {
            for x in (1..self.width).step_by(2) {
                let cell = Cell::new(x as i32, y as i32);
                if cell == center {
                    continue;
                }
                let checker = (x / 2 + y / 2) % 2 == 0;
                let glyph = if mixed && checker {
                    Glyph::Cross
                } else {
                    Glyph::Circle
                };
                out.push((cell, glyph));
            }
        }
        out
    }
}

/// A grayscale image, row-major, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Draws `glyph` with its top-left corner at pixel (`px`, `py`), clipped
    /// to the frame. Stencil pixels are written as 1.0; zeros leave the
    /// underlying pixel untouched.
    pub fn blit(&mut self, px: i64, py: i64, glyph: Glyph) {
        for (sy, row) in glyph.stencil().iter().enumerate() {
            for (sx, &on) in row.iter().enumerate() {
                if on == 0 {
                    continue;
                }
                let x = px + sx as i64;
                let y = py + sy as i64;
                if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                    continue;
                }
                self.pixels[y as usize * self.width + x as usize] = 1.0;
            }
        }
    }

    pub fn blit_cell(&mut self, cell: Cell, glyph: Glyph) {
        self.blit(
            i64::from(cell.x) * STENCIL as i64,
            i64::from(cell.y) * STENCIL as i64,
            glyph,
        );
    }

    pub fn count_nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0.0).count()
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Renders a list of glyphs, one per cell, onto a blank board.
pub fn render_scene(cfg: &EnvConfig, scene: &[(Cell, Glyph)]) -> Frame {
    let mut frame = Frame::zeros(cfg.frame_width(), cfg.frame_height());
    for &(cell, glyph) in scene {
        frame.blit_cell(cell, glyph);
    }
    frame
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: i32,
    pub frame: Frame,
    pub collected: Option<Glyph>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    cfg: EnvConfig,
    agent: Cell,
    objects: BTreeMap<Cell, Glyph>,
    steps: usize,
    episode_length: usize,
    score: i64,
    positives: usize,
    negatives: usize,
}

impl WorldState {
    /// Starts a fresh game. Grid variants ignore the seed.
    pub fn new_game(cfg: &EnvConfig, variant: Variant, seed: u64, episode_length: usize) -> Self {
        let mut objects = BTreeMap::new();
        let agent = if variant.is_grid() {
            objects.extend(cfg.lattice(variant.is_mixed()));
            cfg.center()
        } else {
            let mut rng = SeedStream::new(seed).rng();
            let cells = cfg.width * cfg.height;
            let n = cfg.random_objects.min(cells - 1);
            let picks = index::sample(&mut rng, cells, n + 1).into_vec();
            let to_cell = |i: usize| Cell::new((i % cfg.width) as i32, (i / cfg.width) as i32);
            let crosses = if variant.is_mixed() { n / 2 } else { 0 };
            for (k, &i) in picks[1..].iter().enumerate() {
                let glyph = if k < n - crosses {
                    Glyph::Circle
                } else {
                    Glyph::Cross
                };
                objects.insert(to_cell(i), glyph);
            }
            to_cell(picks[0])
        };
        WorldState {
            cfg: cfg.clone(),
            agent,
            objects,
            steps: 0,
            episode_length,
            score: 0,
            positives: 0,
            negatives: 0,
        }
    }

    /// A world with an explicit layout, for scripted scenarios.
    pub fn from_layout(
        cfg: &EnvConfig,
        agent: Cell,
        objects: impl IntoIterator<Item = (Cell, Glyph)>,
        episode_length: usize,
    ) -> Result<Self> {
        if !cfg.contains(agent) {
            return Err(Error::InvalidArgument(format!("agent {agent} is off the board")));
        }
        let mut map = BTreeMap::new();
        for (cell, glyph) in objects {
            if glyph == Glyph::Agent || !cfg.contains(cell) || cell == agent {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {glyph:?} at {cell}"
                )));
            }
            if map.insert(cell, glyph).is_some() {
                return Err(Error::InvalidArgument(format!("two objects at {cell}")));
            }
        }
        Ok(WorldState {
            cfg: cfg.clone(),
            agent,
            objects: map,
            steps: 0,
            episode_length,
            score: 0,
            positives: 0,
            negatives: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn agent(&self) -> Cell {
        self.agent
    }

    pub fn objects(&self) -> impl Iterator<Item = (Cell, Glyph)> + '_ {
        self.objects.iter().map(|(&c, &g)| (c, g))
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn score(&self) -> i64 {
        self.score
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn is_terminal(&self) -> bool {
        self.steps >= self.episode_length
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.is_terminal() {
            return Err(Error::EpisodeOver { steps: self.steps });
        }
        let (dx, dy) = action.delta();
        let target = self.agent.offset(dx, dy);
        if self.cfg.contains(target) {
            self.agent = target;
        }
        let collected = self.objects.remove(&self.agent);
        let reward = collected.map_or(0, Glyph::reward);
        match reward.signum() {
            1 => self.positives += 1,
            -1 => self.negatives += 1,
            _ => {}
        }
        self.score += i64::from(reward);
        self.steps += 1;
        Ok(StepOutcome {
            reward,
            frame: self.render(),
            collected,
            terminal: self.is_terminal(),
        })
    }

    pub fn render(&self) -> Frame {
        let mut frame = Frame::zeros(self.cfg.frame_width(), self.cfg.frame_height());
        for (&cell, &glyph) in &self.objects {
            frame.blit_cell(cell, glyph);
        }
        frame.blit_cell(self.agent, Glyph::Agent);
        frame
    }

    /// Every object on the board including the agent. Test oracle only.
    pub fn ground_truth(&self) -> Vec<(Cell, Glyph)> {
        let mut out: Vec<_> = self.objects().collect();
        out.push((self.agent, Glyph::Agent));
        out.sort();
        out
    }
}

/// Random board with `count` glyphs drawn uniformly from all three kinds.
pub fn random_scene<R: Rng + ?Sized>(cfg: &EnvConfig, count: usize, rng: &mut R) -> Vec<(Cell, Glyph)> {
    let cells = cfg.width * cfg.height;
    index::sample(rng, cells, count.min(cells))
        .into_iter()
        .map(|i| {
            let cell = Cell::new((i % cfg.width) as i32, (i / cfg.width) as i32);
            (cell, Glyph::ALL[rng.gen_range(0..3)])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn ones(g: Glyph) -> usize {
        g.stencil().iter().flatten().filter(|&&p| p == 1).count()
    }

    #[test]
    fn stencils_are_far_apart() {
        for (i, a) in Glyph::ALL.iter().enumerate() {
            for b in &Glyph::ALL[i + 1..] {
                let hamming = a
                    .stencil()
                    .iter()
                    .flatten()
                    .zip(b.stencil().iter().flatten())
                    .filter(|(p, q)| p != q)
                    .count();
                assert!(hamming >= 4, "{a:?} vs {b:?}: {hamming}");
            }
        }
    }

    #[test]
    fn grid_neg_layout_matches_enumeration() {
        let w = WorldState::new_game(&cfg(), Variant::GridNeg, 1, 100);
        // Odd x odd cells on a 10x10 board, minus the centre.
        let expected: HashSet<Cell> = (0..10)
            .flat_map(|y| (0..10).map(move |x| Cell::new(x, y)))
            .filter(|c| c.x % 2 == 1 && c.y % 2 == 1 && *c != Cell::new(5, 5))
            .collect();
        assert_eq!(w.object_count(), 24);
        assert_eq!(w.agent(), Cell::new(5, 5));
        let got: HashSet<Cell> = w.objects().map(|(c, _)| c).collect();
        assert_eq!(got, expected);
        assert!(w.objects().all(|(_, g)| g == Glyph::Circle));
    }

    #[test]
    fn grid_layout_ignores_seed() {
        let a = WorldState::new_game(&cfg(), Variant::GridNeg, 1, 100);
        let b = WorldState::new_game(&cfg(), Variant::GridNeg, 99, 100);
        assert_eq!(a, b);
    }

    #[test]
    fn grid_mixed_is_a_checkerboard() {
        let w = WorldState::new_game(&cfg(), Variant::GridMixed, 0, 100);
        let crosses = w.objects().filter(|(_, g)| *g == Glyph::Cross).count();
        assert_eq!(crosses, 12);
        assert_eq!(w.object_count() - crosses, 12);
        for (c, g) in w.objects() {
            // Lattice neighbours two cells apart alternate.
            if let Some(n) = w.objects.get(&c.offset(2, 0)) {
                assert_ne!(*n, g);
            }
            // Diagonal neighbours of the start cell are crosses.
            if c.chebyshev(Cell::new(5, 5)) == 2 && c.x != 5 && c.y != 5 {
                assert_eq!(g, Glyph::Cross);
            }
        }
    }

    #[test]
    fn random_variants_are_seeded() {
        for v in [Variant::RandomNeg, Variant::RandomMixed] {
            let a = WorldState::new_game(&cfg(), v, 42, 100);
            let b = WorldState::new_game(&cfg(), v, 42, 100);
            assert_eq!(a, b);
            assert_eq!(a.object_count(), 12);
            assert!(!a.objects.contains_key(&a.agent()));
        }
        let m = WorldState::new_game(&cfg(), Variant::RandomMixed, 3, 100);
        assert_eq!(m.objects().filter(|(_, g)| *g == Glyph::Cross).count(), 6);
        let layouts: HashSet<Vec<(Cell, Glyph)>> = (0..100)
            .map(|s| WorldState::new_game(&cfg(), Variant::RandomMixed, s, 100).ground_truth())
            .collect();
        assert!(layouts.len() >= 95);
    }

    #[test]
    fn free_move_and_edge_clamp() {
        let mut w = WorldState::from_layout(&cfg(), Cell::new(5, 5), [], 100).unwrap();
        let out = w.step(Action::Up).unwrap();
        assert_eq!(w.agent(), Cell::new(5, 4));
        assert_eq!(out.reward, 0);
        assert_eq!(out.collected, None);

        let mut w = WorldState::from_layout(&cfg(), Cell::new(0, 3), [], 100).unwrap();
        let out = w.step(Action::Left).unwrap();
        assert_eq!(w.agent(), Cell::new(0, 3));
        assert_eq!(out.reward, 0);
    }

    #[test]
    fn collecting_a_circle_costs_one() {
        let mut w =
            WorldState::from_layout(&cfg(), Cell::new(5, 5), [(Cell::new(5, 4), Glyph::Circle)], 100)
                .unwrap();
        let out = w.step(Action::Up).unwrap();
        assert_eq!(out.reward, -1);
        assert_eq!(out.collected, Some(Glyph::Circle));
        assert_eq!(w.object_count(), 0);
        assert_eq!((w.score(), w.negatives()), (-1, 1));
    }

    #[test]
    fn stepping_past_the_end_is_an_error() {
        let mut w = WorldState::from_layout(&cfg(), Cell::new(5, 5), [], 2).unwrap();
        assert!(!w.step(Action::Up).unwrap().terminal);
        assert!(w.step(Action::Up).unwrap().terminal);
        assert!(matches!(w.step(Action::Up), Err(Error::EpisodeOver { steps: 2 })));
    }

    #[test]
    fn render_counts() {
        let empty = Frame::zeros(50, 50);
        assert_eq!(render_scene(&cfg(), &[]), empty);

        let one = render_scene(&cfg(), &[(Cell::new(2, 7), Glyph::Circle)]);
        assert_eq!(one.count_nonzero(), ones(Glyph::Circle));
        assert!(one.pixels.iter().all(|&p| p == 0.0 || p == 1.0));

        let w = WorldState::new_game(&cfg(), Variant::GridNeg, 0, 100);
        let f = w.render();
        assert_eq!((f.width, f.height), (50, 50));
        assert_eq!(f.count_nonzero(), 24 * ones(Glyph::Circle) + ones(Glyph::Agent));
    }

    #[test]
    fn ground_truth_tracks_collection() {
        let w = WorldState::from_layout(&cfg(), Cell::new(4, 4), [], 10).unwrap();
        assert_eq!(w.ground_truth(), vec![(Cell::new(4, 4), Glyph::Agent)]);

        let mut w = WorldState::new_game(&cfg(), Variant::GridNeg, 0, 100);
        w.step(Action::Right).unwrap();
        w.step(Action::Right).unwrap();
        let gt = w.ground_truth();
        assert_eq!(gt.iter().filter(|(_, g)| *g == Glyph::Circle).count(), 23);
        assert_eq!(gt.iter().filter(|(_, g)| *g == Glyph::Agent).count(), 1);
    }

    #[test]
    fn ground_truth_agrees_with_render() {
        let mut rng = SeedStream::new(5).rng();
        for s in 0..100 {
            let v = Variant::ALL[s % 4];
            let mut w = WorldState::new_game(&cfg(), v, s as u64, 100);
            for _ in 0..rng.gen_range(0..30) {
                w.step(Action::ALL[rng.gen_range(0..4)]).unwrap();
            }
            let expected: usize = w.ground_truth().iter().map(|(_, g)| ones(*g)).sum();
            assert_eq!(w.render().count_nonzero(), expected);
        }
    }

    #[test]
    fn pgm_header_and_payload() {
        let mut f = Frame::zeros(3, 2);
        f.pixels[1] = 1.0;
        f.pixels[4] = 0.5;
        let bytes = f.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 255, 0, 0, 128, 0]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("grid".parse::<Variant>().is_err());
    }
}
