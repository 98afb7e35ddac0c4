//! Gridworlds with lava hazards and sparse, time-discounted goal rewards.
//!
//! Coordinates are `(x, y)` with `y` growing downward. Compiled grids index
//! states as `k * (width * height) + cell` for step counts `k < n_max`, over
//! every cell of the rectangle (walls included, they are simply unreachable),
//! followed by three absorbing sinks. Grids of equal size and `n_max`
//! therefore share one index space, which is what direct transfer needs.

use crate::mdp::{TabularMdp, Transition};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};

pub const N_ACTIONS: usize = 4;
pub const FLOWER_MAZE_LAYOUT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Middle,
    Right,
    Top,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<Cell>,
    #[serde(default)]
    pub lava: Vec<Cell>,
    pub goal: Vec<Cell>,
    pub start: Cell,
    pub n_max: usize,
    #[serde(default)]
    pub slip_prob: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.99
}

/// Default episode budget, following the MiniGrid convention `4 * size^2`.
pub fn default_n_max(size: usize) -> usize {
    4 * size * size
}

/// Undiscounted episode return for reaching the goal after `n` steps.
pub fn sparse_return(n: usize, n_max: usize) -> f64 {
    1.0 - 0.9 * n as f64 / n_max as f64
}

/// One horizontal lava row at `y = size / 2` with a single opening, start in
/// the top-left corner and goal in the bottom-right corner.
pub fn build_lava_crossing(side: Side, size: usize) -> Result<GridSpec> {
    if size < 5 {
        return Err(Error::InvalidSpec(format!("lava crossing needs size >= 5, got {size}")));
    }
    let opening = match side {
        Side::Middle => size / 2,
        Side::Right => size - 1,
        Side::Top => {
            return Err(Error::InvalidSpec("lava crossing openings are middle or right".into()))
        }
    };
    let row = size / 2;
    let lava = (0..size).filter(|&x| x != opening).map(|x| (x, row)).collect();
    Ok(GridSpec {
        width: size,
        height: size,
        walls: Vec::new(),
        lava,
        goal: vec![(size - 1, size - 1)],
        start: (0, 0),
        n_max: default_n_max(size),
        slip_prob: 0.0,
        gamma: default_gamma(),
    })
}

/// A central goal surrounded by a 3x3 chamber ring of walls with one entrance
/// cell, on the right or top side of the ring.
pub fn build_flower_maze(side: Side, size: usize) -> Result<GridSpec> {
    if size < 7 {
        return Err(Error::InvalidSpec(format!("flower maze needs size >= 7, got {size}")));
    }
    let c = size / 2;
    let entrance = match side {
        Side::Right => (c + 1, c),
        Side::Top => (c, c - 1),
        Side::Middle => {
            return Err(Error::InvalidSpec("flower maze entrances are right or top".into()))
        }
    };
    let mut walls = Vec::new();
    for y in c - 1..=c + 1 {
        for x in c - 1..=c + 1 {
            if (x, y) != (c, c) && (x, y) != entrance {
                walls.push((x, y));
            }
        }
    }
    Ok(GridSpec {
        width: size,
        height: size,
        walls,
        lava: Vec::new(),
        goal: vec![(c, c)],
        start: (0, 0),
        n_max: default_n_max(size),
        slip_prob: 0.0,
        gamma: default_gamma(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub name: String,
    pub train_env: GridSpec,
    pub test_env: GridSpec,
}

impl TransferPair {
    pub fn lava_crossing(size: usize) -> Result<Self> {
        Self::checked(
            "lava_crossing_m_to_r",
            build_lava_crossing(Side::Middle, size)?,
            build_lava_crossing(Side::Right, size)?,
        )
    }

    pub fn flower_maze(size: usize) -> Result<Self> {
        Self::checked(
            "flower_maze_r_to_t",
            build_flower_maze(Side::Right, size)?,
            build_flower_maze(Side::Top, size)?,
        )
    }

    pub fn checked(name: &str, train_env: GridSpec, test_env: GridSpec) -> Result<Self> {
        if train_env.width != test_env.width
            || train_env.height != test_env.height
            || train_env.n_max != test_env.n_max
        {
            return Err(Error::InvalidSpec(format!(
                "transfer pair {name}: grids differ in size or step budget"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            train_env,
            test_env,
        })
    }
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, (x, y): Cell) -> usize {
        y * self.width + x
    }

    pub fn cell_of(&self, index: usize) -> Cell {
        (index % self.width, index / self.width)
    }

    fn in_bounds(&self, (x, y): Cell) -> bool {
        x < self.width && y < self.height
    }

    /// Cell reached by a deterministic move; bumping into walls or the border
    /// leaves the agent in place.
    pub fn move_from(&self, cell: Cell, action: Action) -> Cell {
        let (dx, dy) = action.delta();
        let nx = cell.0 as i64 + dx;
        let ny = cell.1 as i64 + dy;
        if nx < 0 || ny < 0 {
            return cell;
        }
        let next = (nx as usize, ny as usize);
        if !self.in_bounds(next) || self.walls.contains(&next) {
            cell
        } else {
            next
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.n_max == 0 {
            return Err(Error::InvalidSpec("empty grid or zero step budget".into()));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidSpec(format!("slip_prob {} outside [0,1]", self.slip_prob)));
        }
        let cells = self.walls.iter().chain(&self.lava).chain(&self.goal).chain([&self.start]);
        if let Some(c) = cells.into_iter().find(|&&c| !self.in_bounds(c)) {
            return Err(Error::InvalidSpec(format!("cell {c:?} out of bounds")));
        }
        if self.goal.is_empty() {
            return Err(Error::InvalidSpec("grid has no goal".into()));
        }
        if self.walls.contains(&self.start) || self.lava.contains(&self.start) {
            return Err(Error::InvalidSpec("start lies on a wall or lava".into()));
        }
        if self.goal.iter().any(|g| self.walls.contains(g)) {
            return Err(Error::InvalidSpec("goal lies on a wall".into()));
        }
        if let Some(d) = self.shortest_path() {
            if d > self.n_max {
                return Err(Error::InvalidSpec(format!(
                    "n_max {} shorter than the shortest path {d}",
                    self.n_max
                )));
            }
        }
        Ok(())
    }

    /// Length of the shortest lava-free start-to-goal path, if any.
    pub fn shortest_path(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n_cells()];
        let mut queue = VecDeque::new();
        dist[self.cell_index(self.start)] = 0;
        queue.push_back(self.start);
        while let Some(cell) = queue.pop_front() {
            let d = dist[self.cell_index(cell)];
            if self.goal.contains(&cell) {
                return Some(d);
            }
            if self.lava.contains(&cell) {
                continue;
            }
            for a in Action::ALL {
                let next = self.move_from(cell, a);
                let i = self.cell_index(next);
                if dist[i] == usize::MAX {
                    dist[i] = d + 1;
                    queue.push_back(next);
                }
            }
        }
        None
    }
}

/// Sink offsets after the `n_max * n_cells` augmented states.
pub mod sink {
    pub const GOAL: usize = 0;
    pub const LAVA: usize = 1;
    pub const TIMEOUT: usize = 2;
    pub const COUNT: usize = 3;
}

#[derive(Clone, Debug)]
pub struct CompiledGrid {
    pub spec: GridSpec,
    pub mdp: TabularMdp,
    /// Set when no lava-free path connects start and goal.
    pub goal_unreachable: bool,
}

impl CompiledGrid {
    pub fn state(&self, step: usize, cell: Cell) -> usize {
        step * self.spec.n_cells() + self.spec.cell_index(cell)
    }

    pub fn sink(&self, which: usize) -> usize {
        self.spec.n_max * self.spec.n_cells() + which
    }

    /// `(step, cell)` of a non-sink state.
    pub fn decode(&self, s: usize) -> Option<(usize, Cell)> {
        let n = self.spec.n_cells();
        (s < self.spec.n_max * n).then(|| (s / n, self.spec.cell_of(s % n)))
    }
}

pub fn compile_grid(spec: &GridSpec) -> Result<CompiledGrid> {
    spec.validate()?;
    let n_cells = spec.n_cells();
    let n_aug = spec.n_max * n_cells;
    let n_states = n_aug + sink::COUNT;
    let goal_state = n_aug + sink::GOAL;
    let lava_state = n_aug + sink::LAVA;
    let timeout_state = n_aug + sink::TIMEOUT;
    let goals: BTreeSet<Cell> = spec.goal.iter().copied().collect();
    let lava: BTreeSet<Cell> = spec.lava.iter().copied().collect();

    let mut rows = Vec::with_capacity(n_states * N_ACTIONS);
    for s in 0..n_states {
        if s >= n_aug {
            for _ in 0..N_ACTIONS {
                rows.push(vec![Transition {
                    next: s,
                    prob: 1.0,
                    reward: 0.0,
                }]);
            }
            continue;
        }
        let k = s / n_cells;
        let cell = spec.cell_of(s % n_cells);
        for a in Action::ALL {
            let mut row = Vec::with_capacity(N_ACTIONS + 1);
            let mut push = |action: Action, prob: f64| {
                if prob == 0.0 {
                    return;
                }
                let next = spec.move_from(cell, action);
                let t = if goals.contains(&next) {
                    Transition {
                        next: goal_state,
                        prob,
                        reward: sparse_return(k + 1, spec.n_max),
                    }
                } else if lava.contains(&next) {
                    Transition {
                        next: lava_state,
                        prob,
                        reward: 0.0,
                    }
                } else if k + 1 == spec.n_max {
                    Transition {
                        next: timeout_state,
                        prob,
                        reward: 0.0,
                    }
                } else {
                    Transition {
                        next: (k + 1) * n_cells + spec.cell_index(next),
                        prob,
                        reward: 0.0,
                    }
                };
                row.push(t);
            };
            push(a, 1.0 - spec.slip_prob);
            for b in Action::ALL {
                push(b, spec.slip_prob / N_ACTIONS as f64);
            }
            rows.push(row);
        }
    }

    let mut terminal = vec![false; n_states];
    terminal[n_aug..].iter_mut().for_each(|t| *t = true);
    let mut initial = vec![0.0; n_states];
    initial[spec.cell_index(spec.start)] = 1.0;
    let keys = (0..n_states)
        .map(|s| if s < n_aug { s % n_cells } else { n_cells + (s - n_aug) })
        .collect();
    let mdp = TabularMdp::new(n_states, N_ACTIONS, rows, spec.gamma, terminal, initial, 1.0)?
        .with_state_keys(keys)?;
    Ok(CompiledGrid {
        spec: spec.clone(),
        mdp,
        goal_unreachable: spec.shortest_path().is_none(),
    })
}

/// ASCII rendering used by the CLI and in error messages.
pub fn render(spec: &GridSpec) -> String {
    let mut out = String::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let c = (x, y);
            let ch = if spec.start == c {
                'S'
            } else if spec.goal.contains(&c) {
                'G'
            } else if spec.walls.contains(&c) {
                '#'
            } else if spec.lava.contains(&c) {
                '~'
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lava_crossing_layouts() {
        let m = build_lava_crossing(Side::Middle, 5).unwrap();
        assert_eq!(m.lava.len(), 4);
        assert!(!m.lava.contains(&(2, 2)));
        assert_eq!(m.goal, vec![(4, 4)]);
        let r = build_lava_crossing(Side::Right, 5).unwrap();
        assert!(!r.lava.contains(&(4, 2)));
        let big = build_lava_crossing(Side::Middle, 8).unwrap();
        let openings = (0..8).filter(|&x| !big.lava.contains(&(x, 4))).count();
        assert_eq!(openings, 1);
        assert!(build_lava_crossing(Side::Middle, 4).is_err());
    }

    #[test]
    fn flower_variants_differ_only_in_entrance() {
        let r = build_flower_maze(Side::Right, 7).unwrap();
        let t = build_flower_maze(Side::Top, 7).unwrap();
        let rs: BTreeSet<_> = r.walls.iter().collect();
        let ts: BTreeSet<_> = t.walls.iter().collect();
        let diff: Vec<_> = rs.symmetric_difference(&ts).collect();
        assert_eq!(diff.len(), 2);
        assert!(!r.walls.contains(&(4, 3)));
        assert!(!t.walls.contains(&(3, 2)));
        assert!(build_flower_maze(Side::Top, 6).is_err());
    }

    #[test]
    fn unreachable_goal_is_flagged() {
        let mut spec = build_lava_crossing(Side::Middle, 5).unwrap();
        spec.lava.push((2, 2));
        let compiled = compile_grid(&spec).unwrap();
        assert!(compiled.goal_unreachable);
    }

    #[test]
    fn goal_reward_follows_step_count() {
        let spec = GridSpec {
            width: 2,
            height: 1,
            walls: vec![],
            lava: vec![],
            goal: vec![(1, 0)],
            start: (0, 0),
            n_max: 4,
            slip_prob: 0.0,
            gamma: 0.9,
        };
        let g = compile_grid(&spec).unwrap();
        for k in 0..4 {
            let row = g.mdp.row(g.state(k, (0, 0)), Action::Right as usize);
            assert_eq!(row[0].next, g.sink(sink::GOAL));
            assert!((row[0].reward - sparse_return(k + 1, 4)).abs() < 1e-15);
        }
        // Last budgeted step without reaching the goal times out.
        let row = g.mdp.row(g.state(3, (0, 0)), Action::Left as usize);
        assert_eq!(row[0].next, g.sink(sink::TIMEOUT));
    }
}
