//! Environments as seen by learners: a tabular MDP plus a feature table used
//! by the function approximators.

use crate::grid::{self, Action, CompiledGrid, GridSpec, Side};
use crate::mdp::{StepOutcome, TabularMdp, Transition};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Row-major `n_states x dim` observation table.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureTable {
    pub fn one_hot(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { dim: n, data }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// One-hot cell plus normalized step fraction.
    #[default]
    OneHot,
    /// `OneHot` plus wall/lava/goal indicators for the eight neighbouring cells.
    LocalView,
    /// Normalized `(x, y)`, step fraction and the `LocalView` neighbour
    /// indicators, without cell identity.
    Egocentric,
}

#[derive(Clone, Debug)]
pub struct Environment {
    pub name: String,
    pub mdp: Arc<TabularMdp>,
    pub features: Arc<FeatureTable>,
    /// Rollouts are truncated after this many steps.
    pub horizon: usize,
    pub grid: Option<Arc<CompiledGrid>>,
}

impl Environment {
    pub fn new(name: &str, mdp: TabularMdp, features: FeatureTable, horizon: usize) -> Result<Self> {
        if features.n_rows() != mdp.n_states() {
            return Err(Error::Shape {
                context: "feature table rows",
                expected: mdp.n_states(),
                got: features.n_rows(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            mdp: Arc::new(mdp),
            features: Arc::new(features),
            horizon,
            grid: None,
        })
    }

    pub fn from_grid(name: &str, spec: &GridSpec, encoding: Encoding) -> Result<Self> {
        let compiled = grid::compile_grid(spec)?;
        let features = grid_features(&compiled, encoding);
        let horizon = spec.n_max;
        let mut env = Self::new(name, compiled.mdp.clone(), features, horizon)?;
        env.grid = Some(Arc::new(compiled));
        Ok(env)
    }

    pub fn obs(&self, s: usize) -> &[f64] {
        self.features.row(s)
    }

    pub fn obs_dim(&self) -> usize {
        self.features.dim
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    pub fn gamma(&self) -> f64 {
        self.mdp.gamma
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.mdp.terminal[s]
    }

    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<StepOutcome> {
        self.mdp.step(s, a, rng)
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.mdp.sample_initial(rng)
    }
}

fn grid_features(compiled: &CompiledGrid, encoding: Encoding) -> FeatureTable {
    let spec = &compiled.spec;
    let n_cells = spec.n_cells();
    // Offsets of the cell block, the step fraction and the neighbour block.
    let (cell_dim, view) = match encoding {
        Encoding::OneHot => (n_cells, false),
        Encoding::LocalView => (n_cells, true),
        Encoding::Egocentric => (2, true),
    };
    let dim = cell_dim + 1 + if view { 24 } else { 0 };
    let n_states = compiled.mdp.n_states();
    let mut data = vec![0.0; n_states * dim];
    for s in 0..n_states {
        let Some((k, cell)) = compiled.decode(s) else {
            continue;
        };
        let row = &mut data[s * dim..(s + 1) * dim];
        if encoding == Encoding::Egocentric {
            row[0] = cell.0 as f64 / (spec.width - 1).max(1) as f64;
            row[1] = cell.1 as f64 / (spec.height - 1).max(1) as f64;
        } else {
            row[spec.cell_index(cell)] = 1.0;
        }
        row[cell_dim] = k as f64 / spec.n_max as f64;
        if view {
            let mut i = cell_dim + 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (x, y) = (cell.0 as i64 + dx, cell.1 as i64 + dy);
                    let inside = x >= 0 && y >= 0 && (x as usize) < spec.width && (y as usize) < spec.height;
                    let c = (x.max(0) as usize, y.max(0) as usize);
                    row[i] = f64::from(!inside || spec.walls.contains(&c));
                    row[i + 1] = f64::from(inside && spec.lava.contains(&c));
                    row[i + 2] = f64::from(inside && spec.goal.contains(&c));
                    i += 3;
                }
            }
        }
    }
    FeatureTable { dim, data }
}

/// State rewards of the continuing recovery grid, row-major over a 3x3 board.
pub const RECOVERY_REWARDS: [f64; 9] = [0.0, 0.1, 0.3, 0.2, 0.0, 0.6, 0.4, 0.7, 1.0];

/// A deterministic 3x3 continuing grid whose reward depends on the state only:
/// every move out of cell `s` pays `RECOVERY_REWARDS[s]`. No terminals, uniform
/// start distribution.
pub fn recovery_grid(gamma: f64, horizon: usize) -> Result<Environment> {
    let spec = GridSpec {
        width: 3,
        height: 3,
        walls: vec![],
        lava: vec![],
        goal: vec![(2, 2)],
        start: (0, 0),
        n_max: 9,
        slip_prob: 0.0,
        gamma,
    };
    let n = 9;
    let mut rows = Vec::with_capacity(n * grid::N_ACTIONS);
    for s in 0..n {
        for a in Action::ALL {
            let next = spec.cell_index(spec.move_from(spec.cell_of(s), a));
            rows.push(vec![Transition {
                next,
                prob: 1.0,
                reward: RECOVERY_REWARDS[s],
            }]);
        }
    }
    let mdp = TabularMdp::new(n, grid::N_ACTIONS, rows, gamma, vec![false; n], vec![1.0 / n as f64; n], 1.0)?;
    Environment::new("recovery_grid", mdp, FeatureTable::one_hot(n), horizon)
}

/// Named environment constructors used by configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    LavaCrossing {
        side: Side,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        encoding: Encoding,
    },
    FlowerMaze {
        side: Side,
        #[serde(default = "default_flower_size")]
        size: usize,
        #[serde(default)]
        encoding: Encoding,
    },
    Grid {
        spec: GridSpec,
        #[serde(default)]
        encoding: Encoding,
    },
    RecoveryGrid {
        #[serde(default = "default_recovery_gamma")]
        gamma: f64,
        #[serde(default = "default_recovery_horizon")]
        horizon: usize,
    },
}

fn default_size() -> usize {
    8
}

fn default_flower_size() -> usize {
    7
}

fn default_recovery_gamma() -> f64 {
    0.9
}

fn default_recovery_horizon() -> usize {
    10
}

impl EnvSpec {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvSpec::LavaCrossing { side, size, encoding } => {
                let spec = grid::build_lava_crossing(*side, *size)?;
                Environment::from_grid(&self.label(), &spec, *encoding)
            }
            EnvSpec::FlowerMaze { side, size, encoding } => {
                let spec = grid::build_flower_maze(*side, *size)?;
                Environment::from_grid(&self.label(), &spec, *encoding)
            }
            EnvSpec::Grid { spec, encoding } => Environment::from_grid("grid", spec, *encoding),
            EnvSpec::RecoveryGrid { gamma, horizon } => recovery_grid(*gamma, *horizon),
        }
    }

    pub fn label(&self) -> String {
        let side = |s: &Side| match s {
            Side::Middle => "m",
            Side::Right => "r",
            Side::Top => "t",
        };
        match self {
            EnvSpec::LavaCrossing { side: s, size, .. } => format!("lava_crossing_{}_{size}", side(s)),
            EnvSpec::FlowerMaze { side: s, size, .. } => format!("flower_maze_{}_{size}", side(s)),
            EnvSpec::Grid { .. } => "grid".into(),
            EnvSpec::RecoveryGrid { .. } => "recovery_grid".into(),
        }
    }

    /// Parses names like `lava_crossing_m`, `flower_maze_r` or `recovery_grid`.
    pub fn from_name(name: &str, size: Option<usize>) -> Result<Self> {
        let side = |c: &str| match c {
            "m" | "middle" => Ok(Side::Middle),
            "r" | "right" => Ok(Side::Right),
            "t" | "top" => Ok(Side::Top),
            other => Err(Error::Config(format!("unknown side {other:?}"))),
        };
        if let Some(rest) = name.strip_prefix("lava_crossing_") {
            return Ok(EnvSpec::LavaCrossing {
                side: side(rest)?,
                size: size.unwrap_or(8),
                encoding: Encoding::default(),
            });
        }
        if let Some(rest) = name.strip_prefix("flower_maze_") {
            return Ok(EnvSpec::FlowerMaze {
                side: side(rest)?,
                size: size.unwrap_or(7),
                encoding: Encoding::default(),
            });
        }
        if name == "recovery_grid" {
            return Ok(EnvSpec::RecoveryGrid {
                gamma: default_recovery_gamma(),
                horizon: default_recovery_horizon(),
            });
        }
        Err(Error::Config(format!("unknown environment {name:?}")))
    }

    pub fn with_encoding(&self, enc: Encoding) -> Self {
        let mut out = self.clone();
        match &mut out {
            EnvSpec::LavaCrossing { encoding, .. }
            | EnvSpec::FlowerMaze { encoding, .. }
            | EnvSpec::Grid { encoding, .. } => *encoding = enc,
            EnvSpec::RecoveryGrid { .. } => {}
        }
        out
    }

    /// The transfer target paired with this training environment, if any.
    pub fn transfer_target(&self) -> Option<Self> {
        match self {
            EnvSpec::LavaCrossing { side: Side::Middle, size, encoding } => Some(EnvSpec::LavaCrossing {
                side: Side::Right,
                size: *size,
                encoding: *encoding,
            }),
            EnvSpec::FlowerMaze { side: Side::Right, size, encoding } => Some(EnvSpec::FlowerMaze {
                side: Side::Top,
                size: *size,
                encoding: *encoding,
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lava_features_mark_neighbours() {
        let env = EnvSpec::LavaCrossing {
            side: Side::Middle,
            size: 5,
            encoding: Encoding::LocalView,
        }
        .build()
        .unwrap();
        let g = env.grid.as_ref().unwrap();
        let s = g.state(0, (0, 1));
        let obs = env.obs(s);
        assert_eq!(obs[g.spec.cell_index((0, 1))], 1.0);
        // Neighbour (0, 2) below is lava: dx=0, dy=1 is the 7th neighbour.
        let base = 25 + 1 + 6 * 3;
        assert_eq!(obs[base + 1], 1.0);
        assert!(env.obs(g.sink(grid::sink::GOAL)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn egocentric_features_share_views_across_cells() {
        let spec = |side| EnvSpec::LavaCrossing {
            side,
            size: 8,
            encoding: Encoding::Egocentric,
        };
        let (m, r) = (spec(Side::Middle).build().unwrap(), spec(Side::Right).build().unwrap());
        assert_eq!(m.obs_dim(), 27);
        let (gm, gr) = (m.grid.as_ref().unwrap(), r.grid.as_ref().unwrap());
        // Above the lava row, away from either opening, both grids look alike.
        assert_eq!(m.obs(gm.state(0, (2, 3))), r.obs(gr.state(0, (2, 3))));
        let o = r.obs(gr.state(4, (7, 3)));
        assert_eq!((o[0], o[1], o[2]), (1.0, 3.0 / 7.0, 4.0 / 256.0));
    }

    #[test]
    fn recovery_grid_is_deterministic_and_continuing() {
        let env = recovery_grid(0.9, 30).unwrap();
        assert_eq!(env.mdp.n_states(), 9);
        assert!(env.mdp.terminal.iter().all(|t| !t));
        for s in 0..9 {
            for a in 0..4 {
                assert_eq!(env.mdp.row(s, a).len(), 1);
                assert_eq!(env.mdp.reward(s, a), RECOVERY_REWARDS[s]);
            }
        }
    }

    #[test]
    fn env_spec_json_round_trip() {
        let spec = EnvSpec::from_name("lava_crossing_m", None).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: EnvSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        assert!(EnvSpec::from_name("mountain_car", None).is_err());
    }
}
