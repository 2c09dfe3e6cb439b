//! Shared domain types: problem instances, time grids, and phase-space
//! trajectories. All types are immutable values after construction and safe to
//! share across threads.

use serde::{Deserialize, Serialize};

/// One agent of the swarm. `state_dim` is the per-agent phase dimension
/// (position ⊕ velocity), so `control_dim = state_dim / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub radius: f64,
    pub drag_coeff: f64,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl AgentSpec {
    pub fn new(radius: f64, drag_coeff: f64, state_dim: usize) -> Self {
        AgentSpec {
            radius,
            drag_coeff,
            state_dim,
            control_dim: state_dim / 2,
        }
    }

    pub fn spatial_dim(&self) -> usize {
        self.state_dim / 2
    }
}

/// Static obstacle geometry. Distances are exact Euclidean distances to the
/// boundary; for `AxisBox` the distance is signed (negative inside).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Obstacle {
    Circle {
        center: Vec<f64>,
        radius: f64,
    },
    AxisBox {
        min_corner: Vec<f64>,
        max_corner: Vec<f64>,
    },
    SegmentWall {
        endpoints: [Vec<f64>; 2],
        half_width: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub domain_min: Vec<f64>,
    pub domain_max: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    pub spatial_dim: usize,
}

impl EnvironmentSpec {
    /// Obstacle-free square/cube `[-half, half]^d`.
    pub fn free(spatial_dim: usize, half: f64) -> Self {
        EnvironmentSpec {
            domain_min: vec![-half; spatial_dim],
            domain_max: vec![half; spatial_dim],
            obstacles: Vec::new(),
            spatial_dim,
        }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .zip(self.domain_min.iter().zip(self.domain_max.iter()))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

/// Weights of the running cost `c_v ||v||^2 + c_u ||u||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub velocity_weight: f64,
    pub control_weight: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            velocity_weight: 1.0,
            control_weight: 1.0,
        }
    }
}

/// One member of a parameterized problem family: agents, environment, boundary
/// states, and horizon. `x0`/`xT` hold one row of length `state_dim` per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub family_id: String,
    pub agents: Vec<AgentSpec>,
    pub env: EnvironmentSpec,
    pub x0: Vec<Vec<f64>>,
    pub x_t: Vec<Vec<f64>>,
    pub horizon: f64,
    pub seed: u64,
    #[serde(default)]
    pub cost: CostSpec,
}

impl ProblemInstance {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Per-agent phase dimension. Uniform across agents (validated).
    pub fn dx(&self) -> usize {
        self.agents.first().map_or(0, |a| a.state_dim)
    }

    /// Global half-dimension `n = N * dx`.
    pub fn half_dim(&self) -> usize {
        self.n_agents() * self.dx()
    }

    pub fn x0_flat(&self) -> Vec<f64> {
        self.x0.iter().flatten().copied().collect()
    }

    pub fn xt_flat(&self) -> Vec<f64> {
        self.x_t.iter().flatten().copied().collect()
    }

    /// Initial positions only, one row of `spatial_dim` per agent.
    pub fn positions0(&self) -> Vec<Vec<f64>> {
        let du = self.dx() / 2;
        self.x0.iter().map(|row| row[..du].to_vec()).collect()
    }
}

/// Strictly increasing sample times `t_0 = 0 < … < t_{nt-1} = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, count: usize) -> Self {
        assert!(count >= 2, "time grid needs at least two samples");
        let times = (0..count)
            .map(|j| horizon * j as f64 / (count - 1) as f64)
            .collect();
        TimeGrid { times }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    /// Same span refined `m`-fold: every interval split into m subintervals.
    pub fn refine(&self, m: usize) -> TimeGrid {
        assert!(m >= 1);
        let mut times = Vec::with_capacity((self.len() - 1) * m + 1);
        for w in self.times.windows(2) {
            for k in 0..m {
                times.push(w[0] + (w[1] - w[0]) * k as f64 / m as f64);
            }
        }
        times.push(*self.times.last().unwrap());
        TimeGrid { times }
    }

    pub fn is_valid(&self) -> bool {
        self.times.len() >= 2
            && self.times[0] == 0.0
            && self.times.windows(2).all(|w| w[1] > w[0])
    }
}

/// Sampled state–costate pair on a time grid, flat layout `[time][agent][component]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrajectory {
    pub grid: TimeGrid,
    pub n_agents: usize,
    pub dx: usize,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseTrajectory {
    pub fn zeros(grid: TimeGrid, n_agents: usize, dx: usize) -> Self {
        let len = grid.len() * n_agents * dx;
        PhaseTrajectory {
            grid,
            n_agents,
            dx,
            x: vec![0.0; len],
            p: vec![0.0; len],
        }
    }

    pub fn half_dim(&self) -> usize {
        self.n_agents * self.dx
    }

    /// Full state row (all agents) at sample `j`.
    pub fn x_at(&self, j: usize) -> &[f64] {
        let n = self.half_dim();
        &self.x[j * n..(j + 1) * n]
    }

    pub fn p_at(&self, j: usize) -> &[f64] {
        let n = self.half_dim();
        &self.p[j * n..(j + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.x.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// Latent trajectory `(y, q)` plus the exact latent velocities produced by the
/// right-space solver. For LQR variants the velocities equal `H · (y, q)`
/// pointwise; for the composed variant they are the exact time derivative of
/// the composed path instead.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub grid: TimeGrid,
    pub n_agents: usize,
    pub dx: usize,
    pub y: Vec<f64>,
    pub q: Vec<f64>,
    pub ydot: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl LatentTrajectory {
    pub fn zeros(grid: TimeGrid, n_agents: usize, dx: usize) -> Self {
        let len = grid.len() * n_agents * dx;
        LatentTrajectory {
            grid,
            n_agents,
            dx,
            y: vec![0.0; len],
            q: vec![0.0; len],
            ydot: vec![0.0; len],
            qdot: vec![0.0; len],
        }
    }

    pub fn half_dim(&self) -> usize {
        self.n_agents * self.dx
    }

    pub fn y_at(&self, j: usize) -> &[f64] {
        let n = self.half_dim();
        &self.y[j * n..(j + 1) * n]
    }

    pub fn q_at(&self, j: usize) -> &[f64] {
        let n = self.half_dim();
        &self.q[j * n..(j + 1) * n]
    }

    pub fn ydot_at(&self, j: usize) -> &[f64] {
        let n = self.half_dim();
        &self.ydot[j * n..(j + 1) * n]
    }

    pub fn qdot_at(&self, j: usize) -> &[f64] {
        let n = self.half_dim();
        &self.qdot[j * n..(j + 1) * n]
    }
}

/// One violated invariant, with enough indices to locate the offender.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    AgentRadius { agent: usize },
    AgentDrag { agent: usize },
    AgentDims { agent: usize },
    SpatialDim { dim: usize },
    ObstacleGeometry { obstacle: usize, reason: String },
    ObstacleOutsideDomain { obstacle: usize },
    BoundaryShape { which: String },
    PositionOutsideDomain { which: String, agent: usize },
    PairSeparation { a: usize, b: usize, gap: f64 },
    Horizon,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::AgentRadius { agent } => write!(f, "agent {agent}: radius must be > 0"),
            Violation::AgentDrag { agent } => write!(f, "agent {agent}: drag_coeff must be >= 0"),
            Violation::AgentDims { agent } => {
                write!(f, "agent {agent}: state_dim must be even with control_dim = state_dim/2 and match the environment")
            }
            Violation::SpatialDim { dim } => write!(f, "spatial_dim {dim} not in {{2,3}}"),
            Violation::ObstacleGeometry { obstacle, reason } => {
                write!(f, "obstacle {obstacle}: {reason}")
            }
            Violation::ObstacleOutsideDomain { obstacle } => {
                write!(f, "obstacle {obstacle}: geometry leaves the domain box")
            }
            Violation::BoundaryShape { which } => {
                write!(f, "{which}: wrong number of rows or row length")
            }
            Violation::PositionOutsideDomain { which, agent } => {
                write!(f, "{which}: agent {agent} position outside domain")
            }
            Violation::PairSeparation { a, b, gap } => {
                write!(f, "agents {a},{b}: initial gap {gap} below radius sum")
            }
            Violation::Horizon => write!(f, "horizon must be > 0"),
        }
    }
}

fn obstacle_extent(ob: &Obstacle) -> (Vec<f64>, Vec<f64>) {
    match ob {
        Obstacle::Circle { center, radius } => (
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        ),
        Obstacle::AxisBox {
            min_corner,
            max_corner,
        } => (min_corner.clone(), max_corner.clone()),
        Obstacle::SegmentWall {
            endpoints,
            half_width,
        } => {
            let lo = endpoints[0]
                .iter()
                .zip(endpoints[1].iter())
                .map(|(a, b)| a.min(*b) - half_width)
                .collect();
            let hi = endpoints[0]
                .iter()
                .zip(endpoints[1].iter())
                .map(|(a, b)| a.max(*b) + half_width)
                .collect();
            (lo, hi)
        }
    }
}

/// Check every instance invariant; an empty list means the instance is valid.
pub fn validate_instance(inst: &ProblemInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let sd = inst.env.spatial_dim;
    if sd != 2 && sd != 3 {
        out.push(Violation::SpatialDim { dim: sd });
    }
    if inst.env.domain_min.len() != sd
        || inst.env.domain_max.len() != sd
        || inst
            .env
            .domain_min
            .iter()
            .zip(inst.env.domain_max.iter())
            .any(|(lo, hi)| lo >= hi)
    {
        out.push(Violation::BoundaryShape {
            which: "domain".into(),
        });
    }
    if inst.horizon <= 0.0 {
        out.push(Violation::Horizon);
    }

    for (i, a) in inst.agents.iter().enumerate() {
        if !(a.radius > 0.0) {
            out.push(Violation::AgentRadius { agent: i });
        }
        if !(a.drag_coeff >= 0.0) {
            out.push(Violation::AgentDrag { agent: i });
        }
        if a.state_dim % 2 != 0 || a.control_dim != a.state_dim / 2 || a.state_dim != 2 * sd {
            out.push(Violation::AgentDims { agent: i });
        }
    }

    for (k, ob) in inst.env.obstacles.iter().enumerate() {
        let bad = match ob {
            Obstacle::Circle { center, radius } => {
                if !(*radius > 0.0) {
                    Some("circle radius must be > 0".to_string())
                } else if center.len() != sd {
                    Some("circle center dimension mismatch".to_string())
                } else {
                    None
                }
            }
            Obstacle::AxisBox {
                min_corner,
                max_corner,
            } => {
                if min_corner.len() != sd || max_corner.len() != sd {
                    Some("box corner dimension mismatch".to_string())
                } else if min_corner
                    .iter()
                    .zip(max_corner.iter())
                    .any(|(lo, hi)| lo >= hi)
                {
                    Some("box min_corner must be componentwise below max_corner".to_string())
                } else {
                    None
                }
            }
            Obstacle::SegmentWall {
                endpoints,
                half_width,
            } => {
                if endpoints[0].len() != sd || endpoints[1].len() != sd {
                    Some("wall endpoint dimension mismatch".to_string())
                } else if !(*half_width >= 0.0) {
                    Some("wall half_width must be >= 0".to_string())
                } else {
                    None
                }
            }
        };
        if let Some(reason) = bad {
            out.push(Violation::ObstacleGeometry {
                obstacle: k,
                reason,
            });
            continue;
        }
        let (lo, hi) = obstacle_extent(ob);
        let inside = lo
            .iter()
            .zip(inst.env.domain_min.iter())
            .all(|(x, d)| x >= d)
            && hi
                .iter()
                .zip(inst.env.domain_max.iter())
                .all(|(x, d)| x <= d);
        if !inside {
            out.push(Violation::ObstacleOutsideDomain { obstacle: k });
        }
    }

    let n = inst.agents.len();
    let dx = inst.dx();
    for (which, rows) in [("x0", &inst.x0), ("xT", &inst.x_t)] {
        if rows.len() != n || rows.iter().any(|r| r.len() != dx) {
            out.push(Violation::BoundaryShape {
                which: which.into(),
            });
            continue;
        }
        for (i, row) in rows.iter().enumerate() {
            if !inst.env.contains(&row[..sd.min(row.len())]) {
                out.push(Violation::PositionOutsideDomain {
                    which: which.into(),
                    agent: i,
                });
            }
        }
    }

    // Pairwise feasibility at t = 0.
    if inst.x0.len() == n && inst.x0.iter().all(|r| r.len() == dx) {
        for i in 0..n {
            for j in (i + 1)..n {
                let gap: f64 = inst.x0[i][..sd]
                    .iter()
                    .zip(inst.x0[j][..sd].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if gap <= inst.agents[i].radius + inst.agents[j].radius {
                    out.push(Violation::PairSeparation { a: i, b: j, gap });
                }
            }
        }
    }

    out
}
