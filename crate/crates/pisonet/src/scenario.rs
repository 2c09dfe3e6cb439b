//! Declarative problem families and deterministic instance sampling.
//!
//! Families mirror the benchmark scenarios: antipodal swaps in free space,
//! around a central circular obstacle (fixed or sampled radius), through a
//! serpentine maze, and heterogeneous-radius swarms in 2D and 3D.

use crate::decoder::ThetaComponent;
use crate::error::{Error, Result};
use crate::latent::LatentConfig;
use crate::phase::{
    validate_instance, AgentSpec, CostSpec, EnvironmentSpec, Obstacle, ProblemInstance,
};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DragLaw {
    None,
    Constant { k: f64 },
    /// `k_i = 1 / (50 r_i)`.
    InverseRadius,
}

impl DragLaw {
    pub fn coeff(&self, radius: f64) -> f64 {
        match self {
            DragLaw::None => 0.0,
            DragLaw::Constant { k } => *k,
            DragLaw::InverseRadius => 1.0 / (50.0 * radius),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownFamily(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    pub n_agents: usize,
    pub spatial_dim: usize,
    pub env: EnvironmentSpec,
    pub nominal_positions: Vec<Vec<f64>>,
    pub target_positions: Vec<Vec<f64>>,
    pub perturbation_radius: f64,
    pub agent_radius: f64,
    #[serde(default)]
    pub radius_range: Option<(f64, f64)>,
    /// Sampling range for the radius of `env.obstacles[0]` (a circle).
    #[serde(default)]
    pub obstacle_radius_range: Option<(f64, f64)>,
    pub drag: DragLaw,
    pub horizon: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub master_seed: u64,
    pub theta_encoding: Vec<ThetaComponent>,
    pub latent: LatentConfig,
    #[serde(default)]
    pub cost: CostSpec,
}

impl FamilySpec {
    pub fn dx(&self) -> usize {
        2 * self.spatial_dim
    }

    pub fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    pub fn encode(&self, inst: &ProblemInstance) -> Result<Vec<f64>> {
        crate::decoder::encode_theta(inst, &self.theta_encoding)
    }
}

/// Optional overrides applied on top of the family defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FamilyOverrides {
    pub master_seed: Option<u64>,
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    pub perturbation_radius: Option<f64>,
    pub horizon: Option<f64>,
    pub agent_radius: Option<f64>,
    pub drag: Option<DragLaw>,
}

fn circle_layout(n: usize, radius: f64, phase: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut start = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let ang = phase + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        start.push(vec![radius * ang.cos(), radius * ang.sin()]);
        target.push(vec![-radius * ang.cos(), -radius * ang.sin()]);
    }
    (start, target)
}

/// The serpentine maze walls: three slabs with alternating gaps.
pub fn maze_walls() -> Vec<Obstacle> {
    vec![
        Obstacle::AxisBox {
            min_corner: vec![-1.0, -0.40],
            max_corner: vec![0.55, -0.30],
        },
        Obstacle::AxisBox {
            min_corner: vec![-0.55, -0.05],
            max_corner: vec![1.0, 0.05],
        },
        Obstacle::AxisBox {
            min_corner: vec![-1.0, 0.30],
            max_corner: vec![0.55, 0.40],
        },
    ]
}

/// Wall-band y-intervals of the maze in traversal order, with the gap side
/// (+1 means the gap is at positive x).
pub fn maze_bands() -> Vec<((f64, f64), i8)> {
    vec![((-0.40, -0.30), 1), ((-0.05, 0.05), -1), ((0.30, 0.40), 1)]
}

pub fn make_family(name: &str, n_agents: usize, overrides: &FamilyOverrides) -> Result<FamilySpec> {
    let pi = std::f64::consts::PI;
    let mut spec = match name {
        "free" => {
            let (start, target) = circle_layout(n_agents, 0.5, 0.0);
            let (radius, pert) = if n_agents >= 56 { (0.016, 0.025) } else { (0.020, 0.05) };
            let (c_b, c_q) = match n_agents {
                0..=4 => (pi / 20.0, 1.0),
                5..=8 => (pi / 20.0, 0.1),
                9..=16 => (pi / 20.0, 0.05),
                _ => (pi / 10.0, 0.001),
            };
            FamilySpec {
                name: name.into(),
                n_agents,
                spatial_dim: 2,
                env: EnvironmentSpec::free(2, 1.0),
                nominal_positions: start,
                target_positions: target,
                perturbation_radius: pert,
                agent_radius: radius,
                radius_range: None,
                obstacle_radius_range: None,
                drag: DragLaw::Constant { k: 1.0 },
                horizon: 1.0,
                train_count: 100,
                test_count: 100,
                master_seed: 0,
                theta_encoding: vec![ThetaComponent::InitialPositions { lo: -1.0, hi: 1.0 }],
                latent: LatentConfig::lqr_rotation(c_b, c_q),
                cost: CostSpec::default(),
            }
        }
        "obstacle" => {
            let mut spec = make_family("free", n_agents, &FamilyOverrides::default())?;
            spec.name = name.into();
            spec.env.obstacles.push(Obstacle::Circle {
                center: vec![0.0, 0.0],
                radius: 0.15,
            });
            spec.perturbation_radius = if n_agents <= 8 { 0.10 } else { 0.05 };
            spec.latent = LatentConfig::lqr_rotation(pi / 20.0, 1.0);
            spec
        }
        "variable_radius_obstacle" => {
            let mut spec = make_family("obstacle", n_agents, &FamilyOverrides::default())?;
            spec.name = name.into();
            spec.perturbation_radius = 0.0;
            spec.obstacle_radius_range = Some((0.05, 0.25));
            spec.theta_encoding = vec![ThetaComponent::ObstacleRadius {
                index: 0,
                lo: 0.05,
                hi: 0.25,
            }];
            spec.latent = LatentConfig::lqr_rotation(-pi / 20.0, 1.0);
            spec.train_count = 50;
            spec.test_count = 50;
            spec
        }
        "heterogeneous_2d" => {
            let mut spec = make_family("obstacle", n_agents, &FamilyOverrides::default())?;
            spec.name = name.into();
            spec.perturbation_radius = 0.0;
            let range = if n_agents <= 4 { (0.01, 0.10) } else { (0.01, 0.05) };
            spec.radius_range = Some(range);
            spec.drag = DragLaw::InverseRadius;
            spec.theta_encoding = vec![ThetaComponent::AgentRadii { lo: range.0, hi: range.1 }];
            spec.latent = LatentConfig::lqr_rotation(pi / 20.0, 1.0);
            spec.train_count = 50;
            spec.test_count = 50;
            spec
        }
        "maze" => {
            let n = n_agents;
            let xs: Vec<f64> = (0..n)
                .map(|i| -0.75 + 1.5 * i as f64 / (n.max(2) - 1) as f64)
                .collect();
            let start: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x, -0.7]).collect();
            let target: Vec<Vec<f64>> = xs.iter().rev().map(|x| vec![*x, 0.7]).collect();
            let mut env = EnvironmentSpec::free(2, 1.0);
            env.obstacles = maze_walls();
            FamilySpec {
                name: name.into(),
                n_agents,
                spatial_dim: 2,
                env,
                nominal_positions: start,
                target_positions: target,
                perturbation_radius: 0.05,
                agent_radius: 0.02,
                radius_range: None,
                obstacle_radius_range: None,
                drag: DragLaw::Constant { k: 1.0 },
                horizon: 1.0,
                train_count: 100,
                test_count: 100,
                master_seed: 0,
                theta_encoding: vec![ThetaComponent::InitialPositions { lo: -1.0, hi: 1.0 }],
                latent: LatentConfig::lqr(1.0),
                cost: CostSpec::default(),
            }
        }
        "heterogeneous_3d" => {
            let n = n_agents;
            let mut start = Vec::with_capacity(n);
            let mut target = Vec::with_capacity(n);
            for i in 0..n {
                let ang = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let z = 2.0 + 3.0 * (i % 4) as f64 / 3.0;
                start.push(vec![4.5 * ang.cos(), 4.5 * ang.sin(), z]);
                target.push(vec![-4.5 * ang.cos(), -4.5 * ang.sin(), z]);
            }
            let env = EnvironmentSpec {
                domain_min: vec![-6.0, -6.0, 0.0],
                domain_max: vec![6.0, 6.0, 8.0],
                obstacles: vec![
                    Obstacle::AxisBox {
                        min_corner: vec![-2.0, -0.5, 0.0],
                        max_corner: vec![2.0, 0.5, 7.0],
                    },
                    Obstacle::AxisBox {
                        min_corner: vec![2.0, -1.0, 0.0],
                        max_corner: vec![4.0, 1.0, 4.0],
                    },
                ],
                spatial_dim: 3,
            };
            FamilySpec {
                name: name.into(),
                n_agents,
                spatial_dim: 3,
                env,
                nominal_positions: start,
                target_positions: target,
                perturbation_radius: 0.0,
                agent_radius: 0.15,
                radius_range: Some((0.1, 0.2)),
                obstacle_radius_range: None,
                drag: DragLaw::None,
                horizon: 1.0,
                train_count: 50,
                test_count: 50,
                master_seed: 0,
                theta_encoding: vec![ThetaComponent::AgentRadii { lo: 0.1, hi: 0.2 }],
                latent: LatentConfig::lqr(1.0),
                cost: CostSpec::default(),
            }
        }
        other => return Err(Error::UnknownFamily(other.to_string())),
    };

    if let Some(seed) = overrides.master_seed {
        spec.master_seed = seed;
    }
    if let Some(c) = overrides.train_count {
        spec.train_count = c;
    }
    if let Some(c) = overrides.test_count {
        spec.test_count = c;
    }
    if let Some(p) = overrides.perturbation_radius {
        spec.perturbation_radius = p;
    }
    if let Some(h) = overrides.horizon {
        spec.horizon = h;
    }
    if let Some(r) = overrides.agent_radius {
        spec.agent_radius = r;
    }
    if let Some(d) = overrides.drag {
        spec.drag = d;
    }
    Ok(spec)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_rng(master: u64, split: Split, index: usize, attempt: usize) -> ChaCha12Rng {
    let mut state = master;
    let a = splitmix(&mut state);
    state ^= split.tag();
    let b = splitmix(&mut state);
    state ^= index as u64;
    let c = splitmix(&mut state);
    state ^= attempt as u64;
    let d = splitmix(&mut state);
    ChaCha12Rng::seed_from_u64(a ^ b.rotate_left(17) ^ c.rotate_left(34) ^ d.rotate_left(51))
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; u clamped away from zero.
    let u: f64 = rng.random_range(1e-12..1.0);
    let v: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

/// Uniform draw from the d-ball of radius `r`.
fn ball_uniform(rng: &mut ChaCha12Rng, dim: usize, r: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let radius = r * rng.random_range(0.0..1.0f64).powf(1.0 / dim as f64);
    dir.into_iter().map(|x| x * radius / norm).collect()
}

/// Deterministic instance from `(master seed, split, index)`, rejection
/// resampled until it passes validation.
pub fn sample_instance(family: &FamilySpec, split: Split, index: usize) -> Result<ProblemInstance> {
    if index >= family.split_count(split) {
        return Err(Error::Mismatch(format!(
            "index {index} out of range for split with {} instances",
            family.split_count(split)
        )));
    }
    let sd = family.spatial_dim;
    let dx = family.dx();
    for attempt in 0..100 {
        let mut rng = stream_rng(family.master_seed, split, index, attempt);
        let mut env = family.env.clone();
        if let Some((lo, hi)) = family.obstacle_radius_range {
            if let Some(Obstacle::Circle { radius, .. }) = env.obstacles.first_mut() {
                *radius = rng.random_range(lo..hi);
            }
        }
        let radii: Vec<f64> = match family.radius_range {
            Some((lo, hi)) => (0..family.n_agents).map(|_| rng.random_range(lo..hi)).collect(),
            None => vec![family.agent_radius; family.n_agents],
        };
        let agents: Vec<AgentSpec> = radii
            .iter()
            .map(|r| AgentSpec::new(*r, family.drag.coeff(*r), dx))
            .collect();
        let mut x0 = Vec::with_capacity(family.n_agents);
        for nominal in &family.nominal_positions {
            let delta = if family.perturbation_radius > 0.0 {
                ball_uniform(&mut rng, sd, family.perturbation_radius)
            } else {
                vec![0.0; sd]
            };
            let mut row = vec![0.0; dx];
            for c in 0..sd {
                row[c] = nominal[c] + delta[c];
            }
            x0.push(row);
        }
        let x_t = family
            .target_positions
            .iter()
            .map(|pos| {
                let mut row = vec![0.0; dx];
                row[..sd].copy_from_slice(pos);
                row
            })
            .collect();
        let inst = ProblemInstance {
            family_id: family.name.clone(),
            agents,
            env,
            x0,
            x_t,
            horizon: family.horizon,
            seed: family.master_seed ^ (index as u64) ^ split.tag(),
            cost: family.cost,
        };
        if validate_instance(&inst).is_empty() {
            return Ok(inst);
        }
    }
    Err(Error::RejectionBudget {
        family: family.name.clone(),
        index,
    })
}

pub fn sample_set(family: &FamilySpec, split: Split) -> Result<Vec<ProblemInstance>> {
    (0..family.split_count(split))
        .map(|i| sample_instance(family, split, i))
        .collect()
}

/// The unperturbed nominal instance of a family (no sampling applied).
pub fn nominal_instance(family: &FamilySpec) -> ProblemInstance {
    let sd = family.spatial_dim;
    let dx = family.dx();
    let pad = |pos: &Vec<f64>| -> Vec<f64> {
        let mut row = vec![0.0; dx];
        row[..sd].copy_from_slice(pos);
        row
    };
    ProblemInstance {
        family_id: family.name.clone(),
        agents: (0..family.n_agents)
            .map(|_| {
                AgentSpec::new(
                    family.agent_radius,
                    family.drag.coeff(family.agent_radius),
                    dx,
                )
            })
            .collect(),
        env: family.env.clone(),
        x0: family.nominal_positions.iter().map(&pad).collect(),
        x_t: family.target_positions.iter().map(&pad).collect(),
        horizon: family.horizon,
        seed: family.master_seed,
        cost: family.cost,
    }
}
