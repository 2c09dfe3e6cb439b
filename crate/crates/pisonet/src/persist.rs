//! Checkpoint and trajectory file formats.
//!
//! Checkpoints are `PISN` + version, a JSON metadata block, then the raw
//! little-endian weight payload guarded by a CRC32. Trajectories are CSV with
//! one row per (time sample, agent) plus a JSON sidecar carrying the instance
//! digest and metrics.

use crate::decoder::{count_parameters, DecoderConfig, DecoderWeights, WEIGHTS_VERSION};
use crate::error::{Error, Result};
use crate::eval::InstanceMetrics;
use crate::hamiltonian::conjugate_control;
use crate::latent::LatentConfig;
use crate::phase::{PhaseTrajectory, ProblemInstance, TimeGrid};
use crate::scenario::FamilySpec;
use crate::train::AnnealState;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PISN";

/// FNV-1a 64-bit over the canonical JSON encoding.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xffff_ffff;
    for b in bytes {
        crc ^= *b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub final_loss: f64,
    pub adam_steps: usize,
    pub lbfgs_steps: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub decoder: DecoderConfig,
    pub n_agents: usize,
    pub dx: usize,
    pub theta_dim: usize,
    pub family_name: String,
    pub family_digest: String,
    pub latent: LatentConfig,
    pub anneal: AnnealState,
    pub training: TrainingSummary,
    /// Conditioning vector of the nominal instance; used when the checkpoint
    /// serves as a frozen map inside a composed latent solver.
    #[serde(default)]
    pub nominal_theta: Vec<f64>,
}

impl CheckpointMeta {
    pub fn for_family(
        family: &FamilySpec,
        weights: &DecoderWeights,
        latent: &LatentConfig,
        anneal: AnnealState,
        training: TrainingSummary,
        nominal_theta: Vec<f64>,
    ) -> Self {
        CheckpointMeta {
            decoder: weights.config.clone(),
            n_agents: weights.n_agents,
            dx: weights.dx,
            theta_dim: weights.theta_dim,
            family_name: family.name.clone(),
            family_digest: digest_json(family),
            latent: latent.clone(),
            anneal,
            training,
            nominal_theta,
        }
    }
}

pub fn save_checkpoint(path: &Path, weights: &DecoderWeights, meta: &CheckpointMeta) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta)?;
    file.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&meta_bytes)?;
    file.write_all(&(weights.data.len() as u64).to_le_bytes())?;
    let mut payload = Vec::with_capacity(weights.data.len() * 8);
    for v in &weights.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload)?;
    file.write_all(&crc32(&payload).to_le_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DecoderWeights, CheckpointMeta)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let need = |n: usize, at: usize| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::Format("truncated checkpoint".into()))
        } else {
            Ok(())
        }
    };
    need(8, 0)?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("magic mismatch, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > WEIGHTS_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} newer than supported {WEIGHTS_VERSION}"
        )));
    }
    need(8, 8)?;
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(meta_len, 16)?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])?;
    let off = 16 + meta_len;
    need(8, off)?;
    let count = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    let payload_off = off + 8;
    need(count * 8 + 4, payload_off)?;
    let payload = &bytes[payload_off..payload_off + count * 8];
    let stored_crc = u32::from_le_bytes(
        bytes[payload_off + count * 8..payload_off + count * 8 + 4]
            .try_into()
            .unwrap(),
    );
    if crc32(payload) != stored_crc {
        return Err(Error::Format("payload CRC mismatch".into()));
    }
    let expected = count_parameters(&meta.decoder, meta.n_agents, meta.dx);
    if count != expected {
        return Err(Error::Format(format!(
            "payload length {count} does not match architecture count {expected}"
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((
        DecoderWeights {
            config: meta.decoder.clone(),
            n_agents: meta.n_agents,
            dx: meta.dx,
            theta_dim: meta.theta_dim,
            version,
            data,
        },
        meta,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub instance_digest: String,
    pub family_id: String,
    pub n_agents: usize,
    pub dx: usize,
    #[serde(default)]
    pub metrics: Option<InstanceMetrics>,
}

/// CSV with header `t,agent,w*,v*,pw*,pv*,u*`, rows sorted by (t, agent);
/// floats use the shortest round-trip representation.
pub fn write_trajectory_csv(
    path: &Path,
    traj: &PhaseTrajectory,
    inst: &ProblemInstance,
    metrics: Option<InstanceMetrics>,
) -> Result<()> {
    let du = traj.dx / 2;
    let mut out = String::new();
    out.push_str("t,agent");
    for (prefix, count) in [("w", du), ("v", du), ("pw", du), ("pv", du), ("u", du)] {
        for c in 0..count {
            out.push_str(&format!(",{prefix}{c}"));
        }
    }
    out.push('\n');
    for (j, t) in traj.grid.times.iter().enumerate() {
        let x = traj.x_at(j);
        let p = traj.p_at(j);
        for i in 0..traj.n_agents {
            out.push_str(&format!("{t},{i}"));
            let xi = &x[i * traj.dx..(i + 1) * traj.dx];
            let pi = &p[i * traj.dx..(i + 1) * traj.dx];
            for v in xi {
                out.push_str(&format!(",{v}"));
            }
            for v in pi {
                out.push_str(&format!(",{v}"));
            }
            for v in conjugate_control(inst, i, pi) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    let sidecar = TrajectorySidecar {
        instance_digest: digest_json(inst),
        family_id: inst.family_id.clone(),
        n_agents: traj.n_agents,
        dx: traj.dx,
        metrics,
    };
    let sidecar_path = path.with_extension("json");
    std::fs::write(&sidecar_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Read back a trajectory CSV (states and costates; controls are re-derivable).
pub fn read_trajectory_csv(path: &Path) -> Result<PhaseTrajectory> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let du = cols.iter().filter(|c| c.starts_with('w') && !c.starts_with("pw")).count()
        .max(1);
    let dx = 2 * du;
    let mut rows: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "row with {} columns, expected {}",
                fields.len(),
                cols.len()
            )));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Format("bad time value".into()))?;
        let agent: usize = fields[1]
            .parse()
            .map_err(|_| Error::Format("bad agent index".into()))?;
        let values: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("bad float value".into()))?;
        rows.push((t, agent, values));
    }
    let n_agents = rows.iter().map(|(_, a, _)| a + 1).max().unwrap_or(0);
    let mut times: Vec<f64> = rows.iter().map(|(t, _, _)| *t).collect();
    times.dedup();
    let nt = times.len();
    if nt < 2 {
        return Err(Error::Format("trajectory needs at least two samples".into()));
    }
    let grid = TimeGrid { times };
    let mut traj = PhaseTrajectory::zeros(grid, n_agents, dx);
    let n = traj.half_dim();
    for (row_idx, (_, agent, values)) in rows.iter().enumerate() {
        let j = row_idx / n_agents;
        for c in 0..dx {
            traj.x[j * n + agent * dx + c] = values[c];
            traj.p[j * n + agent * dx + c] = values[dx + c];
        }
    }
    Ok(traj)
}
