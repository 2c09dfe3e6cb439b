//! Command-line surface: scenario generation, training, inference, evaluation,
//! eikonal reference generation, SVG plotting, and a self-check suite.

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_batch, EvalConfig, EvalReport};
use crate::hamiltonian::BarrierParams;
use crate::latent::{ComposedMap, LatentConfig, LatentVariant};
use crate::persist::{
    digest_json, load_checkpoint, save_checkpoint, write_trajectory_csv, CheckpointMeta,
    TrainingSummary,
};
use crate::phase::{PhaseTrajectory, ProblemInstance, TimeGrid};
use crate::scenario::{
    make_family, nominal_instance, sample_instance, FamilyOverrides, FamilySpec, Split,
};
use crate::svg::{render_svg, PlotOptions};
use crate::train::{
    prepare_instance, refine_instance, ReferenceTrajectory, TrainConfig, Trainer,
};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "pisonet", about = "Symplectic operator pipeline for multi-agent optimal control", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem family and its train/test instance sets.
    Gen {
        #[arg(long)]
        family: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        perturbation: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Train an operator from a JSON job config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference on an instance directory, writing trajectory CSVs.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Evaluate a checkpoint on an instance directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        refine: usize,
        #[arg(long, default_value_t = 10)]
        m: usize,
    },
    /// Generate eikonal reference trajectories for a family's nominal instance.
    Eikonal {
        #[arg(long, default_value = "maze")]
        family: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.005)]
        grid_h: f64,
    },
    /// Render a trajectory CSV over its environment as SVG.
    Plot {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        arrows: usize,
    },
    /// Run the invariant suite and print one pass/fail line per property.
    Check,
}

/// JSON job description for `train`. Section names mirror the config structs.
#[derive(Serialize, Deserialize)]
struct TrainJob {
    #[serde(default)]
    family: Option<FamilySpec>,
    #[serde(default)]
    family_dir: Option<PathBuf>,
    train: TrainConfig,
    decoder: DecoderConfig,
    #[serde(default)]
    latent: Option<LatentConfig>,
    #[serde(default)]
    instances_dir: Option<PathBuf>,
    #[serde(default)]
    eikonal_pretrain: bool,
    #[serde(default = "default_grid_h")]
    eikonal_grid_h: f64,
}

fn default_grid_h() -> f64 {
    0.005
}

pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("PISONET_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage text on stderr, validation exit code.
            eprint!("{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Json(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen {
            family,
            n,
            train,
            test,
            seed,
            out,
            perturbation,
            horizon,
        } => cmd_gen(&family, n, train, test, seed, &out, perturbation, horizon),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Infer {
            ckpt,
            instances,
            out,
            samples,
        } => cmd_infer(&ckpt, &instances, &out, samples),
        Command::Eval {
            ckpt,
            instances,
            report,
            refine,
            m,
        } => cmd_eval(&ckpt, &instances, &report, refine, m),
        Command::Eikonal {
            family,
            n,
            seed,
            out,
            grid_h,
        } => cmd_eikonal(&family, n, seed, &out, grid_h),
        Command::Plot {
            traj,
            env,
            out,
            arrows,
        } => cmd_plot(&traj, &env, &out, arrows),
        Command::Check => Ok(cmd_check()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    family_name: &str,
    n: usize,
    train: usize,
    test: usize,
    seed: u64,
    out: &Path,
    perturbation: Option<f64>,
    horizon: Option<f64>,
) -> Result<i32> {
    let overrides = FamilyOverrides {
        master_seed: Some(seed),
        train_count: Some(train),
        test_count: Some(test),
        perturbation_radius: perturbation,
        horizon,
        ..Default::default()
    };
    let family = make_family(family_name, n, &overrides)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("family.json"), serde_json::to_vec_pretty(&family)?)?;
    for (split, dir) in [(Split::Train, "train"), (Split::Test, "test")] {
        let split_dir = out.join(dir);
        std::fs::create_dir_all(&split_dir)?;
        for i in 0..family.split_count(split) {
            let inst = sample_instance(&family, split, i)?;
            std::fs::write(
                split_dir.join(format!("instance_{i:03}.json")),
                serde_json::to_vec_pretty(&inst)?,
            )?;
        }
    }
    println!(
        "wrote family {family_name} (N = {n}) with {train} train / {test} test instances to {}",
        out.display()
    );
    Ok(0)
}

fn load_instances(dir: &Path) -> Result<Vec<ProblemInstance>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name()
                    .and_then(|f| f.to_str())
                    .is_some_and(|f| f.starts_with("instance_"))
        })
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for p in names {
        out.push(serde_json::from_slice(&std::fs::read(&p)?)?);
    }
    if out.is_empty() {
        return Err(Error::Mismatch(format!(
            "no instance_*.json files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn load_composed(latent: &LatentConfig) -> Result<Option<ComposedMap>> {
    if !matches!(latent.variant, LatentVariant::LqrComposed) {
        return Ok(None);
    }
    let path = latent.composed_checkpoint.as_ref().ok_or_else(|| {
        Error::Format("lqr_composed latent requires composed_checkpoint".into())
    })?;
    let (weights, meta) = load_checkpoint(Path::new(path))?;
    Ok(Some(ComposedMap {
        weights,
        theta: meta.nominal_theta,
    }))
}

fn build_eikonal_references(
    family: &FamilySpec,
    grid_h: f64,
    grid: &TimeGrid,
    count: usize,
    seed: u64,
) -> Result<Vec<ReferenceTrajectory>> {
    use crate::eikonal::{rescale_time, rollout_sde, select_reference, solve_eikonal, SdeConfig};
    let inst = nominal_instance(family);
    let fields: Vec<_> = inst
        .x_t
        .iter()
        .map(|row| solve_eikonal(&inst.env, &row[..2], grid_h))
        .collect::<Result<_>>()?;
    let cfg = SdeConfig::default();
    let rollouts: Vec<_> = (0..cfg.trials)
        .map(|k| rollout_sde(&inst, &fields, &cfg, seed.wrapping_add(k as u64)))
        .collect();
    let (_, best) = select_reference(&rollouts, &inst)?;
    let reference = rescale_time(best, family.n_agents, grid);
    Ok(vec![reference; count])
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<i32> {
    let job: TrainJob = serde_json::from_slice(&std::fs::read(config_path)?)?;
    let family = match (&job.family, &job.family_dir) {
        (Some(f), _) => f.clone(),
        (None, Some(dir)) => serde_json::from_slice(&std::fs::read(dir.join("family.json"))?)?,
        (None, None) => {
            return Err(Error::Format(
                "train config needs either `family` or `family_dir`".into(),
            ))
        }
    };
    let instances = match (&job.instances_dir, &job.family_dir) {
        (Some(dir), _) => load_instances(dir)?,
        (None, Some(dir)) => load_instances(&dir.join("train"))?,
        (None, None) => (0..family.train_count)
            .map(|i| sample_instance(&family, Split::Train, i))
            .collect::<Result<_>>()?,
    };
    let latent = job.latent.clone().unwrap_or_else(|| family.latent.clone());
    let composed = load_composed(&latent)?;

    let refs = if job.eikonal_pretrain {
        let grid = TimeGrid::uniform(family.horizon, job.train.collocation_count);
        Some(build_eikonal_references(
            &family,
            job.eikonal_grid_h,
            &grid,
            instances.len(),
            job.train.rng_seed,
        )?)
    } else {
        None
    };

    let mut trainer = Trainer::new(&family, &job.train, &job.decoder, &latent);
    trainer.composed = composed.as_ref();
    trainer.pretrain_refs = refs.as_deref();
    trainer.progress = true;
    let (weights, report) = trainer.train(&instances)?;

    let nominal_theta = family.encode(&nominal_instance(&family))?;
    let meta = CheckpointMeta::for_family(
        &family,
        &weights,
        &latent,
        job.train.anneal.state_at(job.train.adam_steps.saturating_sub(1)),
        TrainingSummary {
            final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
            adam_steps: report.adam_steps_taken,
            lbfgs_steps: report.lbfgs_steps_taken,
            wall_seconds: report.wall_seconds,
        },
        nominal_theta,
    );
    save_checkpoint(out, &weights, &meta)?;
    let report_path = out.with_extension("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    println!(
        "checkpoint written to {} (report: {})",
        out.display(),
        report_path.display()
    );
    Ok(0)
}

fn check_family_digest(instances_dir: &Path, meta: &CheckpointMeta) {
    let family_path = instances_dir.join("family.json");
    let parent = instances_dir.parent().map(|p| p.join("family.json"));
    let candidate = if family_path.exists() {
        Some(family_path)
    } else {
        parent.filter(|p| p.exists())
    };
    if let Some(path) = candidate {
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(family) = serde_json::from_slice::<FamilySpec>(&bytes) {
                if digest_json(&family) != meta.family_digest {
                    println!(
                        "warning: family digest mismatch between {} and checkpoint ({} vs {})",
                        path.display(),
                        digest_json(&family),
                        meta.family_digest
                    );
                }
            }
        }
    }
}

fn cmd_infer(ckpt: &Path, instances_dir: &Path, out: &Path, samples: usize) -> Result<i32> {
    let (weights, meta) = load_checkpoint(ckpt)?;
    check_family_digest(instances_dir, &meta);
    let instances = load_instances(instances_dir)?;
    let composed = load_composed(&meta.latent)?;
    std::fs::create_dir_all(out)?;
    let grid = TimeGrid::uniform(instances[0].horizon, samples);
    let trajs = crate::eval::infer_batch(
        &instances,
        &weights,
        &meta.decoder.theta_encoding,
        &meta.latent,
        composed.as_ref(),
        &grid,
    )?;
    for (i, (inst, traj)) in instances.iter().zip(&trajs).enumerate() {
        write_trajectory_csv(&out.join(format!("traj_{i:03}.csv")), traj, inst, None)?;
    }
    println!("wrote {} trajectories to {}", trajs.len(), out.display());
    Ok(0)
}

#[derive(Serialize)]
struct EvalOutput {
    report: EvalReport,
    refine_steps: usize,
    refine_attempted: usize,
    refine_recovered: usize,
}

fn cmd_eval(ckpt: &Path, instances_dir: &Path, report_path: &Path, refine: usize, m: usize) -> Result<i32> {
    let (weights, meta) = load_checkpoint(ckpt)?;
    check_family_digest(instances_dir, &meta);
    let instances = load_instances(instances_dir)?;
    let composed = load_composed(&meta.latent)?;
    let cfg = EvalConfig {
        grid_count: 64,
        refine_m: m,
        barrier: BarrierParams::new(meta.anneal.eps, meta.anneal.ell),
    };
    let mut report = evaluate_batch(
        &instances,
        &weights,
        &meta.decoder.theta_encoding,
        &meta.latent,
        composed.as_ref(),
        &cfg,
    )?;
    let mut attempted = 0;
    let mut recovered = 0;
    if refine > 0 {
        let grid = TimeGrid::uniform(instances[0].horizon, cfg.grid_count);
        for (idx, inst) in instances.iter().enumerate() {
            if report.rows[idx].pass {
                continue;
            }
            attempted += 1;
            let data = prepare_instance(
                inst,
                &meta.decoder.theta_encoding,
                &meta.latent,
                composed.as_ref(),
                &grid,
            )?;
            let outcome = refine_instance(&weights, &data, &cfg.barrier, refine);
            let single = evaluate_batch(
                std::slice::from_ref(inst),
                &outcome.weights,
                &meta.decoder.theta_encoding,
                &meta.latent,
                composed.as_ref(),
                &cfg,
            )?;
            if single.rows[0].pass {
                recovered += 1;
            }
            report.rows[idx] = single.rows[0].clone();
        }
        // Recompute aggregates after refinement.
        let wall = report.batch_wall_seconds;
        let rows = report.rows.clone();
        report = EvalReport {
            batch_wall_seconds: wall,
            ..evaluate_rows(rows)
        };
        report.batch_wall_seconds = wall;
    }
    print!("{}", report.to_table());
    if refine > 0 {
        println!("refined {recovered}/{attempted} failing instances with {refine} steps");
    }
    std::fs::write(
        report_path,
        serde_json::to_vec_pretty(&EvalOutput {
            report,
            refine_steps: refine,
            refine_attempted: attempted,
            refine_recovered: recovered,
        })?,
    )?;
    Ok(0)
}

fn evaluate_rows(rows: Vec<crate::eval::InstanceMetrics>) -> EvalReport {
    let total = rows.len();
    let pass_count = rows.iter().filter(|r| r.pass).count();
    let mean = |f: &dyn Fn(&crate::eval::InstanceMetrics) -> f64| -> f64 {
        if total == 0 {
            0.0
        } else {
            rows.iter().map(|r| f(r)).sum::<f64>() / total as f64
        }
    };
    EvalReport {
        pass_count,
        total,
        avg_cost: mean(&|r| r.cost),
        avg_max_violation: mean(&|r| r.max_violation),
        avg_residual: mean(&|r| r.mean_pmp_residual),
        batch_wall_seconds: 0.0,
        rows,
    }
}

fn cmd_eikonal(family_name: &str, n: usize, seed: u64, out: &Path, grid_h: f64) -> Result<i32> {
    use crate::eikonal::{detour_ratio, rollout_sde, select_reference, solve_eikonal, SdeConfig};
    let family = make_family(family_name, n, &FamilyOverrides::default())?;
    let inst = nominal_instance(&family);
    let fields: Vec<_> = inst
        .x_t
        .iter()
        .map(|row| solve_eikonal(&inst.env, &row[..2], grid_h))
        .collect::<Result<_>>()?;
    let cfg = SdeConfig::default();
    let rollouts: Vec<_> = (0..cfg.trials)
        .map(|k| rollout_sde(&inst, &fields, &cfg, seed.wrapping_add(k as u64)))
        .collect();
    for (k, r) in rollouts.iter().enumerate() {
        println!(
            "trial {k}: reached = {}, steps = {}, detour ratio = {:.4}",
            r.reached,
            r.steps,
            detour_ratio(r, &inst)
        );
    }
    let (best_idx, best) = select_reference(&rollouts, &inst)?;
    println!("selected trial {best_idx}");
    std::fs::create_dir_all(out)?;
    let grid = TimeGrid::uniform(family.horizon, 64);
    let reference = crate::eikonal::rescale_time(best, n, &grid);
    // Export in the trajectory CSV format: positions from the reference,
    // velocities by central differences of the reparameterized path, zero
    // costates (and hence zero controls).
    let mut traj = PhaseTrajectory::zeros(grid.clone(), n, family.dx());
    let du = family.dx() / 2;
    let half = traj.half_dim();
    for j in 0..grid.len() {
        for i in 0..n {
            for c in 0..du {
                traj.x[j * half + i * family.dx() + c] =
                    reference.positions[(j * n + i) * du + c];
            }
        }
    }
    for j in 0..grid.len() {
        let (jm, jp) = (j.saturating_sub(1), (j + 1).min(grid.len() - 1));
        let dt = grid.times[jp] - grid.times[jm];
        for i in 0..n {
            for c in 0..du {
                let wp = traj.x[jp * half + i * family.dx() + c];
                let wm = traj.x[jm * half + i * family.dx() + c];
                traj.x[j * half + i * family.dx() + du + c] = (wp - wm) / dt;
            }
        }
    }
    write_trajectory_csv(&out.join("reference.csv"), &traj, &inst, None)?;
    std::fs::write(
        out.join("instance.json"),
        serde_json::to_vec_pretty(&inst)?,
    )?;
    println!("reference written to {}", out.join("reference.csv").display());
    Ok(0)
}

fn cmd_plot(traj_path: &Path, env_path: &Path, out: &Path, arrows: usize) -> Result<i32> {
    let inst: ProblemInstance = serde_json::from_slice(&std::fs::read(env_path)?)?;
    let traj = crate::persist::read_trajectory_csv(traj_path)?;
    let svg = render_svg(
        Some(&traj),
        &inst,
        &PlotOptions {
            arrow_samples: arrows,
            arrow_scale: 0.1,
        },
    );
    std::fs::write(out, svg)?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_check() -> i32 {
    let mut all_ok = true;
    let mut check = |name: &str, result: std::result::Result<String, String>| {
        match result {
            Ok(detail) => println!("PASS {name} ({detail})"),
            Err(detail) => {
                println!("FAIL {name} ({detail})");
                all_ok = false;
            }
        }
    };

    check("matrix exponential rotation closed form", checks::expm_rotation());
    check("latent flow symplecticity", checks::latent_symplectic());
    check("latent rest-to-rest cubic profile", checks::latent_cubic());
    check("latent energy conservation", checks::latent_energy_conservation());
    check("decoder symplecticity", checks::decoder_symplectic());
    check("decoder endpoint preservation", checks::decoder_endpoints());
    check("decoder derivative channels vs finite differences", checks::decoder_channels());
    check("training gradient vs finite differences", checks::training_gradient());
    check("hamiltonian gradients vs finite differences", checks::hamiltonian_gradients());
    check("barrier monotone and hinge-limited", checks::barrier_shape());
    check("checkpoint round trip", checks::checkpoint_round_trip());
    check("eikonal free-space accuracy", checks::eikonal_free_space());

    if all_ok {
        println!("all checks passed");
        0
    } else {
        1
    }
}

mod checks {
    use super::*;
    use crate::decoder::{init_weights, symplectic_defect};
    use rand::prelude::*;

    type CheckResult = std::result::Result<String, String>;

    fn fail_if(cond: bool, detail: String) -> CheckResult {
        if cond {
            Err(detail)
        } else {
            Ok(detail)
        }
    }

    pub fn expm_rotation() -> CheckResult {
        use nalgebra::DMatrix;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = crate::latent::matrix_exponential(&m, std::f64::consts::FRAC_PI_2)
            .map_err(|e| e.to_string())?;
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let err = (e - expected).norm();
        fail_if(err > 1e-12, format!("error {err:.2e}"))
    }

    pub fn latent_symplectic() -> CheckResult {
        let agent = crate::phase::AgentSpec::new(0.02, 0.0, 4);
        let cfg = LatentConfig::lqr_rotation(0.2, 1.0);
        let m = crate::latent::build_latent_matrix(&agent, &cfg, &Default::default())
            .map_err(|e| e.to_string())?;
        let mut j = nalgebra::DMatrix::<f64>::zeros(8, 8);
        for c in 0..4 {
            j[(c, 4 + c)] = 1.0;
            j[(4 + c, c)] = -1.0;
        }
        let mut worst: f64 = 0.0;
        for t in [0.1, 0.5, 1.0] {
            let phi = crate::latent::matrix_exponential(&m.mat, t).map_err(|e| e.to_string())?;
            worst = worst.max((phi.transpose() * &j * &phi - &j).norm());
        }
        fail_if(worst > 1e-10, format!("defect {worst:.2e}"))
    }

    pub fn latent_cubic() -> CheckResult {
        let agent = crate::phase::AgentSpec::new(0.02, 0.0, 2);
        let cfg = LatentConfig::lqr(0.0);
        let m = crate::latent::build_latent_matrix(&agent, &cfg, &Default::default())
            .map_err(|e| e.to_string())?;
        let grid = TimeGrid::uniform(1.0, 65);
        let prop = crate::latent::LatentPropagator::new(m, grid.clone()).map_err(|e| e.to_string())?;
        let mut traj = crate::phase::LatentTrajectory::zeros(grid.clone(), 1, 2);
        prop.solve_agent(0, &[0.0, 0.0], &[1.0, 0.0], &mut traj)
            .map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for (j, t) in grid.times.iter().enumerate() {
            let want = 3.0 * t * t - 2.0 * t * t * t;
            worst = worst.max((traj.y_at(j)[0] - want).abs());
        }
        fail_if(worst > 1e-6, format!("max error {worst:.2e}"))
    }

    pub fn latent_energy_conservation() -> CheckResult {
        let family = make_family("free", 2, &FamilyOverrides::default()).map_err(|e| e.to_string())?;
        let inst = nominal_instance(&family);
        let grid = TimeGrid::uniform(1.0, 65);
        let cfg = LatentConfig::lqr_rotation(0.2, 1.0);
        let traj = crate::latent::solve_latent_bvp(&inst, &cfg, &grid).map_err(|e| e.to_string())?;
        let m = crate::latent::build_latent_matrix(&inst.agents[0], &cfg, &inst.cost)
            .map_err(|e| e.to_string())?;
        let energies = crate::latent::latent_energy(&traj, &[m]);
        let dev = energies
            .iter()
            .map(|e| (e - energies[0]).abs())
            .fold(0.0, f64::max);
        fail_if(dev > 1e-9, format!("max drift {dev:.2e}"))
    }

    fn random_test_weights(seed: u64) -> (crate::decoder::DecoderWeights, Vec<f64>) {
        let cfg = DecoderConfig {
            theta_encoding: vec![crate::decoder::ThetaComponent::InitialPositions {
                lo: -1.0,
                hi: 1.0,
            }],
            ..Default::default()
        };
        let mut w = init_weights(&cfg, 4, 4, seed);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        for v in &mut w.data {
            *v = rng.random_range(-0.5..0.5);
        }
        let theta: Vec<f64> = (0..w.theta_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        (w, theta)
    }

    pub fn decoder_symplectic() -> CheckResult {
        let (w, theta) = random_test_weights(3);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let mut worst = (0.0f64, 0.0f64);
        for _ in 0..10 {
            let z: Vec<f64> = (0..2 * w.half_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = rng.random_range(0.0..1.0);
            let (d, dd) = symplectic_defect(&w, &theta, t, 1.0, &z);
            worst.0 = worst.0.max(d);
            worst.1 = worst.1.max(dd);
        }
        fail_if(
            worst.0 > 1e-6 || worst.1 > 1e-6,
            format!("defect {:.2e}, det defect {:.2e}", worst.0, worst.1),
        )
    }

    pub fn decoder_endpoints() -> CheckResult {
        let (w, theta) = random_test_weights(5);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        let n = w.half_dim();
        let mut worst: f64 = 0.0;
        for t in [0.0, 1.0] {
            let z: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = crate::decoder::decoder_forward(&w, &theta, t, 1.0, &z);
            for c in 0..n {
                worst = worst.max((out[c] - z[c]).abs());
            }
        }
        fail_if(worst > 1e-14, format!("max deviation {worst:.2e}"))
    }

    pub fn decoder_channels() -> CheckResult {
        let (w, theta) = random_test_weights(7);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let n2 = 2 * w.half_dim();
        let z: Vec<f64> = (0..n2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zd: Vec<f64> = (0..n2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 0.41;
        let h = 1e-5;
        let jvp = crate::decoder::decoder_jvp(&w, &theta, t, 1.0, &z, &zd);
        let zp: Vec<f64> = z.iter().zip(&zd).map(|(a, d)| a + h * d).collect();
        let zm: Vec<f64> = z.iter().zip(&zd).map(|(a, d)| a - h * d).collect();
        let fp = crate::decoder::decoder_forward(&w, &theta, t, 1.0, &zp);
        let fm = crate::decoder::decoder_forward(&w, &theta, t, 1.0, &zm);
        let mut worst: f64 = 0.0;
        for i in 0..n2 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            worst = worst.max((jvp[i] - fd).abs() / fd.abs().max(1e-2));
        }
        let td = crate::decoder::decoder_time_derivative(&w, &theta, t, 1.0, &z);
        let fp = crate::decoder::decoder_forward(&w, &theta, t + h, 1.0, &z);
        let fm = crate::decoder::decoder_forward(&w, &theta, t - h, 1.0, &z);
        for i in 0..n2 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            worst = worst.max((td[i] - fd).abs() / fd.abs().max(1e-2));
        }
        fail_if(worst > 1e-6, format!("max relative error {worst:.2e}"))
    }

    pub fn training_gradient() -> CheckResult {
        let family = make_family(
            "obstacle",
            2,
            &FamilyOverrides {
                train_count: Some(1),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let inst = sample_instance(&family, Split::Train, 0).map_err(|e| e.to_string())?;
        let cfg = DecoderConfig {
            layers: 1,
            cond_width: 3,
            theta_encoding: family.theta_encoding.clone(),
            ..Default::default()
        };
        let mut weights = init_weights(&cfg, 2, 4, 21);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(22);
        for v in &mut weights.data {
            *v = rng.random_range(-0.3..0.3);
        }
        let bp = BarrierParams::new(0.1, 0.1);
        let err = crate::train::gradient_check(
            &weights,
            &inst,
            &family.theta_encoding,
            &family.latent,
            &bp,
        )
        .map_err(|e| e.to_string())?;
        fail_if(err > 1e-4, format!("max relative error {err:.2e}"))
    }

    pub fn hamiltonian_gradients() -> CheckResult {
        let family = make_family(
            "obstacle",
            2,
            &FamilyOverrides {
                train_count: Some(1),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let inst = sample_instance(&family, Split::Train, 0).map_err(|e| e.to_string())?;
        let bp = BarrierParams::new(0.1, 0.1);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let n = inst.half_dim();
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (gx, gp) = crate::hamiltonian::hamiltonian_grads(&inst, &x, &p, &bp);
            let h = 1e-5;
            for c in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (crate::hamiltonian::hamiltonian_value(&inst, &xp, &p, &bp)
                    - crate::hamiltonian::hamiltonian_value(&inst, &xm, &p, &bp))
                    / (2.0 * h);
                worst = worst.max((gx[c] - fd).abs() / gx[c].abs().max(1.0));
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[c] += h;
                pm[c] -= h;
                let fd = (crate::hamiltonian::hamiltonian_value(&inst, &x, &pp, &bp)
                    - crate::hamiltonian::hamiltonian_value(&inst, &x, &pm, &bp))
                    / (2.0 * h);
                worst = worst.max((gp[c] - fd).abs() / gp[c].abs().max(1.0));
            }
        }
        fail_if(worst > 1e-6, format!("max relative error {worst:.2e}"))
    }

    pub fn barrier_shape() -> CheckResult {
        let bp = BarrierParams::new(1.0, 0.1);
        let mut prev = crate::hamiltonian::barrier(&[-0.5], &bp);
        for k in 1..100 {
            let h = -0.5 + 0.02 * k as f64;
            let cur = crate::hamiltonian::barrier(&[h], &bp);
            if cur >= prev {
                return Err(format!("not strictly decreasing at h = {h}"));
            }
            prev = cur;
        }
        let sharp = BarrierParams::new(1.0, 1e-5);
        let hinge = crate::hamiltonian::barrier(&[-0.3], &sharp);
        fail_if(
            (hinge - 0.3).abs() > 1e-4,
            format!("hinge limit {hinge:.6} vs 0.3"),
        )
    }

    pub fn checkpoint_round_trip() -> CheckResult {
        let family = make_family("free", 2, &FamilyOverrides::default()).map_err(|e| e.to_string())?;
        let cfg = DecoderConfig {
            theta_encoding: family.theta_encoding.clone(),
            ..Default::default()
        };
        let mut weights = init_weights(&cfg, 2, 4, 3);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        for v in &mut weights.data {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let meta = CheckpointMeta::for_family(
            &family,
            &weights,
            &family.latent,
            crate::train::AnnealSchedule::Fixed { eps: 1e-4, ell: 1e-4 }.state_at(0),
            TrainingSummary {
                final_loss: 0.0,
                adam_steps: 0,
                lbfgs_steps: 0,
                wall_seconds: 0.0,
            },
            vec![0.0; weights.theta_dim],
        );
        let dir = std::env::temp_dir().join(format!("pisonet-check-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let path = dir.join("w.pisn");
        save_checkpoint(&path, &weights, &meta).map_err(|e| e.to_string())?;
        let (loaded, _) = load_checkpoint(&path).map_err(|e| e.to_string())?;
        let _ = std::fs::remove_dir_all(&dir);
        fail_if(loaded.data != weights.data, "payload round trip".into())
    }

    pub fn eikonal_free_space() -> CheckResult {
        let env = crate::phase::EnvironmentSpec::free(2, 1.0);
        let h = 0.02;
        let field = crate::eikonal::solve_eikonal(&env, &[0.0, 0.0], h).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for ix in 0..field.nx {
            for iy in 0..field.ny {
                let p = [
                    field.origin[0] + ix as f64 * h,
                    field.origin[1] + iy as f64 * h,
                ];
                let want = (p[0] * p[0] + p[1] * p[1]).sqrt();
                worst = worst.max((field.value_at_node(ix, iy) - want).abs());
            }
        }
        fail_if(worst >= 2.0 * h, format!("max error {worst:.4} vs 2h {}", 2.0 * h))
    }
}
