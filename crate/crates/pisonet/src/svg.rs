//! Deterministic SVG rendering of environments and trajectories: domain box,
//! obstacles, per-agent colored polylines, terminal markers, and optional
//! velocity/control arrow glyphs at evenly spaced samples.

use crate::phase::{EnvironmentSpec, Obstacle, PhaseTrajectory, ProblemInstance};
use std::fmt::Write;

const CANVAS: f64 = 800.0;
const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

#[derive(Clone, Debug)]
pub struct PlotOptions {
    /// Number of evenly spaced samples carrying velocity/control arrows;
    /// zero disables arrows.
    pub arrow_samples: usize,
    pub arrow_scale: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            arrow_samples: 0,
            arrow_scale: 0.1,
        }
    }
}

struct Frame {
    min: [f64; 2],
    scale: f64,
    height: f64,
}

impl Frame {
    fn of(env: &EnvironmentSpec) -> Frame {
        let w = env.domain_max[0] - env.domain_min[0];
        let h = env.domain_max[1] - env.domain_min[1];
        let scale = CANVAS / w.max(h);
        Frame {
            min: [env.domain_min[0], env.domain_min[1]],
            scale,
            height: h * scale,
        }
    }

    fn x(&self, v: f64) -> f64 {
        (v - self.min[0]) * self.scale
    }

    /// SVG y grows downward; flip so the plot is in math orientation.
    fn y(&self, v: f64) -> f64 {
        self.height - (v - self.min[1]) * self.scale
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Render an environment and (optionally) a trajectory to an SVG string.
/// 3D inputs are drawn as their (x, y) projection with a warning annotation.
pub fn render_svg(
    traj: Option<&PhaseTrajectory>,
    inst: &ProblemInstance,
    options: &PlotOptions,
) -> String {
    let env = &inst.env;
    let frame = Frame::of(env);
    let width = (env.domain_max[0] - env.domain_min[0]) * frame.scale;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">",
        fmt(width),
        fmt(frame.height),
        fmt(width),
        fmt(frame.height)
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\" stroke=\"#222222\" stroke-width=\"2\"/>",
        fmt(width),
        fmt(frame.height)
    );
    if env.spatial_dim == 3 {
        let _ = writeln!(
            out,
            "<text x=\"8\" y=\"20\" font-size=\"16\" fill=\"#aa0000\">projection: (x, y) of a 3D scene</text>"
        );
    }

    for ob in &env.obstacles {
        match ob {
            Obstacle::Circle { center, radius } => {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"#d0d0d0\" stroke=\"#555555\" stroke-width=\"1.5\"/>",
                    fmt(frame.x(center[0])),
                    fmt(frame.y(center[1])),
                    fmt(radius * frame.scale)
                );
            }
            Obstacle::AxisBox {
                min_corner,
                max_corner,
            } => {
                let _ = writeln!(
                    out,
                    "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#d0d0d0\" stroke=\"#555555\" stroke-width=\"1.5\"/>",
                    fmt(frame.x(min_corner[0])),
                    fmt(frame.y(max_corner[1])),
                    fmt((max_corner[0] - min_corner[0]) * frame.scale),
                    fmt((max_corner[1] - min_corner[1]) * frame.scale)
                );
            }
            Obstacle::SegmentWall {
                endpoints,
                half_width,
            } => {
                let _ = writeln!(
                    out,
                    "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#d0d0d0\" stroke-width=\"{}\" stroke-linecap=\"round\"/>",
                    fmt(frame.x(endpoints[0][0])),
                    fmt(frame.y(endpoints[0][1])),
                    fmt(frame.x(endpoints[1][0])),
                    fmt(frame.y(endpoints[1][1])),
                    fmt(2.0 * half_width * frame.scale)
                );
            }
        }
    }

    if let Some(traj) = traj {
        let dx = traj.dx;
        let du = dx / 2;
        for i in 0..traj.n_agents {
            let color = PALETTE[i % PALETTE.len()];
            let mut points = String::new();
            for j in 0..traj.grid.len() {
                let x = traj.x_at(j);
                let _ = write!(
                    points,
                    "{},{} ",
                    fmt(frame.x(x[i * dx])),
                    fmt(frame.y(x[i * dx + 1]))
                );
            }
            let _ = writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                points.trim_end()
            );
            // Start marker (filled agent-size circle) and terminal cross.
            let r = inst.agents[i].radius * frame.scale;
            let x0 = traj.x_at(0);
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
                fmt(frame.x(x0[i * dx])),
                fmt(frame.y(x0[i * dx + 1])),
                fmt(r.max(3.0))
            );
            let xt = traj.x_at(traj.grid.len() - 1);
            let cx = frame.x(xt[i * dx]);
            let cy = frame.y(xt[i * dx + 1]);
            let s = 5.0;
            let _ = writeln!(
                out,
                "<path d=\"M {} {} L {} {} M {} {} L {} {}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                fmt(cx - s),
                fmt(cy - s),
                fmt(cx + s),
                fmt(cy + s),
                fmt(cx - s),
                fmt(cy + s),
                fmt(cx + s),
                fmt(cy - s)
            );

            if options.arrow_samples > 0 {
                let nt = traj.grid.len();
                for k in 0..options.arrow_samples {
                    let j = k * (nt - 1) / options.arrow_samples.max(1);
                    let x = traj.x_at(j);
                    let p = traj.p_at(j);
                    let base = [frame.x(x[i * dx]), frame.y(x[i * dx + 1])];
                    // Velocity arrow in blue.
                    let vx = x[i * dx + du];
                    let vy = x[i * dx + du + 1];
                    let _ = writeln!(
                        out,
                        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#0000cc\" stroke-width=\"1\"/>",
                        fmt(base[0]),
                        fmt(base[1]),
                        fmt(base[0] + options.arrow_scale * frame.scale * vx),
                        fmt(base[1] - options.arrow_scale * frame.scale * vy)
                    );
                    // Control arrow in red.
                    let u = crate::hamiltonian::conjugate_control(inst, i, &p[i * dx..(i + 1) * dx]);
                    let _ = writeln!(
                        out,
                        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cc0000\" stroke-width=\"1\"/>",
                        fmt(base[0]),
                        fmt(base[1]),
                        fmt(base[0] + options.arrow_scale * frame.scale * u[0]),
                        fmt(base[1] - options.arrow_scale * frame.scale * u[1])
                    );
                }
            }
        }
    }

    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{AgentSpec, CostSpec, TimeGrid};

    fn obstacle_instance() -> ProblemInstance {
        let mut env = EnvironmentSpec::free(2, 1.0);
        env.obstacles.push(Obstacle::Circle {
            center: vec![0.0, 0.0],
            radius: 0.15,
        });
        ProblemInstance {
            family_id: "obstacle".into(),
            agents: (0..4).map(|_| AgentSpec::new(0.02, 1.0, 4)).collect(),
            env,
            x0: (0..4).map(|i| vec![0.5 - 0.1 * i as f64, -0.8, 0.0, 0.0]).collect(),
            x_t: (0..4).map(|i| vec![0.5 - 0.1 * i as f64, 0.8, 0.0, 0.0]).collect(),
            horizon: 1.0,
            seed: 0,
            cost: CostSpec::default(),
        }
    }

    #[test]
    fn environment_only_render_contains_obstacle() {
        let inst = obstacle_instance();
        let svg = render_svg(None, &inst, &PlotOptions::default());
        assert!(svg.contains("<svg"), "document element");
        // Obstacle circle at the canvas center with radius 0.15 * 400 = 60.
        assert!(
            svg.contains("<circle cx=\"400.0000\" cy=\"400.0000\" r=\"60.0000\""),
            "obstacle circle with the viewbox transform applied:\n{svg}"
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let inst = obstacle_instance();
        let grid = TimeGrid::uniform(1.0, 9);
        let mut traj = PhaseTrajectory::zeros(grid, 4, 4);
        for (i, v) in traj.x.iter_mut().enumerate() {
            *v = ((i * 37 % 100) as f64 - 50.0) / 100.0;
        }
        let opts = PlotOptions {
            arrow_samples: 4,
            arrow_scale: 0.1,
        };
        let a = render_svg(Some(&traj), &inst, &opts);
        let b = render_svg(Some(&traj), &inst, &opts);
        assert_eq!(a, b, "byte-identical output");
        assert_eq!(a.matches("<polyline").count(), 4, "one path per agent");
        assert!(a.contains("#0000cc") && a.contains("#cc0000"), "arrow glyphs");
    }
}
