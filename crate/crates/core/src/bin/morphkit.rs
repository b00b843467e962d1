use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use morphkit_core::arap::{self, RotationMode, SolverConfig};
use morphkit_core::graph::{self, GraphConfig};
use morphkit_core::render::{self, Background, Camera};
use morphkit_core::session::protocol::parse_handle_file;
use morphkit_core::session::server::Server;
use morphkit_core::session::SessionConfig;
use morphkit_core::{skinning, Error, GaussianCloud, Result};

#[derive(Parser)]
#[command(name = "morphkit", version, about = "Interactive ARAP editing of Gaussian splat clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Arap,
    Laplacian,
}

#[derive(Subcommand)]
enum Command {
    /// Print a summary of a cloud.
    Info { cloud: PathBuf },
    /// Sample control nodes and export the deformation graph as JSON.
    Graph {
        cloud: PathBuf,
        #[arg(long, default_value_t = 512)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deform a cloud with handle targets and write the result.
    Deform {
        cloud: PathBuf,
        #[arg(long)]
        handles: PathBuf,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = Mode::Arap)]
        mode: Mode,
        #[arg(long, default_value_t = 512)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the solved control-graph state as JSON.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Render a cloud to PNG.
    Render {
        cloud: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Background color as `r,g,b` in [0, 1].
        #[arg(long, value_parser = parse_rgb, default_value = "1,1,1")]
        background: [f64; 3],
        /// Background plate PNG with the camera's resolution.
        #[arg(long)]
        plate: Option<PathBuf>,
    },
    /// Serve the ND-JSON editing protocol on a local TCP port.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated values".to_string())
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })
}

fn graph_config(nodes: usize, seed: usize, cloud: &GaussianCloud) -> GraphConfig {
    if nodes > cloud.len() {
        log::warn!("cloud has {} primitives, sampling all of them", cloud.len());
    }
    GraphConfig {
        node_count: nodes.min(cloud.len()),
        seed_index: seed,
        ..GraphConfig::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Info { cloud } => {
            let c = GaussianCloud::load(&cloud)?;
            let centers = c.centers();
            let mut lo = centers[0];
            let mut hi = centers[0];
            for p in &centers {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            println!("primitives: {}", c.len());
            println!("bounds min: [{:.6}, {:.6}, {:.6}]", lo.x, lo.y, lo.z);
            println!("bounds max: [{:.6}, {:.6}, {:.6}]", hi.x, hi.y, hi.z);
            let mean_opacity = c.primitives.iter().map(|p| p.opacity).sum::<f64>() / c.len() as f64;
            println!("mean opacity: {mean_opacity:.6}");
            if let Some(extra) = &c.extra {
                println!("extra properties: {}", extra.names().collect::<Vec<_>>().join(" "));
            }
        }
        Command::Graph {
            cloud,
            nodes,
            seed,
            out,
        } => {
            let c = GaussianCloud::load(&cloud)?;
            let g = graph::build_control_graph(&c.centers(), &graph_config(nodes, seed, &c))?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            write(&out, &g.to_json()?)?;
            println!(
                "nodes: {} edges: {} scene diameter: {:.6}",
                g.node_count(),
                g.edges.len(),
                g.scene_diameter
            );
        }
        Command::Deform {
            cloud,
            handles,
            iters,
            mode,
            nodes,
            seed,
            out,
            state,
        } => {
            let handles = parse_handle_file(&read(&handles)?)?;
            if handles.is_empty() {
                return Err(Error::Constraint(
                    "handle file is empty; at least one handle is required to pin the deformation".into(),
                ));
            }
            let c = GaussianCloud::load(&cloud)?;
            let config = SolverConfig {
                iterations: iters,
                rotation_mode: match mode {
                    Mode::Arap => RotationMode::FullArap,
                    Mode::Laplacian => RotationMode::LaplacianOnly,
                },
                ..SolverConfig::default()
            };
            let g = graph::build_control_graph(&c.centers(), &graph_config(nodes, seed, &c))?;
            let solved = arap::solve(&g, &handles, &config)?;
            let binding = skinning::bind(&c, &g)?;
            let (deformed, warnings) = skinning::deform_cloud(&c, &g, &solved, &binding)?;
            for w in g.warnings.iter().chain(&solved.warnings).chain(&warnings) {
                eprintln!("warning: {w}");
            }
            deformed.save(&out)?;
            if let Some(path) = state {
                write(&path, &serde_json::to_string_pretty(&solved.snapshot())?)?;
            }
            println!("final energy: {:.12e}", solved.energy);
        }
        Command::Render {
            cloud,
            camera,
            out,
            background,
            plate,
        } => {
            let c = GaussianCloud::load(&cloud)?;
            let cam = Camera::load(&camera)?;
            let bg = match plate {
                Some(p) => Background::load_plate(p)?,
                None => Background::Color(background),
            };
            let image = render::render(&c, &cam, &bg)?;
            render::write_png(&image, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Serve { port, host } => {
            let server = Server::bind((host.as_str(), port), SessionConfig::default())?;
            eprintln!("listening on {}", server.local_addr()?);
            server.run()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
