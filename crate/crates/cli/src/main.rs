use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modl_storm::config::RunConfig;
use modl_storm::container::{write_atomic, Container};
use modl_storm::denoiser::DenoiserParams;
use modl_storm::eval::{compare_baselines, snr_db};
use modl_storm::forward::{apply_a, golden_angle_pattern, NavigatorLines, SamplingPattern};
use modl_storm::manifold::{estimate_weights, Bandwidth};
use modl_storm::phantom::{generate_phantom, simulate_navigators};
use modl_storm::unrolled::{reconstruct, train_with_progress, UnrollConfig};
use modl_storm::{Error, Precision, Real, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "modl-storm", version, about = "Model-based dynamic MRI reconstruction with a manifold prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom series with its motion phases and navigator signals.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Undersample a series on golden-angle lines and extract navigators.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, required_unless_present = "full")]
        lines: Option<usize>,
        #[arg(long)]
        navigators: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        start_index: usize,
        /// Navigator output; defaults to `<out>` with a `.nav.mdst` extension.
        #[arg(long)]
        nav_out: Option<PathBuf>,
        /// Drop golden-angle samples that coincide with navigator locations.
        #[arg(long)]
        strict_isolation: bool,
        /// Sample every k-space location instead of golden-angle lines.
        #[arg(long, conflicts_with = "strict_isolation")]
        full: bool,
    },
    /// Estimate the frame-similarity graph from navigator signals.
    Graph {
        #[arg(long)]
        navigators: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unrolled network; one JSON record per epoch on stdout.
    Train {
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct with trained parameters and their lambdas.
    Reconstruct {
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the SNR of a reconstruction against a reference.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Train and score gridding, CNN-only and MoDL-STORM on a held-out phantom.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("usage: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

/// Writes the resolved configuration next to an output.
fn echo_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_atomic(path, format!("{}\n", cfg.to_json()).as_bytes())?;
    eprintln!("effective config: {}", path.display());
    Ok(())
}

fn echo_args(value: serde_json::Value) {
    eprintln!("effective config: {value}");
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            match cfg.precision {
                Precision::F32 => simulate::<f32>(&cfg, &out),
                Precision::F64 => simulate::<f64>(&cfg, &out),
            }
        }
        Command::Sample { input, lines, navigators, out, start_index, nav_out, strict_isolation, full } => {
            let nav_out = nav_out.unwrap_or_else(|| out.with_extension("nav.mdst"));
            echo_args(json!({
                "in": input, "lines": lines, "navigators": navigators, "start_index": start_index,
                "strict_isolation": strict_isolation, "full": full, "out": out, "nav_out": nav_out,
            }));
            let c = Container::read_file(&input)?;
            let opts =
                SampleArgs { lines, navigators, start_index, strict_isolation, full, out: &out, nav_out: &nav_out };
            match c.precision {
                Precision::F32 => sample::<f32>(&c, &opts),
                Precision::F64 => sample::<f64>(&c, &opts),
            }
        }
        Command::Graph { navigators, k, sigma, out } => {
            echo_args(json!({ "navigators": navigators, "k": k, "sigma": sigma, "out": out }));
            let c = Container::read_file(&navigators)?;
            let bw = sigma.map_or(Bandwidth::Auto, Bandwidth::Fixed);
            match c.precision {
                Precision::F32 => graph::<f32>(&c, bw, k, &out),
                Precision::F64 => graph::<f64>(&c, bw, k, &out),
            }
        }
        Command::Train { kspace, target, graph, config, out } => {
            let cfg = load_config(config.as_deref())?;
            echo_config(&cfg, &sibling(&out, ".config.json"))?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &kspace, &target, &graph, &out),
                Precision::F64 => train::<f64>(&cfg, &kspace, &target, &graph, &out),
            }
        }
        Command::Reconstruct { kspace, graph, params, config, out } => {
            let cfg = load_config(config.as_deref())?;
            echo_config(&cfg, &sibling(&out, ".config.json"))?;
            match cfg.precision {
                Precision::F32 => recon::<f32>(&cfg.unroll, &kspace, &graph, &params, &out),
                Precision::F64 => recon::<f64>(&cfg.unroll, &kspace, &graph, &params, &out),
            }
        }
        Command::Evaluate { recon, reference } => {
            let x = Container::read_file(&recon)?.to_series::<f64>()?;
            let r = Container::read_file(&reference)?.to_series::<f64>()?;
            let snr = snr_db(&x, &r)?;
            if snr.is_finite() {
                println!("{}", json!({ "snr_db": snr }));
            } else {
                println!("{}", json!({ "snr_db": "+inf" }));
            }
            Ok(())
        }
        Command::Compare { config, out } => {
            let cfg = load_config(config.as_deref())?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            echo_config(&cfg, &out.join("config.json"))?;
            match cfg.precision {
                Precision::F32 => compare::<f32>(&cfg, &out),
                Precision::F64 => compare::<f64>(&cfg, &out),
            }
        }
    }
}

fn simulate<T: Real>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    echo_config(cfg, &dir.join("config.json"))?;
    let p = &cfg.phantom;
    let (x, phases) = generate_phantom::<T>(p)?;
    let lines = NavigatorLines::centered(p.height, p.width, cfg.sampling.navigators)?;
    let nav = simulate_navigators(&x, &lines)?;
    Container::from_series(&x).write_file(dir.join("phantom.mdst"))?;
    Container::from_phases(&phases).write_file(dir.join("phases.mdst"))?;
    Container::from_navigators(&nav).write_file(dir.join("navigators.mdst"))?;
    println!("{}", json!({ "frames": p.nframes, "height": p.height, "width": p.width, "out": dir }));
    Ok(())
}

struct SampleArgs<'a> {
    lines: Option<usize>,
    navigators: usize,
    start_index: usize,
    strict_isolation: bool,
    full: bool,
    out: &'a Path,
    nav_out: &'a Path,
}

fn sample<T: Real>(c: &Container, a: &SampleArgs) -> Result<()> {
    let x = c.to_series::<T>()?;
    let (f, h, w) = x.shape();
    let nav = NavigatorLines::centered(h, w, a.navigators)?;
    let mut pattern = if a.full {
        SamplingPattern::full(f, h, w)
    } else {
        golden_angle_pattern(f, h, w, a.lines.unwrap_or(0), a.start_index)?
    };
    if a.strict_isolation {
        pattern = pattern.excluding(&nav)?;
    }
    let b = apply_a(&x, &pattern)?;
    Container::from_kspace(&b).write_file(a.out)?;
    Container::from_navigators(&simulate_navigators(&x, &nav)?).write_file(a.nav_out)?;
    let sampled: usize = (0..f).map(|t| pattern.sampled_count(t)).sum();
    println!("{}", json!({ "frames": f, "sampled_fraction": sampled as f64 / (f * h * w) as f64 }));
    Ok(())
}

fn graph<T: Real>(c: &Container, bw: Bandwidth, k: usize, out: &Path) -> Result<()> {
    let nav = c.to_navigators::<T>()?;
    let g = estimate_weights(&nav, bw, k)?;
    Container::from_graph(&g).write_file(out)?;
    let mean = g.degrees().iter().map(|d| d.as_f64()).sum::<f64>() / g.nframes() as f64;
    println!("{}", json!({ "frames": g.nframes(), "mean_degree": mean }));
    Ok(())
}

fn train<T: Real>(cfg: &RunConfig, kspace: &Path, target: &Path, graph: &Path, out: &Path) -> Result<()> {
    let b = Container::read_file(kspace)?.to_kspace::<T>()?;
    let x = Container::read_file(target)?.to_series::<T>()?;
    let g = Container::read_file(graph)?.to_graph::<T>()?;
    let init = DenoiserParams::<T>::init(&cfg.denoiser)?;
    let outcome = train_with_progress(&b, &x, &g, &cfg.unroll, init, |r| {
        println!("{}", serde_json::to_string(r).expect("record serializes"));
    })?;
    Container::from_params(&outcome.params, outcome.lambda1, outcome.lambda2).write_file(out)?;
    Container::from_history(&outcome.history).write_file(sibling(out, ".history.mdst"))?;
    Ok(())
}

fn recon<T: Real>(base: &UnrollConfig, kspace: &Path, graph: &Path, params: &Path, out: &Path) -> Result<()> {
    let b = Container::read_file(kspace)?.to_kspace::<T>()?;
    let g = Container::read_file(graph)?.to_graph::<T>()?;
    let (p, lambda1, lambda2) = Container::read_file(params)?.to_params::<T>()?;
    let cfg = UnrollConfig { lambda1, lambda2, ..base.clone() };
    let x = reconstruct(&b, &g, &p, &cfg)?.into_final();
    Container::from_series(&x).write_file(out)?;
    Ok(())
}

fn compare<T: Real>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let c = compare_baselines::<T>(cfg, |m, r| {
        eprintln!("{}", json!({ "method": m.name(), "outer": r.outer, "epoch": r.epoch, "loss": r.loss }));
    })?;
    c.write(dir)?;
    print!("{}", c.report.to_text());
    Ok(())
}
