//! Experiment runner: dispatches subcommands to the library modules,
//! writes CSV/JSON artifacts stamped with the config hash, and reports
//! scientific check failures through the exit code (0 ok, 1 check failed,
//! 2 usage or config error).

use clap::{Parser, Subcommand};
use polymer_lab::config::ExperimentConfig;
use polymer_lab::decomposition::{estimate_irreducible_kernel, KernelEstimateOptions};
use polymer_lab::disorder::{
    basic_quenched, calibrate_weak_disorder_kernel, mixingale_diagnostics, sinai_ledger,
    strong_disorder_ratio, weak_disorder_geometry, MixingaleOptions, StrongDisorderOptions,
};
use polymer_lab::environment::sample_environment;
use polymer_lab::geometry::{
    legendre_fenchel_1d_fast, polar, support_function, tau_curvature, ConvexBody,
    ConvexGridFunction,
};
use polymer_lab::lattice::{BoxRegion, ORIGIN};
use polymer_lab::numeric::{mean_and_stderr, splitmix64};
use polymer_lab::partition::{annealed_log_ladder, quenched_partition};
use polymer_lab::renewal::{renewal_1d, renewal_limit_rate, solve_shape_at, RenewalKernel};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "polymer-lab", about = "stretched polymer laboratory")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Worker pool width; 0 picks a default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quenched log partition functions over environment seeds.
    Quenched {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Annealed partition function by exhaustive enumeration.
    Annealed {
        /// Exact enumeration (the only mode; kept for interface clarity).
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        n: Option<usize>,
        /// Named preset instead of a config file.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Scalar renewal sequence and its limit deviations.
    Renewal {
        /// One of srw1d, geometric, half.
        #[arg(long, default_value = "geometric")]
        kernel: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Irreducible kernel estimation for the two-dimensional preset.
    Decompose {
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Convex geometry self-checks.
    Geometry,
    /// Ledger identity and slab diagnostics on the calibrated kernel.
    WeakDisorder {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Quenched/annealed ratio statistics.
    StrongDisorder {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Oracle suite over the shipped presets; prints a pass matrix.
    Selftest,
}

fn write_artifact(out: &Path, name: &str, contents: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), contents)
}

fn summary(out: &Path, cfg: &ExperimentConfig, cmd: &str, body: serde_json::Value) {
    let doc = serde_json::json!({
        "subcommand": cmd,
        "config_hash": cfg.hash(),
        "results": body,
    });
    if let Err(e) = write_artifact(out, "summary.json", &format!("{doc:#}\n")) {
        eprintln!("cannot write summary: {e}");
    }
}

fn fail(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::from_path(path) {
            Ok(c) => c,
            Err(e) => return fail(&e.to_string()),
        },
        None => match &cli.cmd {
            Cmd::Annealed { preset: Some(name), .. } => match ExperimentConfig::preset(name) {
                Ok(c) => c,
                Err(e) => return fail(&e.to_string()),
            },
            Cmd::StrongDisorder { .. } => ExperimentConfig::preset("traps-d2-strong").unwrap(),
            _ => ExperimentConfig::preset("traps-d2").unwrap(),
        },
    };
    cfg.apply_env();
    if let Some(s) = cli.seed {
        cfg.run.base_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.out = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t;
    }
    if cfg.run.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build_global()
        {
            return fail(&format!("worker pool: {e}"));
        }
    }
    let out = PathBuf::from(&cfg.run.out);
    let run = match &cli.cmd {
        Cmd::Quenched { n, seeds } => run_quenched(&cfg, &out, *n, *seeds),
        Cmd::Annealed { n, .. } => run_annealed(&cfg, &out, *n),
        Cmd::Renewal { kernel, n } => run_renewal(&cfg, &out, kernel, *n),
        Cmd::Decompose { n_max } => run_decompose(&cfg, &out, *n_max),
        Cmd::Geometry => run_geometry(&cfg, &out),
        Cmd::WeakDisorder { n, seeds } => run_weak(&cfg, &out, *n, *seeds),
        Cmd::StrongDisorder { n, seeds } => run_strong(&cfg, &out, *n, *seeds),
        Cmd::Selftest => run_selftest(&cfg, &out),
    };
    match run {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => fail(&e),
    }
}

type RunResult = Result<bool, String>;

fn run_quenched(
    cfg: &ExperimentConfig,
    out: &Path,
    n: Option<usize>,
    seeds: Option<usize>,
) -> RunResult {
    let n = n.unwrap_or(cfg.engine.n_max);
    let seeds = seeds.unwrap_or(cfg.run.seeds);
    let model = cfg.polymer_model(0.0).map_err(|e| e.to_string())?;
    let radius = n as i32 * model.steps.range();
    let dim = model.dimension();
    let ladders: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let env_seed = splitmix64(cfg.run.base_seed ^ (s as u64).wrapping_mul(0x9e37));
            let env = sample_environment(&model.law, BoxRegion::cube(dim, ORIGIN, radius), env_seed)
                .map_err(|e| e.to_string())?;
            Ok(quenched_partition(&model, &env, n).map_err(|e| e.to_string())?.log_ladder)
        })
        .collect::<Result<_, String>>()?;
    let mut csv = String::from("seed,n,log_z\n");
    for (s, ladder) in ladders.iter().enumerate() {
        for (k, v) in ladder.iter().enumerate() {
            csv.push_str(&format!("{s},{k},{v}\n"));
        }
    }
    write_artifact(out, "quenched.csv", &csv).map_err(|e| e.to_string())?;
    let finals: Vec<f64> = ladders.iter().map(|l| l[n] / n as f64).collect();
    let alive: Vec<f64> = finals.iter().copied().filter(|v| v.is_finite()).collect();
    let (mean, stderr) =
        if alive.is_empty() { (f64::NEG_INFINITY, 0.0) } else { mean_and_stderr(&alive) };
    summary(
        out,
        cfg,
        "quenched",
        serde_json::json!({
            "n": n, "seeds": seeds,
            "alive_fraction": alive.len() as f64 / seeds as f64,
            "free_energy_mean": mean, "free_energy_stderr": stderr,
        }),
    );
    println!("quenched: {seeds} seeds, n={n}, mean (1/n) log Z = {mean:.6}");
    Ok(true)
}

fn run_annealed(cfg: &ExperimentConfig, out: &Path, n: Option<usize>) -> RunResult {
    let n = n.unwrap_or(cfg.engine.n_max.min(12));
    let ladder = annealed_log_ladder(
        &cfg.steps(),
        &cfg.law().map_err(|e| e.to_string())?,
        &cfg.h4(),
        n,
        cfg.engine.cap,
    )
    .map_err(|e| e.to_string())?;
    let mut csv = String::from("n,log_z\n");
    for (k, v) in ladder.iter().enumerate() {
        csv.push_str(&format!("{k},{v}\n"));
    }
    write_artifact(out, "annealed.csv", &csv).map_err(|e| e.to_string())?;
    summary(out, cfg, "annealed", serde_json::json!({ "n": n, "log_z": ladder[n] }));
    println!("annealed: log Z_{n} = {}", ladder[n]);
    Ok(true)
}

fn named_kernel(name: &str) -> Result<RenewalKernel, String> {
    let entries: Vec<([i32; 4], u32, f64)> = match name {
        // one-dimensional walk step, duration 1
        "srw1d" => vec![([1, 0, 0, 0], 1, 0.5), ([-1, 0, 0, 0], 1, 0.5)],
        // geometric durations, for which t(n) reaches 1/mu immediately
        "geometric" => (1..=60u32)
            .map(|m| ([m as i32, 0, 0, 0], m, 0.5f64.powi(m as i32)))
            .collect(),
        // two durations, exponential approach to the limit at rate log 2
        "half" => vec![([1, 0, 0, 0], 1, 0.5), ([2, 0, 0, 0], 2, 0.5)],
        other => return Err(format!("unknown kernel {other}")),
    };
    RenewalKernel::new(1, entries).map_err(|e| e.to_string())
}

fn run_renewal(cfg: &ExperimentConfig, out: &Path, kernel: &str, n: usize) -> RunResult {
    let kernel = named_kernel(kernel)?;
    // renewal_1d takes the duration law indexed from 1
    let f = &kernel.time_marginal(kernel.n_max())[1..];
    let t = renewal_1d(f, n);
    let mu = kernel.mean_time();
    let report = renewal_limit_rate(&t, mu);
    let mut csv = String::from("n,t,deviation\n");
    for k in 0..=n {
        let dev = (t[k] - 1.0 / mu).abs();
        csv.push_str(&format!("{k},{},{dev}\n", t[k]));
    }
    write_artifact(out, "renewal.csv", &csv).map_err(|e| e.to_string())?;
    summary(
        out,
        cfg,
        "renewal",
        serde_json::json!({
            "n": n, "mu": mu, "limit": report.limit,
            "sup_late_deviation": report.sup_late_deviation,
            "fitted_rate": report.fitted_rate,
        }),
    );
    println!(
        "renewal: mu={mu:.6}, sup late deviation {:.3e}",
        report.sup_late_deviation
    );
    Ok(true)
}

fn run_decompose(cfg: &ExperimentConfig, out: &Path, n_max: Option<usize>) -> RunResult {
    let law = cfg.law().map_err(|e| e.to_string())?;
    let top = n_max.unwrap_or(12);
    let opts = KernelEstimateOptions {
        n_list: (1..=3).map(|k| top.saturating_sub(2 * (3 - k))).collect(),
        cap: cfg.engine.cap.max(1 << 28),
        directions: cfg.engine.directions,
        ..KernelEstimateOptions::default()
    };
    let (kernel, diag) =
        estimate_irreducible_kernel(&cfg.steps(), &law, cfg.h4(), &opts)
            .map_err(|e| e.to_string())?;
    let mut csv = String::from("n_max,mass\n");
    for (nm, mass) in &diag.masses {
        csv.push_str(&format!("{nm},{mass}\n"));
    }
    write_artifact(out, "kernel_mass.csv", &csv).map_err(|e| e.to_string())?;
    write_artifact(out, "kernel.txt", &kernel.to_text()).map_err(|e| e.to_string())?;
    summary(
        out,
        cfg,
        "decompose",
        serde_json::json!({
            "lambda": diag.lambda,
            "mass": kernel.total_mass(),
            "chi": diag.chi, "nu": diag.nu,
        }),
    );
    println!("decompose: lambda={:.4}, kernel mass {:.4}", diag.lambda, kernel.total_mass());
    Ok(true)
}

fn run_geometry(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    // double conjugation returns the convex function
    let grid = ConvexGridFunction::from_fn(
        1,
        [-4.0, 0.0, 0.0, 0.0],
        [0.05, 1.0, 1.0, 1.0],
        [161, 1, 1, 1],
        |x| 0.5 * x[0] * x[0],
    );
    let dual = legendre_fenchel_1d_fast(&grid, &grid).map_err(|e| e.to_string())?;
    let back = legendre_fenchel_1d_fast(&dual, &grid).map_err(|e| e.to_string())?;
    let lf_err = grid
        .values
        .iter()
        .zip(&back.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // circle of radius rho has curvature 1/rho in the Euclidean sense,
    // and tau-curvature rho under the support-function convention
    let rho = 1.7;
    let curv = tau_curvature(|_| rho, 0.3, 1e-4);
    let curv_err = (curv - rho).abs();
    // polar of the unit ball is itself
    let ball = ConvexBody::table_from_fn(|_| 1.0);
    let pol = polar(&ball).map_err(|e| e.to_string())?;
    let polar_err = (support_function(&pol, &[1.0, 0.0, 0.0, 0.0]) - 1.0).abs();
    let ok = lf_err < 1e-9 && curv_err < 1e-5 && polar_err < 1e-6;
    summary(
        out,
        cfg,
        "geometry",
        serde_json::json!({
            "legendre_involution_error": lf_err,
            "circle_curvature_error": curv_err,
            "polar_involution_error": polar_err,
            "pass": ok,
        }),
    );
    println!(
        "geometry: LF {lf_err:.2e}, curvature {curv_err:.2e}, polar {polar_err:.2e} -> {}",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}

fn run_weak(
    cfg: &ExperimentConfig,
    out: &Path,
    n: Option<usize>,
    seeds: Option<usize>,
) -> RunResult {
    if cfg.model.dimension != 2 {
        return Err("weak-disorder runs on the two-dimensional preset".into());
    }
    let n_max = n.unwrap_or(cfg.engine.n_max.max(20));
    let seeds = seeds.unwrap_or(cfg.run.seeds);
    let law = cfg.law().map_err(|e| e.to_string())?;
    let steps = cfg.steps();
    let geom = weak_disorder_geometry(
        &steps,
        &law,
        cfg.h4(),
        8,
        cfg.engine.directions,
        polymer_lab::decomposition::DEFAULT_DELTAS,
        cfg.engine.cap.min(1 << 22),
    )
    .map_err(|e| e.to_string())?;
    let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, cfg.engine.m_cap)
        .map_err(|e| e.to_string())?;
    let radius = (n_max + kernel.m_cap) as i32 * steps.range();
    let model = cfg.polymer_model(kernel.lambda).map_err(|e| e.to_string())?;
    let residuals: Vec<f64> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let env_seed = splitmix64(cfg.run.base_seed ^ (s as u64).wrapping_mul(0x51ab));
            let env = sample_environment(&law, BoxRegion::cube(2, ORIGIN, radius), env_seed)
                .map_err(|e| e.to_string())?;
            let table = basic_quenched(&model, &env, &geom, 3, kernel.m_cap)
                .map_err(|e| e.to_string())?;
            let ledger =
                sinai_ledger(&table, &kernel, &env, n_max).map_err(|e| e.to_string())?;
            if s == 0 {
                let _ = write_artifact(out, "ledger_seed0.csv", &ledger.to_csv());
            }
            Ok(ledger.max_residual())
        })
        .collect::<Result<_, String>>()?;
    let worst = residuals.iter().cloned().fold(0.0, f64::max);
    let mix = mixingale_diagnostics(
        &kernel,
        &MixingaleOptions {
            n_max: n_max.min(12),
            seeds: seeds.clamp(8, 60),
            base_seed: cfg.run.base_seed,
            resamples: 0,
            k_list: vec![],
            ell_probes: vec![],
            ..MixingaleOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let ok = worst <= cfg.engine.tolerance;
    summary(
        out,
        cfg,
        "weak-disorder",
        serde_json::json!({
            "n": n_max, "seeds": seeds,
            "lambda_star": kernel.lambda, "mu": kernel.mu,
            "max_ledger_residual": worst,
            "ell_exponent": mix.ell_exponent,
            "pass": ok,
        }),
    );
    println!(
        "weak-disorder: worst ledger residual {worst:.3e} over {seeds} seeds -> {}",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}

fn run_strong(
    cfg: &ExperimentConfig,
    out: &Path,
    n: Option<usize>,
    seeds: Option<usize>,
) -> RunResult {
    if cfg.model.dimension != 2 {
        return Err("strong-disorder runs on the two-dimensional preset".into());
    }
    let n = n.unwrap_or(cfg.engine.n_max);
    let model = cfg.polymer_model(0.0).map_err(|e| e.to_string())?;
    let opts = StrongDisorderOptions {
        ladder: vec![n / 2, n],
        seeds: seeds.unwrap_or(cfg.run.seeds),
        base_seed: cfg.run.base_seed,
        cap: cfg.engine.cap,
    };
    let report = strong_disorder_ratio(&model, &opts).map_err(|e| e.to_string())?;
    write_artifact(out, "strong_disorder.csv", &report.to_csv()).map_err(|e| e.to_string())?;
    let top = report.rows.last().unwrap();
    summary(
        out,
        cfg,
        "strong-disorder",
        serde_json::json!({
            "n": top.n, "seeds": opts.seeds,
            "median": top.quantiles[2],
            "negative_fraction": top.negative_fraction,
            "median_negative_99": top.median_negative_99,
            "ratio_mean": top.ratio_mean,
        }),
    );
    println!(
        "strong-disorder: median (1/n) log ratio at n={} is {:.4} ({})",
        top.n,
        top.quantiles[2],
        if top.median_negative_99 { "negative at 99%" } else { "not significant" }
    );
    Ok(true)
}

fn run_selftest(cfg: &ExperimentConfig, out: &Path) -> RunResult {
    let mut rows: Vec<(&str, bool, String)> = Vec::new();
    // geometric-duration kernel hits its renewal limit immediately
    {
        let f: Vec<f64> = (1..=60).map(|m| 0.5f64.powi(m)).collect();
        let t = renewal_1d(&f, 120);
        let dev = (1..=120).map(|k| (t[k] - 0.5).abs()).fold(0.0, f64::max);
        rows.push(("renewal geometric limit", dev < 1e-12, format!("{dev:.2e}")));
    }
    // shape function of the +-1 duration-1 kernel is log cosh
    {
        let kernel = named_kernel("srw1d")?;
        let xi = [0.7, 0.0, 0.0, 0.0];
        let pt = solve_shape_at(&kernel, &xi, 0.0).map_err(|e| e.to_string())?;
        let err = (pt.lambda - 0.7f64.cosh().ln()).abs();
        rows.push(("shape log cosh", err < 1e-10, format!("{err:.2e}")));
    }
    // annealed oracle: half-density traps in one dimension, three steps
    {
        let half = ExperimentConfig::preset("traps-half").map_err(|e| e.to_string())?;
        let ladder = annealed_log_ladder(
            &half.steps(),
            &half.law().map_err(|e| e.to_string())?,
            &half.h4(),
            3,
            1 << 10,
        )
        .map_err(|e| e.to_string())?;
        let err = (ladder[3] - 0.1875f64.ln()).abs();
        rows.push(("annealed traps oracle", err < 1e-12, format!("{err:.2e}")));
    }
    // ledger identity on one seed of the shipped preset
    {
        let law = cfg.law().map_err(|e| e.to_string())?;
        let steps = cfg.steps();
        let geom = weak_disorder_geometry(
            &steps,
            &law,
            cfg.h4(),
            8,
            128,
            polymer_lab::decomposition::DEFAULT_DELTAS,
            1 << 20,
        )
        .map_err(|e| e.to_string())?;
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 5)
            .map_err(|e| e.to_string())?;
        let model = cfg.polymer_model(kernel.lambda).map_err(|e| e.to_string())?;
        let env = sample_environment(
            &law,
            BoxRegion::cube(2, ORIGIN, 25),
            splitmix64(cfg.run.base_seed ^ 1),
        )
        .map_err(|e| e.to_string())?;
        let table =
            basic_quenched(&model, &env, &geom, 3, kernel.m_cap).map_err(|e| e.to_string())?;
        let ledger = sinai_ledger(&table, &kernel, &env, 20).map_err(|e| e.to_string())?;
        let worst = ledger.max_residual();
        rows.push(("ledger identity", worst < 1e-10, format!("{worst:.2e}")));
    }
    // geometry block reuses its own pass logic
    {
        let ok = run_geometry(cfg, &out.join("geometry"))?;
        rows.push(("geometry suite", ok, String::new()));
    }
    let mut all_ok = true;
    let mut matrix = String::new();
    for (name, ok, detail) in &rows {
        all_ok &= ok;
        let line = format!(
            "{name:<28} {}  {detail}",
            if *ok { "pass" } else { "FAIL" }
        );
        println!("{line}");
        matrix.push_str(&line);
        matrix.push('\n');
    }
    write_artifact(out, "selftest.txt", &matrix).map_err(|e| e.to_string())?;
    summary(out, cfg, "selftest", serde_json::json!({ "pass": all_ok, "checks": rows.len() }));
    Ok(all_ok)
}
