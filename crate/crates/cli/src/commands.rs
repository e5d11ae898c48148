use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aoi_sched::bounds::BoundsReport;
use aoi_sched::index::AoiFunction;
use aoi_sched::mdp::{dp_optimal_policy, evaluate_policy, DEFAULT_STATE_BUDGET};
use aoi_sched::plant::{generate_ensemble, Dynamics, Ensemble, PlantModel, PlantSpec, SensorModel};
use aoi_sched::sched::{dp_problem, lightweight_schedule, DpCost, PolicySpec, SensorState};
use aoi_sim::{run_sweep, simulate as run_sim, write_csv, Metric, ResultsDocument, SimConfig, Sweep, SweepRow};
use serde::Serialize;

use crate::config::{load_plants, ExperimentConfig};
use crate::io::{write_atomic, CliError, CliResult};
use crate::{BoundsArgs, Cli, DpArgs, DynamicsArg, GenArgs, SimArgs};

fn parse_range(text: &str, what: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::Usage(format!("{what} must be 'lo,hi', got '{text}'"));
    let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn sensors_of(plants: Vec<PlantModel>) -> CliResult<Vec<SensorModel>> {
    Ok(plants.into_iter().map(SensorModel::new).collect::<Result<_, _>>()?)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("outputs serialize")
}

pub fn gen(cli: &Cli, args: &GenArgs) -> CliResult {
    let spec = PlantSpec {
        n: args.n,
        m: args.m,
        rho_range: parse_range(&args.rho_range, "--rho-range")?,
        p_range: parse_range(&args.p_range, "--p-range")?,
        dynamics: match args.dynamics {
            DynamicsArg::Gaussian => Dynamics::Gaussian,
            DynamicsArg::Normal => Dynamics::Normal,
        },
        ..PlantSpec::default()
    };
    let ensemble = Ensemble::new(generate_ensemble(&spec, args.count, cli.seed.unwrap_or(0))?);
    let text = ensemble.to_json();
    match &cli.out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            if !cli.json {
                println!("wrote {} plants to {}", ensemble.plants.len(), path.display());
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    path.map(ExperimentConfig::load).transpose().map(Option::unwrap_or_default)
}

fn sim_config(cli: &Cli, args: &SimArgs, cfg: &ExperimentConfig) -> CliResult<SimConfig> {
    let mut sim = cfg.sim.clone().unwrap_or_default();
    if let Some(h) = args.horizon {
        sim = sim.with_horizon(h);
    }
    if let Some(w) = args.warmup {
        sim.warmup = w;
    }
    if let Some(r) = args.runs {
        sim.runs = r;
    }
    if let Some(c) = args.channels {
        sim.channels = c;
    }
    if let Some(m) = &args.metric {
        sim.metric = m.parse::<Metric>()?;
    }
    if let Some(s) = cli.seed {
        sim.seed = s;
    }
    Ok(sim)
}

pub fn simulate(cli: &Cli, args: &SimArgs, sweep_required: bool) -> CliResult {
    let cfg = load_config(args.source.config.as_deref())?;
    let plants = cfg.resolve_plants(args.source.plants.as_deref(), cli.seed)?;
    let sim = sim_config(cli, args, &cfg)?;
    let names = if args.policies.is_empty() { &cfg.policies } else { &args.policies };
    let policies = if names.is_empty() {
        vec![sim.policy.clone()]
    } else {
        names.iter().map(|n| n.parse::<PolicySpec>()).collect::<Result<Vec<_>, _>>()?
    };
    let sweep = args.sweep.as_ref().or(cfg.sweep.as_ref()).map(|s| s.parse::<Sweep>()).transpose()?;
    if sweep_required && sweep.is_none() {
        return Err(CliError::Usage("sweep needs --sweep kind:lo:hi:count".into()));
    }

    let rows = match &sweep {
        Some(sweep) => run_sweep(&plants, &policies, &sim, sweep)?,
        None => {
            let sensors = sensors_of(plants)?;
            policies
                .iter()
                .map(|p| {
                    let config = SimConfig { policy: p.clone(), ..sim.clone() };
                    let report = run_sim(&sensors, &config)?;
                    Ok(SweepRow { sweep_value: None, policy: p.name().to_string(), report })
                })
                .collect::<CliResult<Vec<_>>>()?
        }
    };

    let mut csv = Vec::new();
    write_csv(&rows, &mut csv)?;
    let doc = ResultsDocument::new(rows);
    let csv_path = cli.out.clone().or(cfg.csv.clone());
    if let Some(path) = &csv_path {
        let json_path = cfg.json.clone().unwrap_or_else(|| path.with_extension("json"));
        write_atomic(path, &csv)?;
        write_atomic(&json_path, doc.to_json().as_bytes())?;
    }
    if cli.json {
        println!("{}", doc.to_json());
    } else if let Some(path) = &csv_path {
        print!("{}", summary_table(&doc.rows));
        println!("wrote {}", path.display());
    } else {
        print!("{}", String::from_utf8(csv).expect("csv is utf-8"));
    }

    let diverged: Vec<String> = doc
        .rows
        .iter()
        .filter(|r| r.report.diverged_runs > 0)
        .map(|r| format!("{} ({} of {} runs)", r.policy, r.report.diverged_runs, r.report.runs))
        .collect();
    if !diverged.is_empty() {
        return Err(CliError::Diverged(format!(
            "runs diverged for {}; check stability with the bounds command",
            diverged.join(", ")
        )));
    }
    Ok(())
}

fn summary_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>10}  {:<12} {:>14} {:>12} {:>12} {:>8}\n",
        "sweep", "policy", "mean_J", "ci95", "ns/decision", "diverged"
    );
    for r in rows {
        let value = r.sweep_value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{value:>10}  {:<12} {:>14.6} {:>12.6} {:>12.1} {:>8}",
            r.policy,
            r.report.mean_j,
            r.report.ci95,
            r.report.wall_time_per_decision * 1e9,
            r.report.diverged_runs
        );
    }
    s
}

pub fn bounds(cli: &Cli, args: &BoundsArgs) -> CliResult {
    let cfg = load_config(args.source.config.as_deref())?;
    let sensors = sensors_of(cfg.resolve_plants(args.source.plants.as_deref(), cli.seed)?)?;
    let m = args.channels.or(cfg.sim.as_ref().map(|s| s.channels)).unwrap_or(1);
    let report = BoundsReport::compute(&sensors, m)?;
    let text = to_json(&report);
    if let Some(path) = &cli.out {
        write_atomic(path, text.as_bytes())?;
    }
    if cli.json {
        println!("{text}");
        return Ok(());
    }
    print!("{}", bounds_summary(&sensors, &report));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "unavailable".into())
}

fn bounds_summary(sensors: &[SensorModel], r: &BoundsReport) -> String {
    let mut s = format!("{} sensors, {} channels\n", sensors.len(), r.m);
    for (i, sensor) in sensors.iter().enumerate() {
        let f: AoiFunction = sensor.aoi_function();
        let sufficient = match &r.sufficient_stable {
            Some(v) => {
                if v[i] {
                    "yes"
                } else {
                    "no"
                }
            }
            None => "n/a",
        };
        let _ = writeln!(
            s,
            "  sensor {i}: alpha {:.4}, beta {:.4}, p {:.3}, necessary condition {}, sufficient condition {sufficient}",
            f.alpha,
            f.beta,
            f.p,
            if r.necessary_stable[i] { "holds" } else { "VIOLATED" },
        );
    }
    let _ = writeln!(s, "lower bound on J:            {}", fmt_opt(r.lower_j));
    let _ = writeln!(s, "integer-threshold relaxation: {}", fmt_opt(r.lower_j_integer));
    let _ = writeln!(s, "origin lower bound:          {}", fmt_opt(r.lower_j_origin));
    let _ = writeln!(s, "upper bound on J:            {}", fmt_opt(r.upper_j));
    for note in &r.notes {
        let _ = writeln!(s, "note: {note}");
    }
    s
}

#[derive(Serialize)]
struct DpRow {
    m: usize,
    n: usize,
    ours: f64,
    optimal: f64,
    ratio: f64,
    instances: usize,
}

fn parse_grid(text: &str) -> CliResult<Vec<(usize, usize)>> {
    text.split(',')
        .map(|pair| {
            let bad = || CliError::Usage(format!("grid entries must be M:N, got '{pair}'"));
            let (m, n) = pair.trim().split_once(':').ok_or_else(bad)?;
            let (m, n): (usize, usize) = (m.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?);
            if m == 0 || m > n || n > 5 {
                return Err(CliError::Usage(format!("grid entry {m}:{n} needs 1 <= M <= N <= 5")));
            }
            Ok((m, n))
        })
        .collect()
}

pub fn dp(cli: &Cli, args: &DpArgs) -> CliResult {
    let grid = parse_grid(&args.grid)?;
    let pool = args.plants.as_deref().map(load_plants).transpose()?;
    let seed = cli.seed.unwrap_or(0);
    let spec = PlantSpec { n: args.n_dim, m: args.n_dim, ..PlantSpec::default() };
    let mut rows = Vec::new();
    for (k, &(m, n)) in grid.iter().enumerate() {
        let instances: Vec<Vec<PlantModel>> = match &pool {
            Some(pool) if pool.len() < n => {
                return Err(CliError::Usage(format!("N = {n} needs {n} plants, the file has {}", pool.len())))
            }
            Some(pool) => vec![pool[..n].to_vec()],
            None => (0..args.instances as u64)
                .map(|i| generate_ensemble(&spec, n, seed.wrapping_add(1000 * k as u64 + i)))
                .collect::<Result<_, _>>()?,
        };
        let (mut ours, mut optimal, mut ratio) = (0.0, 0.0, 0.0);
        for plants in &instances {
            let sensors = sensors_of(plants.clone())?;
            let fns: Vec<AoiFunction> = sensors.iter().map(SensorModel::aoi_function).collect();
            let problem = dp_problem(&sensors, m, args.cap, DpCost::TraceOfP);
            let best = dp_optimal_policy(&problem, DEFAULT_STATE_BUDGET)?.average_cost;
            let light = evaluate_policy(&problem, DEFAULT_STATE_BUDGET, |deltas| {
                let states: Vec<SensorState> = deltas.iter().map(|&d| SensorState::new(d)).collect();
                lightweight_schedule(&states, &fns, m).map(|d| d.scheduled).unwrap_or_default()
            })?;
            ours += light;
            optimal += best;
            ratio += light / best;
        }
        let count = instances.len() as f64;
        rows.push(DpRow {
            m,
            n,
            ours: ours / count,
            optimal: optimal / count,
            ratio: ratio / count,
            instances: instances.len(),
        });
    }

    let mut csv = String::from("M,N,ours,optimal,ratio\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", r.m, r.n, r.ours, r.optimal, r.ratio);
    }
    let json = to_json(&serde_json::json!({ "schema_version": 1, "rows": rows }));
    if let Some(path) = &cli.out {
        write_atomic(path, csv.as_bytes())?;
        write_atomic(&PathBuf::from(path).with_extension("json"), json.as_bytes())?;
    }
    if cli.json {
        println!("{json}");
    } else {
        println!("{:>2} {:>2} {:>12} {:>12} {:>8}", "M", "N", "ours", "optimal", "ratio");
        for r in &rows {
            println!("{:>2} {:>2} {:>12.4} {:>12.4} {:>8.4}", r.m, r.n, r.ours, r.optimal, r.ratio);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_grids_parse() {
        assert_eq!(parse_range("1.05, 1.3", "x").unwrap(), (1.05, 1.3));
        assert!(parse_range("1.05", "x").is_err());
        assert_eq!(parse_grid("1:2, 2:4").unwrap(), vec![(1, 2), (2, 4)]);
        assert!(parse_grid("1:6").is_err());
        assert!(parse_grid("3:2").is_err());
        assert!(parse_grid("x").is_err());
    }
}
