use std::path::Path;

use cbmpc::environments::EnvironmentSpec;
use cbmpc::harness::{
    aggregate, run_batch, run_episode, write_csv, write_episode_artifacts, BatchEntry, BatchJob, BatchSpec,
    EpisodeResult,
};
use cbmpc::model::{validate_scenario, Scenario};
use serde::Serialize;

use crate::config::RunConfig;

pub const EXIT_SUCCESS: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

/// Summary written when an episode could not be run at all.
#[derive(Serialize)]
struct ErrorSummary<'a> {
    planner: String,
    robots: Option<usize>,
    seed: u64,
    error: &'a str,
}

fn write_error_summary(dir: &Path, stem: &str, summary: &ErrorSummary<'_>) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(dir.join(format!("{stem}.json")), text)
}

fn load_scenario(cfg: &RunConfig) -> Result<Scenario, (u8, String)> {
    match &cfg.scenario_file {
        Some(path) => {
            let s = Scenario::load(path).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", path.display())))?;
            let report = validate_scenario(&s);
            if !report.is_valid() {
                eprintln!("warning: scenario fails feasibility checks: {report:?}");
            }
            Ok(s)
        }
        None => EnvironmentSpec {
            narrow: cfg.narrow,
            ..EnvironmentSpec::new(cfg.env, cfg.seed, cfg.robots)
        }
        .build()
        .map_err(|e| (EXIT_FAILURE, e.to_string())),
    }
}

fn report(result: &EpisodeResult, stem: &str) {
    let minimum = result.min_separation();
    println!(
        "{stem}: {:?} after {} steps, makespan {:.3} m, min separation {}",
        result.outcome,
        result.steps(),
        result.makespan,
        if minimum.is_finite() { format!("{minimum:.3} m") } else { "n/a".into() },
    );
    if let Some(msg) = &result.message {
        println!("  {msg}");
    }
}

pub fn run(cfg: &RunConfig) -> u8 {
    let stem = format!("{}_{}_s{}_n{}", cfg.planner, cfg.env_label(), cfg.seed, cfg.mpc.horizon);
    let scenario = match load_scenario(cfg) {
        Ok(s) => s,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return code;
        }
    };
    let mut planner = match cfg.planner.build(&scenario, &cfg.mpc, cfg.seed) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match run_episode(&scenario, planner.as_mut(), &cfg.mpc, &cfg.harness()) {
        Ok(result) => {
            report(&result, &stem);
            if let Err(e) = write_episode_artifacts(&result, cfg.planner.timing_mode(), &cfg.out, &stem) {
                eprintln!("error: writing artifacts: {e}");
                return EXIT_FAILURE;
            }
            if result.is_success() {
                EXIT_SUCCESS
            } else {
                EXIT_FAILURE
            }
        }
        Err(e) => {
            let message = e.to_string();
            eprintln!("error: {message}");
            let summary = ErrorSummary {
                planner: cfg.planner.to_string(),
                robots: Some(scenario.num_agents()),
                seed: cfg.seed,
                error: &message,
            };
            if let Err(e) = write_error_summary(&cfg.out, &stem, &summary) {
                eprintln!("error: writing summary: {e}");
            }
            EXIT_FAILURE
        }
    }
}

fn job_stem(cfg: &RunConfig, job: &BatchJob) -> String {
    format!("{}_{}_r{}_s{}_n{}", job.planner, cfg.env, job.robots, job.seed, cfg.mpc.horizon)
}

fn write_entry(cfg: &RunConfig, entry: &BatchEntry) -> Result<(), String> {
    let stem = job_stem(cfg, &entry.job);
    match &entry.result {
        Ok(result) => write_episode_artifacts(result, entry.job.planner.timing_mode(), &cfg.out, &stem)
            .map_err(|e| e.to_string()),
        Err(message) => {
            let summary = ErrorSummary {
                planner: entry.job.planner.to_string(),
                robots: Some(entry.job.robots),
                seed: entry.job.seed,
                error: message,
            };
            write_error_summary(&cfg.out, &stem, &summary).map_err(|e| e.to_string())
        }
    }
}

pub fn batch(cfg: &RunConfig) -> u8 {
    let spec = BatchSpec {
        narrow: cfg.narrow,
        params: cfg.mpc.clone(),
        harness: cfg.harness(),
        workers: cfg.batch.workers,
        ..BatchSpec::new(
            cfg.env,
            cfg.batch.planners.clone(),
            cfg.batch.robot_counts.clone(),
            cfg.batch.trials,
            cfg.seed,
        )
    };
    let entries = match run_batch(&spec) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    for entry in &entries {
        let outcome = match &entry.result {
            Ok(r) => format!("{:?}", r.outcome),
            Err(e) => format!("error ({e})"),
        };
        println!("{}: {outcome}", job_stem(cfg, &entry.job));
        if let Err(e) = write_entry(cfg, entry) {
            eprintln!("error: writing artifacts: {e}");
            return EXIT_FAILURE;
        }
    }

    let (rows, timing) = aggregate(&entries);
    let tag = format!("{}_n{}_s{}", cfg.env, cfg.mpc.horizon, cfg.seed);
    let written = std::fs::create_dir_all(&cfg.out)
        .and_then(|_| std::fs::File::create(cfg.out.join(format!("aggregate_{tag}.csv"))))
        .map_err(cbmpc::Error::from)
        .and_then(|f| write_csv(&rows, f))
        .and_then(|_| {
            let f = std::fs::File::create(cfg.out.join(format!("timing_{tag}.csv")))?;
            write_csv(&timing, f)
        });
    if let Err(e) = written {
        eprintln!("error: writing aggregate: {e}");
        return EXIT_FAILURE;
    }

    println!();
    println!("{:<12} {:>6} {:>9} {:>9} {:>10} {:>9}", "planner", "robots", "success", "makespan", "C_avg", "T_avg");
    for (row, t) in rows.iter().zip(&timing) {
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
        println!(
            "{:<12} {:>6} {:>4}/{:<4} {:>9} {:>10} {:>9}",
            row.planner.to_string(),
            row.robots,
            row.successes,
            row.trials,
            opt(row.makespan, 3),
            opt(row.c_avg, 2),
            opt(t.t_avg, 4),
        );
    }
    EXIT_SUCCESS
}
