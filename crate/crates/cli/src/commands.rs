use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hdsim::experiments::{self, BenchmarkConfig, EvalReport, Scenario};
use hdsim::model::{Dataset, ModelState, VariantKind};
use hdsim::persist;
use hdsim::sampler::{run_chain, run_chains, Chain, ChainConfig};
use hdsim::selection::{self, BicRow};

use crate::config::{resolve, RunArgs};
use crate::{CliError, DataArgs};

pub fn simulate(scenario: Scenario, n: usize, p: usize, regions: usize, times: usize, seed: u64, out_dir: &Path) -> Result<(), CliError> {
    let (data, truth) =
        experiments::generate(scenario, n, p, regions, times, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(out_dir)?;
    let x = out_dir.join("x.csv");
    let z = out_dir.join("z.csv");
    let obs = out_dir.join("observations.csv");
    persist::save_dataset(&data, Some(&x), &z, &obs)?;
    let truth_path = out_dir.join("truth.json");
    std::fs::write(&truth_path, to_json(&truth)?)?;
    println!(
        "wrote {} subjects, {} observations and truth to {}",
        data.n(),
        data.num_obs(),
        out_dir.display()
    );
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(hdsim::Error::Format(e.to_string())))
}

/// Loads the dataset a variant needs; the high-dimensional file is optional
/// only for the variant without it.
fn load_data(data: &DataArgs, kind: VariantKind) -> Result<Dataset, CliError> {
    let x = match (&data.x_file, kind.uses_x()) {
        (Some(_), false) => {
            warn!("variant {kind} does not use --x-file; ignoring it");
            None
        }
        (None, true) => return Err(CliError::Usage(format!("variant {kind} requires --x-file"))),
        (x, _) => x.as_deref(),
    };
    for p in x.iter().copied().chain([data.z_file.as_path(), data.observations.as_path()]) {
        if !p.exists() {
            return Err(CliError::Usage(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(persist::load_dataset(x, &data.z_file, &data.observations, data.regions)?)
}

/// Fit summary written next to the chain.
#[derive(Serialize, Deserialize, Debug)]
pub struct FitSummary {
    pub variant: VariantKind,
    pub draws: usize,
    pub posterior_mean_beta: Option<Vec<f64>>,
    pub posterior_mean_eta: Vec<Vec<f64>>,
    /// Per-coordinate inclusion frequencies of `β`.
    pub inclusion_frequencies: Vec<f64>,
    /// Coordinates with inclusion frequency above one half.
    pub selected: Vec<usize>,
    pub acceptance_rates: Vec<(String, f64)>,
    pub log_posterior: Vec<f64>,
    /// Subjects with at least one training observation.
    pub training_subjects: Vec<usize>,
}

pub fn summary_path(chain: &Path) -> PathBuf {
    let mut s = chain.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

fn summarize(chain: &Chain<ModelState>, cfg: &ChainConfig, data: &Dataset) -> hdsim::Result<FitSummary> {
    let num_alpha = chain.draws.first().map_or(0, |d| d.alpha.len());
    let mut eta = vec![vec![0.0; data.k()]; num_alpha];
    for d in &chain.draws {
        for (a, acc) in eta.iter_mut().enumerate() {
            acc.iter_mut().zip(d.eta(a)).for_each(|(s, v)| *s += v);
        }
    }
    let m = chain.len().max(1) as f64;
    eta.iter_mut().flatten().for_each(|v| *v /= m);
    let uses_x = cfg.variant.kind.uses_x();
    Ok(FitSummary {
        variant: cfg.variant.kind,
        draws: chain.len(),
        posterior_mean_beta: chain.posterior_mean_beta(),
        posterior_mean_eta: eta,
        inclusion_frequencies: if uses_x { selection::coordinate_frequencies(chain) } else { Vec::new() },
        selected: if uses_x && !chain.is_empty() { selection::select_variables(chain, 0.5)? } else { Vec::new() },
        acceptance_rates: chain.block_names.iter().cloned().zip(chain.acceptance_rates()).collect(),
        log_posterior: chain.log_posterior.clone(),
        training_subjects: data.observations().iter().map(|o| o.subject).collect::<BTreeSet<_>>().into_iter().collect(),
    })
}

fn write_fit(chain: &Chain<ModelState>, cfg: &ChainConfig, data: &Dataset, out: &Path) -> Result<(), CliError> {
    persist::save_chain(chain, out)?;
    let summary = summarize(chain, cfg, data)?;
    std::fs::write(summary_path(out), to_json(&summary)?)?;
    let rates: Vec<String> = summary.acceptance_rates.iter().map(|(b, r)| format!("{b}={r:.2}")).collect();
    println!(
        "{}: {} draws, {} selected coordinates, acceptance {}",
        out.display(),
        summary.draws,
        summary.selected.len(),
        rates.join(" ")
    );
    Ok(())
}

pub fn fit(data: &DataArgs, run: &RunArgs, chains: usize, out: &Path) -> Result<(), CliError> {
    if chains == 0 {
        return Err(CliError::Usage("--chains must be at least 1".into()));
    }
    let cfg = resolve(run)?;
    let dataset = load_data(data, cfg.variant.kind)?;
    if chains == 1 {
        let chain = run_chain(&dataset, &cfg)?;
        return write_fit(&chain, &cfg, &dataset, out);
    }
    for (c, chain) in run_chains(&dataset, &cfg, chains).into_iter().enumerate() {
        let chain = chain?;
        let mut path = out.as_os_str().to_owned();
        path.push(format!(".{c}"));
        let mut cfg_c = cfg.clone();
        cfg_c.seed = hdsim::sampler::chain_seed(cfg.seed, c);
        write_fit(&chain, &cfg_c, &dataset, Path::new(&path))?;
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("grid must be 'lo..hi' or a comma list, got '{s}'"));
    let grid: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if grid.is_empty() {
        return Err(bad());
    }
    Ok(grid)
}

fn write_bic(path: &Path, rows: &[BicRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(hdsim::Error::Format(e.to_string())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(hdsim::Error::Format(e.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn select_k(data: &DataArgs, variant: Option<VariantKind>, grid: &str, draws: usize, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let grid = parse_grid(grid)?;
    if draws == 0 {
        return Err(CliError::Usage("--draws must be at least 1".into()));
    }
    if let Some(&k) = grid.iter().find(|&&k| k < 4) {
        return Err(CliError::Usage(format!("basis size {k} is below the cubic minimum of 4")));
    }
    let kind = variant.unwrap_or(VariantKind::Base);
    let dataset = load_data(data, kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sel = selection::select_k_bic(&dataset, kind, &grid, draws, &mut rng)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "k,k_prime,mean_bic,params,n_obs")?;
    for r in &sel.k_table {
        writeln!(stdout, "{},{},{},{},{}", r.k, r.k_prime, r.mean_bic, r.params, r.n_obs)?;
    }
    writeln!(stdout, "selected K={} K'={}", sel.k, sel.k_prime)?;
    if let Some(out) = out {
        write_bic(out, &sel.k_table)?;
        let mut kp = out.as_os_str().to_owned();
        kp.push(".kprime.csv");
        write_bic(Path::new(&kp), &sel.k_prime_table)?;
    }
    Ok(())
}

pub const BENCHMARK_COLUMNS: [&str; 5] = ["n", "p", "method", "mse", "max_canonical_correlation"];

fn write_report(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    let fmt = |e: csv::Error| CliError::Runtime(hdsim::Error::Format(e.to_string()));
    let mut w = csv::Writer::from_path(out).map_err(fmt)?;
    w.write_record(BENCHMARK_COLUMNS).map_err(fmt)?;
    for r in report.summary() {
        w.write_record([
            r.n.to_string(),
            r.p.to_string(),
            r.method.clone(),
            r.mse.to_string(),
            r.canonical_correlation.to_string(),
        ])
        .map_err(fmt)?;
    }
    w.flush()?;
    let mut reps = out.as_os_str().to_owned();
    reps.push(".replications.csv");
    let mut w = csv::Writer::from_path(Path::new(&reps)).map_err(fmt)?;
    w.write_record(["replication", "method", "mse", "max_canonical_correlation", "support_overlap", "error"]).map_err(fmt)?;
    for r in &report.rows {
        w.write_record([
            r.replication.to_string(),
            r.method.clone(),
            r.mse.to_string(),
            r.canonical_correlation.to_string(),
            r.support_overlap.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(fmt)?;
    }
    w.flush()?;
    Ok(())
}

pub fn benchmark(cfg: &BenchmarkConfig, out: &Path) -> Result<(), CliError> {
    let report = experiments::run_benchmark(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("replication {} ({}) failed: {}", r.replication, r.method, r.error.as_deref().unwrap_or(""));
    }
    write_report(&report, out)?;
    println!("{:>6} {:>6} {:<18} {:>10} {:>10}", "n", "p", "method", "MSE", "max cc");
    for r in report.summary() {
        println!("{:>6} {:>6} {:<18} {:>10.4} {:>10.4}", r.n, r.p, r.method, r.mse, r.canonical_correlation);
    }
    let methods: BTreeSet<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    for m in methods {
        if report.method_rows(m).is_empty() {
            let first = report.rows.iter().find(|r| r.method == m && r.error.is_some()).expect("failed rows");
            return Err(CliError::Runtime(hdsim::Error::InvalidState(format!(
                "every replication of {m} failed; replication {}: {}",
                first.replication,
                first.error.as_deref().unwrap_or("")
            ))));
        }
    }
    info!("wrote {}", out.display());
    Ok(())
}

pub fn predict(chain_path: &Path, data: &DataArgs, summary: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let chain: Chain<ModelState> = persist::load_chain(chain_path)?;
    let cfg: ChainConfig = serde_json::from_str(&chain.config_json)
        .map_err(|e| CliError::Runtime(hdsim::Error::Format(format!("chain configuration: {e}"))))?;
    let first = chain
        .draws
        .first()
        .ok_or_else(|| CliError::Runtime(hdsim::Error::Empty("chain has no draws".into())))?;
    let chain_regions = first.intercept.len();
    if let Some(r) = data.regions {
        if r != chain_regions {
            return Err(CliError::Runtime(hdsim::Error::InvalidArgument(format!(
                "test data has {r} regions but the chain was fitted with {chain_regions}"
            ))));
        }
    }
    let args = DataArgs {
        regions: Some(chain_regions),
        ..data.clone()
    };
    let test = load_data(&args, cfg.variant.kind)?;
    let dims = |what: &str, expected: usize, got: usize| {
        if expected != got {
            Err(CliError::Runtime(hdsim::Error::InvalidArgument(format!(
                "{what}: chain has {expected}, test data has {got}"
            ))))
        } else {
            Ok(())
        }
    };
    if let Some(theta) = &first.theta {
        dims("high-dimensional covariates", theta.dim(), test.p())?;
    }
    dims("low-dimensional covariates", first.alpha[0].dim(), test.k())?;
    if cfg.variant.kind.has_random_effects() {
        dims("subjects", first.random_effects.len(), test.n())?;
        let path = summary.map(Path::to_path_buf).unwrap_or_else(|| summary_path(chain_path));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("random-effect predictions need the fit summary {}: {e}", path.display())))?;
        let fit: FitSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(hdsim::Error::Format(format!("fit summary: {e}"))))?;
        let trained: BTreeSet<usize> = fit.training_subjects.into_iter().collect();
        if let Some(o) = test.observations().iter().find(|o| !trained.contains(&o.subject)) {
            return Err(CliError::Runtime(hdsim::Error::InvalidArgument(format!(
                "test subject {} has no training observations, so its random effect is unknown; \
                 split visits within subjects so every test subject also appears in training",
                o.subject
            ))));
        }
    }
    let pred = experiments::predict_sim(&chain, &cfg.variant, &test)?;
    let err = experiments::prediction_error(&pred, &test)?;
    let fmt = |e: csv::Error| CliError::Runtime(hdsim::Error::Format(e.to_string()));
    let mut w = csv::Writer::from_path(out).map_err(fmt)?;
    w.write_record(["subject_id", "region_id", "time_scaled", "value", "prediction"]).map_err(fmt)?;
    for (o, p) in test.observations().iter().zip(&pred) {
        w.write_record([
            o.subject.to_string(),
            o.region.to_string(),
            format!("{:?}", o.time),
            format!("{:?}", o.value),
            format!("{p:?}"),
        ])
        .map_err(fmt)?;
    }
    w.flush()?;
    println!("prediction error: {err}");
    Ok(())
}
