use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use undercali::config::{load_config, DataSource, RunConfig};
use undercali::engine::{run_stream, Mode};
use undercali::forecaster::{
    dataset_mse, load_forecaster, save_forecaster, save_linear_grid, train_offline, GridDims,
    LinearGridForecaster, LocfForecaster, SourceForecaster, TrainConfig,
};
use undercali::imts_data::{grid_dataset, load_jsonl_all, write_jsonl, GriddedExample, ImtsSample};
use undercali::report::{
    ablation_csv, aggregate_of_run, batch_csv, kappa_sweep, kappa_sweep_csv, long_format,
    mean_aggregate, parse_batch_csv, Aggregate, BatchRow, KAPPA_SWEEP_DEFAULT,
};
use undercali::selfcheck::{standard_suite, GRAD_TOLERANCE};
use undercali::uncertainty::{
    load_ue, pretrain as pretrain_ue, save_ue, UePretrainConfig, UncertaintyEstimator,
};
use undercali::{Error, Result};

pub const OUT_ENV: &str = "UNDERCALI_OUT";

fn read_config(path: &Path) -> Result<RunConfig> {
    load_config(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", path.display())),
        other => other,
    })
}

fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    match std::env::var(OUT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.clone(),
    }
}

fn dims_of(cfg: &RunConfig) -> GridDims {
    GridDims { l_in: cfg.grid.l_in, l_out: cfg.grid.l_out, n_vars: cfg.n_vars }
}

fn check_dims(got: GridDims, want: GridDims, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!(
            "{what} has l_in={} l_out={} n_vars={} but the config declares l_in={} l_out={} n_vars={}",
            got.l_in, got.l_out, got.n_vars, want.l_in, want.l_out, want.n_vars
        )));
    }
    Ok(())
}

fn materialize(cfg: &RunConfig) -> Result<Vec<ImtsSample>> {
    match &cfg.data {
        DataSource::Jsonl(path) => {
            let samples = load_jsonl_all(path)?;
            for (i, s) in samples.iter().enumerate() {
                if s.n_vars() != cfg.n_vars {
                    return Err(Error::Config(format!(
                        "sample {i} in {} has {} variables, config declares {}",
                        path.display(),
                        s.n_vars(),
                        cfg.n_vars
                    )));
                }
            }
            Ok(samples)
        }
        DataSource::Scenario { .. } => {
            Ok(cfg.scenario().expect("scenario source").iter().collect())
        }
    }
}

/// Gridded stream plus the offline train/valid prefix lengths.
fn gridded_splits(cfg: &RunConfig) -> Result<(Vec<GriddedExample>, usize, usize)> {
    let samples = materialize(cfg)?;
    let examples = grid_dataset(&samples, &cfg.grid)?;
    let (n_train, n_valid, _) = cfg.split.counts(examples.len());
    Ok((examples, n_train, n_valid))
}

fn forecaster_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    cfg.forecaster_ckpt.clone().unwrap_or_else(|| dir.join("forecaster.ckpt"))
}

fn ue_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    cfg.ue_ckpt.clone().unwrap_or_else(|| dir.join("ue.ckpt"))
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {:?} in --seed", x.trim())))
        })
        .collect()
}

pub fn gen_data(config: &Path, out: Option<PathBuf>) -> Result<u8> {
    let cfg = read_config(config)?;
    let scenario = cfg
        .scenario()
        .ok_or_else(|| Error::Config("gen-data needs source = scenario".into()))?;
    let dir = out_dir(&cfg, out);
    fs::create_dir_all(&dir)?;
    let samples: Vec<ImtsSample> = scenario.iter().collect();
    let path = dir.join("stream.jsonl");
    write_jsonl(&path, &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(0)
}

pub fn pretrain(kind: &str, config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let cfg = read_config(config)?;
    let dir = out_dir(&cfg, out);
    fs::create_dir_all(&dir)?;
    let (examples, n_train, n_valid) = gridded_splits(&cfg)?;
    let train = &examples[..n_train];
    let valid = &examples[n_train..n_train + n_valid];
    let dims = dims_of(&cfg);
    let seed = seed.unwrap_or(0);

    match kind {
        "forecaster" => {
            let path = forecaster_path(&cfg, &dir);
            if cfg.forecaster_kind == "locf" {
                let f = LocfForecaster::new(dims);
                let eval = if valid.is_empty() { train } else { valid };
                let mse = dataset_mse(&f, eval)?;
                save_forecaster(&path, &f)?;
                println!("saved locf forecaster to {} (valid mse {mse:.4})", path.display());
            } else {
                let mut f = LinearGridForecaster::new(dims);
                let t = &cfg.forecaster_train;
                let tc = TrainConfig {
                    lr: t.lr,
                    batch_size: t.batch_size,
                    max_epochs: t.max_epochs,
                    patience: t.patience,
                    seed,
                };
                let report = train_offline(&mut f, train, valid, &tc)?;
                save_linear_grid(&path, &f)?;
                println!(
                    "saved linear_grid forecaster to {} after {} epochs (valid mse {:.4})",
                    path.display(),
                    report.epochs_run,
                    report.best_valid_mse
                );
            }
        }
        "ue" => {
            let f_path = forecaster_path(&cfg, &dir);
            if !f_path.exists() {
                return Err(Error::Config(format!(
                    "no forecaster checkpoint at {}; run pretrain --kind forecaster first",
                    f_path.display()
                )));
            }
            let f = load_forecaster(&f_path)?;
            check_dims(f.dims(), dims, "forecaster checkpoint")?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ue = UncertaintyEstimator::new(dims, &mut rng);
            let t = &cfg.ue_train;
            let uc = UePretrainConfig {
                lr: t.lr,
                batch_size: t.batch_size,
                max_epochs: t.max_epochs,
                patience: t.patience,
                seed,
            };
            let report = pretrain_ue(&mut ue, f.as_ref(), train, valid, &uc)?;
            let path = ue_path(&cfg, &dir);
            save_ue(&path, &ue)?;
            println!(
                "saved uncertainty estimator to {} after {} epochs (valid l1 {:.4}, constant baseline {:.4})",
                path.display(),
                report.epochs_run,
                report.best_valid_l1,
                report.constant_baseline_l1
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown pretrain kind {other:?} (expected forecaster or ue)"
            )))
        }
    }
    Ok(0)
}

fn load_components(
    cfg: &RunConfig,
    dir: &Path,
) -> Result<(Box<dyn SourceForecaster>, Option<UncertaintyEstimator>)> {
    let dims = dims_of(cfg);
    let f_path = forecaster_path(cfg, dir);
    if !f_path.exists() {
        return Err(Error::Config(format!(
            "no forecaster checkpoint at {}; run pretrain --kind forecaster first",
            f_path.display()
        )));
    }
    let f = load_forecaster(&f_path)?;
    check_dims(f.dims(), dims, "forecaster checkpoint")?;
    let u_path = ue_path(cfg, dir);
    let ue = if u_path.exists() {
        let ue = load_ue(&u_path)?;
        check_dims(ue.dims(), dims, "estimator checkpoint")?;
        Some(ue)
    } else {
        // Modes that need scores are rejected by the engine itself.
        None
    };
    Ok((f, ue))
}

fn run_seeds(
    cfg: &RunConfig,
    f: &dyn SourceForecaster,
    ue: Option<&UncertaintyEstimator>,
    online: &[GriddedExample],
    dir: &Path,
) -> Result<Vec<Aggregate>> {
    let mode = cfg.engine.mode.as_str();
    let mut aggs = Vec::new();
    for &seed in &cfg.seeds {
        let mut ecfg = cfg.engine.clone();
        ecfg.seed = seed;
        let report = run_stream(f, ue.cloned(), online, &ecfg)?;
        let csv = batch_csv(&report.outcomes);
        fs::write(dir.join(format!("batches_{mode}_seed{seed}.csv")), csv)?;
        let agg = aggregate_of_run(&report);
        fs::write(dir.join(format!("aggregate_{mode}_seed{seed}.json")), agg.to_json())?;
        aggs.push(agg);
    }
    Ok(aggs)
}

fn online_slice(
    examples: &[GriddedExample],
    n_train: usize,
    n_valid: usize,
) -> Result<&[GriddedExample]> {
    let online = &examples[n_train + n_valid..];
    if online.is_empty() {
        return Err(Error::Config("no online samples left after the offline split".into()));
    }
    Ok(online)
}

pub fn run_online(
    config: &Path,
    seed: Option<&str>,
    mode: Option<&str>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = parse_seed_list(s)?;
    }
    if let Some(m) = mode {
        cfg.engine.mode = Mode::parse(m)?;
    }
    let dir = out_dir(&cfg, out);
    fs::create_dir_all(&dir)?;
    let (examples, n_train, n_valid) = gridded_splits(&cfg)?;
    let online = online_slice(&examples, n_train, n_valid)?;
    let (f, ue) = load_components(&cfg, &dir)?;
    let aggs = run_seeds(&cfg, f.as_ref(), ue.as_ref(), online, &dir)?;
    let mean = mean_aggregate(&aggs)?;
    let mode = cfg.engine.mode.as_str();
    fs::write(dir.join(format!("aggregate_{mode}.json")), mean.to_json())?;
    println!(
        "{mode}: mse {:.4} (std {:.4}), mae {:.4}, update frequency {:.3}, {} batches x {} seeds",
        mean.mse,
        mean.mse_std,
        mean.mae,
        mean.update_frequency,
        mean.n_batches,
        cfg.seeds.len()
    );
    Ok(0)
}

pub fn ablate(config: &Path, seed: Option<&str>, out: Option<PathBuf>) -> Result<u8> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = parse_seed_list(s)?;
    }
    let dir = out_dir(&cfg, out);
    fs::create_dir_all(&dir)?;
    let (examples, n_train, n_valid) = gridded_splits(&cfg)?;
    let online = online_slice(&examples, n_train, n_valid)?;
    let (f, ue) = load_components(&cfg, &dir)?;
    if ue.is_none() {
        return Err(Error::Config(
            "ablation needs an estimator checkpoint; run pretrain --kind ue first".into(),
        ));
    }
    let mut means = Vec::new();
    for mode in Mode::all() {
        cfg.engine.mode = mode;
        let aggs = run_seeds(&cfg, f.as_ref(), ue.as_ref(), online, &dir)?;
        let mean = mean_aggregate(&aggs)?;
        fs::write(dir.join(format!("aggregate_{}.json", mode.as_str())), mean.to_json())?;
        println!(
            "{:<24} mse {:.4} (std {:.4})  update frequency {:.3}",
            mode.as_str(),
            mean.mse,
            mean.mse_std,
            mean.update_frequency
        );
        means.push(mean);
    }
    let path = dir.join("ablation.csv");
    fs::write(&path, ablation_csv(&means))?;
    println!("wrote {}", path.display());
    Ok(0)
}

pub fn gradcheck(seed: u64) -> Result<u8> {
    let suite = standard_suite(seed)?;
    let mut n_failed = 0usize;
    for entry in &suite {
        let r = &entry.report;
        let status = if entry.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<16} {status}  worst {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}, {} coords)",
            entry.name, r.worst_rel, r.worst_name, r.worst_index, r.analytic, r.numeric, r.n_checked
        );
        if !entry.passed() {
            n_failed += 1;
        }
    }
    if n_failed > 0 {
        eprintln!("{n_failed} component(s) exceed tolerance {GRAD_TOLERANCE:e}");
        return Ok(2);
    }
    println!("all gradients within {GRAD_TOLERANCE:e} of finite differences");
    Ok(0)
}

pub fn report(dirs: &[PathBuf], column: &str, alpha_trig: f64, out: &Path) -> Result<u8> {
    let mut runs: Vec<(String, Vec<BatchRow>)> = Vec::new();
    for dir in dirs {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("batches_") && n.ends_with(".csv"))
            })
            .collect();
        paths.sort();
        for path in paths {
            let rows = parse_batch_csv(&fs::read_to_string(&path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let stem = path.file_stem().unwrap().to_string_lossy();
            let run = stem.trim_start_matches("batches_").to_string();
            let label = if dirs.len() > 1 {
                let dir_name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string());
                format!("{dir_name}/{run}")
            } else {
                run
            };
            runs.push((label, rows));
        }
    }
    if runs.is_empty() {
        return Err(Error::Config("no batches_*.csv files found in the given directories".into()));
    }
    fs::create_dir_all(out)?;

    let long = long_format(&runs, column)?;
    let n_rows = long.lines().count() - 1;
    let long_path = out.join(format!("long_{column}.csv"));
    fs::write(&long_path, long)?;
    println!("merged {n_rows} rows from {} runs into {}", runs.len(), long_path.display());

    // Replay the trigger sweep on the first run that recorded scores.
    let scored = runs
        .iter()
        .find(|(_, rows)| rows.iter().any(|r| r.mean_uncertainty.is_finite()));
    match scored {
        Some((label, rows)) => {
            let sweep = kappa_sweep(rows, alpha_trig, &KAPPA_SWEEP_DEFAULT)?;
            let sweep_path = out.join("kappa_sweep.csv");
            fs::write(&sweep_path, kappa_sweep_csv(&sweep))?;
            println!("threshold sweep over {label} written to {}", sweep_path.display());
        }
        None => println!("no run recorded uncertainty scores; skipping the threshold sweep"),
    }
    Ok(0)
}
