//! The five subcommands. Every artifact is written atomically (temp file
//! plus rename) and is byte-deterministic given the config and seeds; the
//! only volatile field is `wall_secs` inside metadata.json.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use overparam_core::data::{
    load_idx, normalize_to_sphere, sample_mixture, validate_separability, Dataset,
    SeparabilityReport, COVARIANCE_CONVENTION,
};
use overparam_core::diagnostics::{
    distance_scaling_fit, steps_to_accuracy, update_spectrum, DiagnosticsRecord,
};
use overparam_core::lemmacheck::{
    check_coupling_bound, margin_histogram, random_nonsmooth_battery, BatteryReport,
    CouplingBoundReport, RunMeta,
};
use overparam_core::model::{init_network_with, load_checkpoint, save_checkpoint};
use overparam_core::train::{
    cells_dataset, full_batch_gd_run, sgd_run, TrainMode, Trajectory, WeightedCell,
};

use crate::config::{DataConfig, ExperimentConfig, RepeatSeeds, SCHEMA_VERSION};
use crate::CliError;

const BATTERY_CASES: usize = 1000;
const BATTERY_GRID: usize = 10_000;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .ok_or_else(|| CliError::Io(format!("bad output path {}", path.display())))?;
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::Io(format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("mkdir {}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Io(format!("serialize: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Builds (train, test) per the data section. Mixture data comes from one
/// sampling call split in two so both halves share centers.
fn build_datasets(config: &ExperimentConfig, data_seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match &config.data {
        DataConfig::Mixture {
            n_train, n_test, ..
        } => {
            let spec = config.data.mixture_spec()?.expect("mixture config");
            let all = sample_mixture(&spec, n_train + n_test, data_seed);
            all.split_at(*n_train)
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_train,
            n_test,
            ..
        } => {
            let train = load_idx(train_images, train_labels).map_err(CliError::from_core)?;
            let test = load_idx(test_images, test_labels).map_err(CliError::from_core)?;
            let train = match n_train {
                Some(n) => train.split_at((*n).min(train.len())).0,
                None => train,
            };
            let test = match n_test {
                Some(n) => test.split_at((*n).min(test.len())).0,
                None => test,
            };
            (train, test)
        }
    };
    if config.data.normalize() {
        Ok((
            normalize_to_sphere(&train).map_err(CliError::from_core)?,
            normalize_to_sphere(&test).map_err(CliError::from_core)?,
        ))
    } else {
        Ok((train, test))
    }
}

#[derive(serde::Serialize)]
struct SeparabilityFile<'a> {
    schema_version: u64,
    covariance_convention: &'static str,
    train: &'a SeparabilityReport,
    test: &'a SeparabilityReport,
}

pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let (train, test) = build_datasets(config, config.repeat_seeds(0).data)?;
    let train_report = validate_separability(&train).map_err(CliError::from_core)?;
    let test_report = validate_separability(&test).map_err(CliError::from_core)?;

    write_atomic(&out.join("train.csv"), train.to_csv().as_bytes())?;
    write_atomic(&out.join("test.csv"), test.to_csv().as_bytes())?;
    write_atomic(
        &out.join("separability.json"),
        &to_json(&SeparabilityFile {
            schema_version: SCHEMA_VERSION,
            covariance_convention: COVARIANCE_CONVENTION,
            train: &train_report,
            test: &test_report,
        })?,
    )?;

    println!(
        "generate: {} train / {} test points (dim {})",
        train.len(),
        test.len(),
        train.dim()
    );
    println!(
        "separability (train): delta_hat={:.6} lambda_hat={:.6} satisfies_a1={}",
        train_report.delta_hat, train_report.lambda_hat, train_report.satisfies_a1
    );
    Ok(())
}

/// Everything verify-lemmas and spectrum need to re-derive a run.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct RunMetadata {
    pub schema_version: u64,
    pub command: String,
    pub m: usize,
    pub eta: f64,
    pub seeds_data: u64,
    pub seeds_model: u64,
    pub seeds_train: u64,
    pub repeat: usize,
    pub covariance_convention: String,
    pub init_sigma_convention: String,
    pub steps: usize,
    pub batch_size: usize,
    pub max_row_grad_norm: f64,
    pub delta_hat: f64,
    pub lambda_hat: f64,
    pub satisfies_a1: bool,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub final_coupling_fraction: f64,
    pub final_relative_distance: f64,
    pub config: ExperimentConfig,
    /// Volatile; excluded from byte-identity comparisons.
    pub wall_secs: f64,
}

struct RunOutput {
    trajectory: Trajectory,
    separability: SeparabilityReport,
    seeds: RepeatSeeds,
    /// Present when the caller wants a checkpoint written.
    w0: Option<overparam_core::linalg::Matrix>,
}

/// Executes one repeat at width `m`.
fn run_one(
    config: &ExperimentConfig,
    m: usize,
    seeds: RepeatSeeds,
    keep_w0: bool,
) -> Result<RunOutput, CliError> {
    let (train, test) = build_datasets(config, seeds.data)?;
    let separability = validate_separability(&train).map_err(CliError::from_core)?;
    let (params, mut snapshot) = init_network_with(
        m,
        train.dim(),
        config.model.k,
        seeds.model,
        config.model.init_sigma_convention,
    );
    let cfg = config.train.train_config(m, seeds.train);

    let trajectory = match config.train.mode {
        TrainMode::MinibatchSgd => {
            snapshot.attach_reference(&test);
            sgd_run(params, &snapshot, &train, &test, &cfg).map_err(CliError::from_core)?
        }
        TrainMode::FullBatchGd => {
            let cells = representative_cells(config, &train)?;
            let cell_ds = cells_dataset(&cells).map_err(CliError::from_core)?;
            snapshot.attach_reference(&cell_ds);
            full_batch_gd_run(params, &snapshot, &cells, &cfg).map_err(CliError::from_core)?
        }
    };
    Ok(RunOutput {
        trajectory,
        separability,
        seeds,
        w0: keep_w0.then(|| snapshot.into_w0()),
    })
}

/// One weighted representative per (class, component) cell: the first point
/// of each cell, weighted by the configured component probabilities (or the
/// empirical cell frequencies when none are configured).
fn representative_cells(
    config: &ExperimentConfig,
    train: &Dataset,
) -> Result<Vec<WeightedCell>, CliError> {
    let reps = train.cell_representatives().map_err(CliError::from_core)?;
    let probs: Vec<f64> = match config.data.mixture_spec()? {
        Some(spec) => spec.probs,
        None => {
            let mut counts = vec![0usize; train.k() * train.l()];
            for s in 0..train.len() {
                counts[train.label(s) * train.l() + train.component(s)] += 1;
            }
            counts
                .iter()
                .map(|&c| c as f64 / train.len() as f64)
                .collect()
        }
    };
    Ok(reps
        .iter()
        .map(|&s| {
            let cell = train.label(s) * train.l() + train.component(s);
            WeightedCell {
                x: train.point(s).to_vec(),
                class: train.label(s),
                component: train.component(s),
                prob: probs[cell],
            }
        })
        .collect())
}

fn run_dir(base: &Path, repeat: usize) -> PathBuf {
    base.join(format!("run_{repeat:03}"))
}

fn write_run_artifacts(
    config: &ExperimentConfig,
    command: &str,
    dir: &Path,
    m: usize,
    output: &RunOutput,
    with_checkpoint: bool,
) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let traj = &output.trajectory;
    write_atomic(&dir.join("trajectory.csv"), traj.to_csv().as_bytes())?;
    if with_checkpoint {
        let w0 = output
            .w0
            .clone()
            .expect("checkpointed runs keep their initialization");
        let snap = overparam_core::model::InitSnapshot::new(w0);
        let tmp = dir.join("checkpoint.bin.tmp");
        save_checkpoint(
            &tmp,
            &traj.final_params,
            &snap,
            output.seeds.model,
            config.model.init_sigma_convention,
        )
        .map_err(CliError::from_core)?;
        std::fs::rename(&tmp, dir.join("checkpoint.bin"))
            .map_err(|e| CliError::Io(format!("rename checkpoint: {e}")))?;
    }
    let last = traj.records.last().expect("runs always record");
    let meta = RunMetadata {
        schema_version: SCHEMA_VERSION,
        command: command.into(),
        m,
        eta: traj.config.eta,
        seeds_data: output.seeds.data,
        seeds_model: output.seeds.model,
        seeds_train: output.seeds.train,
        repeat: output.seeds.repeat,
        covariance_convention: COVARIANCE_CONVENTION.into(),
        init_sigma_convention: config.model.init_sigma_convention.tag().into(),
        steps: traj.config.steps,
        batch_size: traj.config.batch_size,
        max_row_grad_norm: traj.max_row_grad_norm,
        delta_hat: output.separability.delta_hat,
        lambda_hat: output.separability.lambda_hat,
        satisfies_a1: output.separability.satisfies_a1,
        final_train_loss: last.train_loss,
        final_test_accuracy: last.test_accuracy,
        final_coupling_fraction: last.coupling_fraction,
        final_relative_distance: last.relative_distance,
        config: config.clone(),
        wall_secs: traj.wall_secs,
    };
    write_atomic(&dir.join("metadata.json"), &to_json(&meta)?)
}

pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let m = config.model.m;
    let outputs: Vec<Result<RunOutput, CliError>> = (0..config.repeats)
        .into_par_iter()
        .map(|rep| run_one(config, m, config.repeat_seeds(rep), true))
        .collect();
    for (rep, result) in outputs.into_iter().enumerate() {
        let output = result?;
        let dir = run_dir(out, rep);
        write_run_artifacts(config, "train", &dir, m, &output, true)?;
        let last = output.trajectory.records.last().unwrap();
        println!(
            "run {rep}: m={m} eta={:.6e} acc={:.4} coupling={:.4} rel_dist={:.4} ({:.1}s)",
            output.trajectory.config.eta,
            last.test_accuracy,
            last.coupling_fraction,
            last.relative_distance,
            output.trajectory.wall_secs
        );
    }
    Ok(())
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cmd_sweep(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let sweep = config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep command needs a sweep list".into()))?;
    ensure_dir(out)?;

    let jobs: Vec<(usize, usize)> = sweep
        .iter()
        .flat_map(|&m| (0..config.repeats).map(move |rep| (m, rep)))
        .collect();
    let results: Vec<Result<RunOutput, CliError>> = jobs
        .par_iter()
        .map(|&(m, rep)| run_one(config, m, config.repeat_seeds(rep), false))
        .collect();

    let mut by_m: Vec<Vec<RunOutput>> = sweep.iter().map(|_| Vec::new()).collect();
    for (&(m, _rep), result) in jobs.iter().zip(results) {
        let output = result?;
        let idx = sweep.iter().position(|&v| v == m).unwrap();
        by_m[idx].push(output);
    }

    // per-run artifacts
    for (&m, outputs) in sweep.iter().zip(&by_m) {
        for output in outputs {
            let dir = out.join(format!("m{m}")).join(format!(
                "run_{:03}",
                output.seeds.repeat
            ));
            write_run_artifacts(config, "sweep", &dir, m, output, false)?;
        }
    }

    // aggregate.csv: mean and population std per (m, step) for each column
    let mut agg = String::from(
        "m,step,train_loss_mean,train_loss_std,test_acc_mean,test_acc_std,\
         coupling_mean,coupling_std,rel_dist_mean,rel_dist_std\n",
    );
    for (&m, outputs) in sweep.iter().zip(&by_m) {
        let n_records = outputs[0].trajectory.records.len();
        for i in 0..n_records {
            let rows: Vec<&DiagnosticsRecord> =
                outputs.iter().map(|o| &o.trajectory.records[i]).collect();
            let step = rows[0].step;
            let stat = |f: &dyn Fn(&DiagnosticsRecord) -> f64| {
                let vals: Vec<f64> = rows.iter().map(|r| f(r)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                (mean, var.sqrt())
            };
            let (lm, ls) = stat(&|r| r.train_loss);
            let (am, as_) = stat(&|r| r.test_accuracy);
            let (cm, cs) = stat(&|r| r.coupling_fraction);
            let (dm, dsd) = stat(&|r| r.relative_distance);
            agg.push_str(&format!(
                "{m},{step},{},{},{},{},{},{},{},{}\n",
                fmt17(lm),
                fmt17(ls),
                fmt17(am),
                fmt17(as_),
                fmt17(cm),
                fmt17(cs),
                fmt17(dm),
                fmt17(dsd)
            ));
        }
    }
    write_atomic(&out.join("aggregate.csv"), agg.as_bytes())?;

    // steps_table.csv + the scaling fit at the configured accuracy target
    let target = config.accuracy_target;
    let mut table = String::from("m,repeat,steps_to_target,rel_dist_at_target\n");
    let mut fit_points = Vec::new();
    for (&m, outputs) in sweep.iter().zip(&by_m) {
        let mut dists = Vec::new();
        for output in outputs {
            let steps = steps_to_accuracy(&output.trajectory, target);
            let dist = output
                .trajectory
                .records
                .iter()
                .find(|r| r.test_accuracy >= target)
                .map(|r| r.relative_distance);
            table.push_str(&format!(
                "{m},{},{},{}\n",
                output.seeds.repeat,
                steps.map_or("never".into(), |s| s.to_string()),
                dist.map_or("never".into(), fmt17),
            ));
            if let Some(d) = dist {
                dists.push(d);
            }
        }
        if !dists.is_empty() {
            let mean = dists.iter().sum::<f64>() / dists.len() as f64;
            fit_points.push((m as f64, mean));
        }
    }
    write_atomic(&out.join("steps_table.csv"), table.as_bytes())?;

    #[derive(serde::Serialize)]
    struct ScalingFit {
        schema_version: u64,
        accuracy_target: f64,
        points: Vec<(f64, f64)>,
        slope: Option<f64>,
        intercept: Option<f64>,
        note: Option<String>,
    }
    let fit = match distance_scaling_fit(&fit_points) {
        Ok((slope, intercept)) => {
            println!("scaling fit: slope={slope:.4} intercept={intercept:.4}");
            ScalingFit {
                schema_version: SCHEMA_VERSION,
                accuracy_target: target,
                points: fit_points,
                slope: Some(slope),
                intercept: Some(intercept),
                note: None,
            }
        }
        Err(e) => ScalingFit {
            schema_version: SCHEMA_VERSION,
            accuracy_target: target,
            points: fit_points,
            slope: None,
            intercept: None,
            note: Some(format!("fit unavailable: {e}")),
        },
    };
    write_atomic(&out.join("scaling_fit.json"), &to_json(&fit)?)?;
    println!("sweep complete: {} widths x {} repeats", sweep.len(), config.repeats);
    Ok(())
}

fn run_dirs(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .map_err(|e| CliError::Io(format!("read {}: {e}", out.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("run_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Io(format!(
            "no run_* directories under {} (run the train command first)",
            out.display()
        )));
    }
    Ok(dirs)
}

fn load_metadata(dir: &Path) -> Result<RunMetadata, CliError> {
    let path = dir.join("metadata.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(serde::Serialize)]
struct LemmaFile {
    schema_version: u64,
    tau_rule: &'static str,
    battery: BatteryReport,
    coupling: Vec<CouplingRunEntry>,
    runs_checked: usize,
    bound_held_count: usize,
}

#[derive(serde::Serialize)]
struct CouplingRunEntry {
    run_dir: String,
    m: usize,
    sigma: f64,
    delta_hat: f64,
    margin_fraction_below_tau: f64,
    report: CouplingBoundReport,
}

pub fn cmd_verify_lemmas(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    // Randomized separation-inequality battery; the statement is universal,
    // so a single violation is a hard failure (nonzero exit).
    let battery = random_nonsmooth_battery(BATTERY_CASES, config.model.seed, BATTERY_GRID)
        .map_err(CliError::from_core)?;
    println!(
        "non-smooth battery: {}/{} hold",
        battery.cases - battery.violations.len(),
        battery.cases
    );

    let mut coupling = Vec::new();
    let mut held = 0usize;
    for dir in run_dirs(out)? {
        let meta = load_metadata(&dir)?;
        let ck = load_checkpoint(&dir.join("checkpoint.bin")).map_err(CliError::from_core)?;
        let (train, _) = build_datasets(&meta.config, meta.seeds_data)?;
        let sigma = ck.convention.std_dev(meta.m);
        let kl = (train.k() * train.l()) as f64;
        let tau = sigma * meta.delta_hat / (16.0 * std::f64::consts::E * kl);
        let run_meta = RunMeta {
            eta: meta.eta,
            steps: meta.steps,
            max_row_grad_norm: meta.max_row_grad_norm,
        };
        let report = check_coupling_bound(&ck.params, &ck.snapshot, &train, tau, sigma, &run_meta)
            .map_err(CliError::from_core)?;
        // margin context on the same representatives the bound uses
        let reps = train.cell_representatives().map_err(CliError::from_core)?;
        let rep_cells: Vec<WeightedCell> = reps
            .iter()
            .map(|&s| WeightedCell {
                x: train.point(s).to_vec(),
                class: train.label(s),
                component: train.component(s),
                prob: 1.0 / reps.len() as f64,
            })
            .collect();
        let rep_ds = cells_dataset(&rep_cells).map_err(CliError::from_core)?;
        let margins = margin_histogram(&ck.snapshot, &rep_ds);
        if report.bound_holds {
            held += 1;
        }
        println!(
            "{}: uncoupled={:.4} bound={:.4} holds={} premise_met={}",
            dir.display(),
            report.empirical_uncoupled_fraction,
            report.bound,
            report.bound_holds,
            report.premise_met
        );
        let dir_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        coupling.push(CouplingRunEntry {
            run_dir: dir_name,
            m: meta.m,
            sigma,
            delta_hat: meta.delta_hat,
            margin_fraction_below_tau: margins.fraction_below(tau),
            report,
        });
    }

    let file = LemmaFile {
        schema_version: SCHEMA_VERSION,
        tau_rule: "sigma * delta_hat / (16 * e * k * l)",
        runs_checked: coupling.len(),
        bound_held_count: held,
        battery,
        coupling,
    };
    write_atomic(&out.join("lemmas.json"), &to_json(&file)?)?;
    if !file.battery.all_hold {
        return Err(CliError::Numeric(format!(
            "non-smooth battery found {} violations",
            file.battery.violations.len()
        )));
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SpectrumSummary {
    schema_version: u64,
    m: usize,
    d: usize,
    update_top_mass: Vec<f64>,
    weight_top_mass: Vec<f64>,
    top20_update_mass: f64,
    top20_weight_mass: f64,
}

pub fn cmd_spectrum(_config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    for dir in run_dirs(out)? {
        let ck = load_checkpoint(&dir.join("checkpoint.bin")).map_err(CliError::from_core)?;
        let report = update_spectrum(&ck.params, &ck.snapshot).map_err(CliError::from_core)?;
        write_atomic(&dir.join("spectrum.csv"), report.to_csv().as_bytes())?;
        let summary = SpectrumSummary {
            schema_version: SCHEMA_VERSION,
            m: ck.params.m(),
            d: ck.params.d(),
            top20_update_mass: report.update_spectrum.top_mass(20),
            top20_weight_mass: report.weight_spectrum.top_mass(20),
            update_top_mass: report.update_top_mass,
            weight_top_mass: report.weight_top_mass,
        };
        write_atomic(&dir.join("spectrum_summary.json"), &to_json(&summary)?)?;
        println!(
            "{}: top-20 update mass {:.4}, top-20 weight mass {:.4}",
            dir.display(),
            summary.top20_update_mass,
            summary.top20_weight_mass
        );
    }
    Ok(())
}
