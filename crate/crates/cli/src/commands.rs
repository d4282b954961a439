//! Subcommand implementations over a shared prepared-artifact layout.

use crate::config::{EstimatorMode, RunConfig, TrialSource};
use crate::{CliError, ExitCode};
use mgafqmc::estimator::{DenseEstimator, Estimator, ShadowEstimator};
use mgafqmc::focksim::{
    build_trial, fci_of_cholesky, load_amplitudes, save_amplitudes, TrialState, DENSE_QUBIT_BUDGET,
};
use mgafqmc::integrals::{build_embedded, load_fcidump, CholeskyHamiltonian, EmbeddedSystem};
use mgafqmc::propagate::{
    analyze, dominant_determinant_walker, Afqmc, EnergyTrace, RunParams, SpinWalker,
};
use mgafqmc::rdm::estimate_1rdm;
use mgafqmc::shadows;
use mgafqmc::vce::{CorePartition, DenseActiveModel, ShadowActiveModel, VceEstimator};
use mgafqmc::{CMat, Complex64};

fn err_missing(msg: String) -> CliError {
    CliError {
        code: ExitCode::MissingInput,
        message: msg,
    }
}

fn err_numerical(msg: String) -> CliError {
    CliError {
        code: ExitCode::NumericalFailure,
        message: msg,
    }
}

fn err_capacity(msg: String) -> CliError {
    CliError {
        code: ExitCode::Capacity,
        message: msg,
    }
}

/// Prepared artifacts shared by the later stages.
pub struct Prepared {
    pub embedded: EmbeddedSystem,
    pub active_ham: CholeskyHamiltonian,
    pub eta_active: usize,
    pub n_alpha_active: usize,
    pub n_beta_active: usize,
}

fn load_and_embed(config: &RunConfig) -> Result<Prepared, CliError> {
    if !config.fcidump.exists() {
        return Err(err_missing(format!(
            "fcidump not found: {}",
            config.fcidump.display()
        )));
    }
    let ints = load_fcidump(&config.fcidump).map_err(|e| err_numerical(e.to_string()))?;
    let active: Vec<usize> = match &config.active {
        Some(list) => list.clone(),
        None => (0..ints.n_orb)
            .filter(|i| !config.core.contains(i))
            .collect(),
    };
    let embedded = build_embedded(&ints, &config.core, &active, config.chol_tol)
        .map_err(|e| err_numerical(e.to_string()))?;
    let active_ham = mgafqmc::integrals::cholesky_factorize(&embedded.active_ints, config.chol_tol)
        .map_err(|e| err_numerical(e.to_string()))?;
    let n_alpha_active = embedded.active_ints.n_elec_alpha;
    let n_beta_active = embedded.active_ints.n_elec_beta;
    Ok(Prepared {
        eta_active: n_alpha_active + n_beta_active,
        n_alpha_active,
        n_beta_active,
        embedded,
        active_ham,
    })
}

fn load_trial_state(config: &RunConfig, prepared: &Prepared) -> Result<TrialState, CliError> {
    let path = config.trial_file();
    if !path.exists() {
        return Err(err_missing(format!(
            "trial amplitudes not found: {} (run prepare first)",
            path.display()
        )));
    }
    let psi = load_amplitudes(&path).map_err(|e| err_numerical(e.to_string()))?;
    build_trial(psi, prepared.eta_active).map_err(|e| err_numerical(e.to_string()))
}

pub fn cmd_prepare(config: &RunConfig, force: bool, want_fci: bool) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| err_numerical(format!("cannot create output dir: {e}")))?;
    let prepared = load_and_embed(config)?;
    let n_act_qubits = 2 * prepared.embedded.active.len();

    let ham_path = config.ham_path();
    if force || !ham_path.exists() {
        prepared
            .active_ham
            .save(&ham_path)
            .map_err(|e| err_numerical(e.to_string()))?;
        println!(
            "hamiltonian: {} ({} fields, tol {:.1e})",
            ham_path.display(),
            prepared.active_ham.n_fields(),
            prepared.active_ham.chol_tol
        );
    } else {
        println!("hamiltonian: {} (cached)", ham_path.display());
    }
    let full_path = config.full_ham_path();
    if force || !full_path.exists() {
        prepared
            .embedded
            .full_ham
            .save(&full_path)
            .map_err(|e| err_numerical(e.to_string()))?;
    }

    let trial_path = config.trial_file();
    if force || !trial_path.exists() {
        match config.trial_source {
            TrialSource::Fci => {
                if n_act_qubits > DENSE_QUBIT_BUDGET {
                    return Err(err_capacity(format!(
                        "{n_act_qubits} active qubits exceed the dense budget {DENSE_QUBIT_BUDGET}"
                    )));
                }
                let (e_cas, ground) = mgafqmc::focksim::fci_ground_state(
                    &prepared.embedded.active_ints,
                    prepared.n_alpha_active,
                    prepared.n_beta_active,
                )
                .map_err(|e| err_numerical(e.to_string()))?;
                save_amplitudes(&ground, &trial_path).map_err(|e| err_numerical(e.to_string()))?;
                println!("trial: {} (CAS energy {e_cas:.10})", trial_path.display());
            }
            TrialSource::File => {
                return Err(err_missing(format!(
                    "trial_source = file but {} does not exist",
                    trial_path.display()
                )));
            }
        }
    } else {
        println!("trial: {} (cached)", trial_path.display());
    }

    let mut summary = String::new();
    summary.push_str(&format!(
        "orbitals_full = {}\ncore = {:?}\nactive = {:?}\nvirtual = {:?}\n",
        prepared.embedded.n_orb_full,
        prepared.embedded.core,
        prepared.embedded.active,
        prepared.embedded.virtuals
    ));
    summary.push_str(&format!(
        "electrons_active = ({}, {})\nfields_active = {}\nfields_full = {}\n",
        prepared.n_alpha_active,
        prepared.n_beta_active,
        prepared.active_ham.n_fields(),
        prepared.embedded.full_ham.n_fields()
    ));
    if want_fci || n_act_qubits <= DENSE_QUBIT_BUDGET {
        if n_act_qubits > DENSE_QUBIT_BUDGET {
            return Err(err_capacity(format!(
                "--fci requested but {n_act_qubits} qubits exceed the dense budget"
            )));
        }
        let (e_fci, _) = fci_of_cholesky(
            &prepared.active_ham,
            prepared.n_alpha_active,
            prepared.n_beta_active,
        )
        .map_err(|e| err_capacity(e.to_string()))?;
        println!("reference FCI (active space, factorized H): {e_fci:.10}");
        summary.push_str(&format!("fci_active = {e_fci:.12}\n"));
    }
    std::fs::write(config.summary_path(), summary)
        .map_err(|e| err_numerical(format!("cannot write summary: {e}")))?;
    Ok(())
}

pub fn cmd_shadows(config: &RunConfig, force: bool) -> Result<(), CliError> {
    let prepared = load_and_embed(config)?;
    let trial = load_trial_state(config, &prepared)?;
    let path = config.archive_path();
    let start = std::time::Instant::now();
    let set = if path.exists() && !force {
        let mut existing = shadows::load(&path).map_err(|e| err_numerical(e.to_string()))?;
        if existing.n_qubits != trial.psi_t.n_qubits || existing.eta != trial.eta {
            return Err(err_numerical(
                "existing archive does not match the prepared system".into(),
            ));
        }
        if existing.len() < config.n_shadows {
            let before = existing.len();
            shadows::extend(&mut existing, &trial, config.n_shadows)
                .map_err(|e| err_numerical(e.to_string()))?;
            println!("extended archive by {}", existing.len() - before);
        }
        existing
    } else {
        shadows::collect(&trial, config.n_shadows, config.seed)
            .map_err(|e| err_numerical(e.to_string()))?
    };
    shadows::save(&set, &path).map_err(|e| err_numerical(e.to_string()))?;
    let rate = set.len() as f64 / start.elapsed().as_secs_f64().max(1e-9);
    println!(
        "shadows: {} samples at {} ({rate:.0}/s)",
        set.len(),
        path.display()
    );
    // Particle-number quick check as the noise indicator.
    let rdm = estimate_1rdm(&set).map_err(|e| err_numerical(e.to_string()))?;
    let pn = rdm.particle_number();
    println!(
        "particle number: {pn:.4} ± {:.4} (expected {})",
        rdm.particle_number_std_err(),
        set.eta
    );
    if (pn - set.eta as f64).abs() > 0.1 {
        println!("warning: |Tr(1-RDM) - eta| exceeds 0.1; shadows look noisy");
    }
    Ok(())
}

fn initial_full_walker(prepared: &Prepared, ints_alpha: usize, ints_beta: usize) -> SpinWalker {
    // Core identity columns plus active Hartree-Fock columns at their full
    // positions.
    let n_full = prepared.embedded.n_orb_full;
    let n_core = prepared.embedded.core.len();
    let build = |n_elec_active: usize| {
        let mut m = CMat::zeros(n_full, n_core + n_elec_active);
        for (j, &c) in prepared.embedded.core.iter().enumerate() {
            m[(c, j)] = Complex64::new(1.0, 0.0);
        }
        for j in 0..n_elec_active {
            m[(prepared.embedded.active[j], n_core + j)] = Complex64::new(1.0, 0.0);
        }
        m
    };
    SpinWalker {
        alpha: build(ints_alpha),
        beta: build(ints_beta),
    }
}

pub fn cmd_run(config: &RunConfig, restore: bool) -> Result<(), CliError> {
    let prepared = load_and_embed(config)?;
    let trial = load_trial_state(config, &prepared)?;
    let mut params = RunParams {
        dtau: config.dtau,
        steps_per_block: config.steps_per_block,
        n_blocks: config.blocks,
        n_equil: config.n_equil,
        energy_every: config.energy_every,
        force_bias_cap: config.force_bias_cap,
        n_walkers: config.walkers,
        seed: config.seed,
    };
    if config.estimator == EstimatorMode::Exact && config.energy_every != 1 {
        params.energy_every = 1;
    }

    let start = std::time::Instant::now();
    let trace = if config.vce {
        let partition = CorePartition::from_embedded(&prepared.embedded)
            .map_err(|e| err_numerical(e.to_string()))?;
        let ham = prepared.embedded.full_ham.clone();
        let eta_total = prepared.eta_active + 2 * partition.n_core();
        let initial =
            initial_full_walker(&prepared, prepared.n_alpha_active, prepared.n_beta_active);
        match config.estimator {
            EstimatorMode::Exact => {
                let model = DenseActiveModel {
                    trial: trial.psi_t.clone(),
                    eta: prepared.eta_active,
                };
                let est = VceEstimator::new(ham.clone(), partition, model, eta_total)
                    .map_err(|e| err_numerical(e.to_string()))?;
                drive(config, params, &ham, &est, &initial, restore)?
            }
            EstimatorMode::Shadows => {
                let set = load_archive(config, &trial)?;
                let model = ShadowActiveModel { set };
                let est = VceEstimator::new(ham.clone(), partition, model, eta_total)
                    .map_err(|e| err_numerical(e.to_string()))?;
                drive(config, params, &ham, &est, &initial, restore)?
            }
        }
    } else {
        let ham = prepared.active_ham.clone();
        let initial = dominant_determinant_walker(&trial.psi_t);
        match config.estimator {
            EstimatorMode::Exact => {
                let est = DenseEstimator::new(trial.psi_t.clone(), trial.eta, ham.clone());
                drive(config, params, &ham, &est, &initial, restore)?
            }
            EstimatorMode::Shadows => {
                let set = load_archive(config, &trial)?;
                let mut est = ShadowEstimator::new(set, ham.clone());
                if let Some(k) = config.force_bias_samples {
                    est = est.with_force_bias_samples(k);
                }
                drive(config, params, &ham, &est, &initial, restore)?
            }
        }
    };

    std::fs::write(config.trace_path(), trace.to_csv())
        .map_err(|e| err_numerical(format!("cannot write trace: {e}")))?;
    let meta = format!(
        "elapsed_seconds = {:.3}\nblocks = {}\ndtau = {}\nwalkers = {}\nsteps_per_block = {}\nseed = {}\nestimator = {}\nvce = {}\n",
        start.elapsed().as_secs_f64(),
        trace.records.len(),
        config.dtau,
        config.walkers,
        config.steps_per_block,
        config.seed,
        match config.estimator {
            EstimatorMode::Exact => "exact",
            EstimatorMode::Shadows => "shadows",
        },
        config.vce
    );
    let _ = std::fs::write(config.meta_path(), meta);
    match analyze(&trace, config.n_equil) {
        Ok(result) => {
            println!(
                "energy: {:.8} ± {:.8}  (kept {} blocks, {} outliers removed, reblock level {})",
                result.mean, result.std_err, result.n_kept, result.n_outliers, result.reblock_level
            );
        }
        Err(e) => println!("analysis skipped: {e}"),
    }
    println!("trace: {}", config.trace_path().display());
    Ok(())
}

fn load_archive(
    config: &RunConfig,
    trial: &TrialState,
) -> Result<mgafqmc::shadows::ShadowSet, CliError> {
    let path = config.archive_path();
    if !path.exists() {
        return Err(err_missing(format!(
            "shadow archive not found: {} (run shadows first)",
            path.display()
        )));
    }
    let set = shadows::load(&path).map_err(|e| err_numerical(e.to_string()))?;
    if set.n_qubits != trial.psi_t.n_qubits || set.eta != trial.eta {
        return Err(err_numerical(
            "shadow archive does not match the prepared system".into(),
        ));
    }
    Ok(set)
}

fn drive<E: Estimator>(
    config: &RunConfig,
    params: RunParams,
    ham: &CholeskyHamiltonian,
    estimator: &E,
    initial: &SpinWalker,
    restore: bool,
) -> Result<EnergyTrace, CliError> {
    let ckpt = config.checkpoint_path();
    let mut run = if restore {
        if !ckpt.exists() {
            return Err(err_missing(format!(
                "--restore requested but {} does not exist",
                ckpt.display()
            )));
        }
        Afqmc::restore(&ckpt, params, ham, estimator).map_err(map_propagate_err)?
    } else {
        Afqmc::new(params, ham, estimator, initial).map_err(map_propagate_err)?
    };
    run.run(|state, record| {
        let _ = state.checkpoint(&ckpt);
        if record.block % 10 == 0 {
            println!(
                "block {:>4}: E = {:.8}  weight {:.3}  walkers {}",
                record.block, record.energy.re, record.total_weight, record.n_walkers
            );
        }
    })
    .map_err(map_propagate_err)?;
    Ok(run.trace.clone())
}

fn map_propagate_err(e: mgafqmc::propagate::PropagateError) -> CliError {
    use mgafqmc::propagate::PropagateError as P;
    match e {
        P::IncompatibleCheckpoint(msg) => CliError {
            code: ExitCode::IncompatibleCheckpoint,
            message: format!("incompatible checkpoint: {msg}"),
        },
        P::Io { path, source } => err_missing(format!("io error on {path}: {source}")),
        other => err_numerical(other.to_string()),
    }
}

pub fn cmd_analyze(config: &RunConfig) -> Result<(), CliError> {
    let path = config.trace_path();
    if !path.exists() {
        return Err(err_missing(format!(
            "trace not found: {} (run first)",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| err_numerical(format!("cannot read trace: {e}")))?;
    let trace = parse_trace_csv(&text).map_err(err_numerical)?;
    let result = analyze(&trace, config.n_equil).map_err(map_propagate_err)?;
    println!(
        "energy: {:.8} ± {:.8}  (kept {} blocks, {} outliers removed, reblock level {})",
        result.mean, result.std_err, result.n_kept, result.n_outliers, result.reblock_level
    );
    Ok(())
}

pub fn parse_trace_csv(text: &str) -> Result<EnergyTrace, String> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("block,") {
                return Err("unrecognized trace header".into());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(format!("line {}: expected 4 fields", i + 1));
        }
        let block: u64 = parts[0].parse().map_err(|_| format!("line {}", i + 1))?;
        let re: f64 = parts[1].parse().map_err(|_| format!("line {}", i + 1))?;
        let im: f64 = parts[2].parse().map_err(|_| format!("line {}", i + 1))?;
        let w: f64 = parts[3].parse().map_err(|_| format!("line {}", i + 1))?;
        records.push(mgafqmc::propagate::BlockRecord {
            block,
            energy: Complex64::new(re, im),
            total_weight: w,
            n_walkers: 0,
        });
    }
    Ok(EnergyTrace { records })
}

pub fn cmd_rdm(config: &RunConfig) -> Result<(), CliError> {
    let path = config.archive_path();
    if !path.exists() {
        return Err(err_missing(format!(
            "shadow archive not found: {}",
            path.display()
        )));
    }
    let set = shadows::load(&path).map_err(|e| err_numerical(e.to_string()))?;
    let rdm = estimate_1rdm(&set).map_err(|e| err_numerical(e.to_string()))?;
    std::fs::write(config.rdm_path(), rdm.to_csv())
        .map_err(|e| err_numerical(format!("cannot write rdm: {e}")))?;
    let pn = rdm.particle_number();
    println!(
        "particle number: {pn:.4} ± {:.4} (expected {})",
        rdm.particle_number_std_err(),
        set.eta
    );
    if (pn - set.eta as f64).abs() > 0.1 {
        println!("warning: |Tr(1-RDM) - eta| exceeds 0.1; shadows look noisy");
    }
    println!("rdm: {}", config.rdm_path().display());
    Ok(())
}
