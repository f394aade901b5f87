//! Subcommand implementations. Each prints a short deterministic summary
//! on success, so repeated runs with the same flags produce identical
//! output streams as well as identical files.


use crowdagg::{
    evaluate_holdout, fit_icov_full, fit_ind_ml, fit_ind_vb, fit_latent_ml, fit_latent_vb,
    generate_synthetic, predict_closed_form, predict_via_icov, aggregate_ind, Error,
    FitOptions, IndependentNoiseModel, Method, MethodParams, Observation, ObservationSet,
    SgdOptions, SweepSpec, SyntheticConfig,
};

use crate::args::{
    Cli, Command, EvalArgs, FitArgs, FitMethod, PredictArgs, PredictMode, SweepArgs, SynthArgs,
};
use crate::io;
use crate::CliError;

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(args, cli.verbose),
        Command::Fit(args) => cmd_fit(args, cli.verbose),
        Command::Predict(args) => cmd_predict(args, cli.verbose),
        Command::Eval(args) => cmd_eval(args, cli.verbose),
        Command::Sweep(args) => cmd_sweep(args, cli.verbose),
    }
}

fn print_fit_options(fit: &FitOptions) {
    println!(
        "fit options: max_iters={} rel_tolerance={} variance_floor={} seed={}",
        fit.max_iters, fit.rel_tolerance, fit.variance_floor, fit.seed
    );
}

fn print_sgd_options(sgd: &SgdOptions) {
    let refresh = match sgd.y_refresh_period {
        Some(p) => p.to_string(),
        None => "auto".into(),
    };
    println!(
        "sgd options: learning_rate={} epochs={} y_refresh_period={refresh}",
        sgd.learning_rate, sgd.epochs
    );
}

fn cmd_synth(args: &SynthArgs, verbose: bool) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => io::read_json::<SyntheticConfig>(path)?,
        None => SyntheticConfig {
            num_tasks: args.tasks,
            num_workers: args.workers,
            workers_per_task: args.per_task,
            alpha: args.alpha,
            sigma_y: args.sigma_y,
            latent_rank: args.rank,
            seed: args.seed,
        },
    };
    if verbose {
        println!(
            "generator: tasks={} workers={} per_task={} alpha={} sigma_y={} rank={} seed={}",
            cfg.num_tasks,
            cfg.num_workers,
            cfg.workers_per_task,
            cfg.alpha,
            cfg.sigma_y,
            cfg.latent_rank,
            cfg.seed
        );
    }
    let drawn = generate_synthetic(&cfg)?;
    let data = if args.with_truth { drawn } else { drawn.without_ground_truth() };
    io::save_observations(&args.out, &data)?;
    println!(
        "tasks={} workers={} entries={} alpha={} sigma_y={} rank={}",
        data.num_tasks(),
        data.num_workers(),
        data.entries().len(),
        cfg.alpha,
        cfg.sigma_y,
        cfg.latent_rank
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs, verbose: bool) -> Result<(), CliError> {
    let variational = matches!(args.method, FitMethod::IndVb | FitMethod::LatentVb);
    if args.posterior.is_some() && !variational {
        return Err(CliError::Usage(format!(
            "--posterior applies only to variational methods, not {}",
            args.method.name()
        )));
    }
    let fit = args.fit.to_options();
    let sgd = args.sgd.to_options();
    if verbose {
        print_fit_options(&fit);
        if matches!(args.method, FitMethod::LatentMl) {
            print_sgd_options(&sgd);
        }
    }
    let data = io::load_observations(&args.input)?;

    // Each arm yields the estimate rows, the model JSON already written,
    // and the label plus value of the final objective.
    let (rows, objective): (Vec<(usize, f64, Option<f64>)>, (&str, f64)) = match args.method {
        FitMethod::IndMl => {
            let (result, model) = fit_ind_ml(&data, &fit)?;
            io::write_json(&args.out_model, &model)?;
            let rows = result.estimates.iter().enumerate().map(|(i, &e)| (i, e, None)).collect();
            (rows, ("objective", last_objective(&result.diagnostics.objective_trace)))
        }
        FitMethod::IcovFull => {
            let (result, model) = fit_icov_full(&data, &fit)?;
            io::write_json(&args.out_model, &model)?;
            let rows = result.estimates.iter().enumerate().map(|(i, &e)| (i, e, None)).collect();
            (rows, ("objective", last_objective(&result.diagnostics.objective_trace)))
        }
        FitMethod::LatentMl => {
            let (result, model) = fit_latent_ml(&data, args.rank, &sgd, &fit)?;
            io::write_json(&args.out_model, &model)?;
            let rows = result.estimates.iter().enumerate().map(|(i, &e)| (i, e, None)).collect();
            (rows, ("objective", last_objective(&result.diagnostics.objective_trace)))
        }
        FitMethod::IndVb => {
            let (post, model, elbo) = fit_ind_vb(&data, &fit)?;
            io::write_json(&args.out_model, &model)?;
            if let Some(path) = &args.posterior {
                io::write_json(path, &post)?;
            }
            let rows = post
                .mean
                .iter()
                .zip(post.var.iter())
                .enumerate()
                .map(|(i, (&m, &v))| (i, m, Some(v)))
                .collect();
            (rows, ("elbo", last_objective(&elbo)))
        }
        FitMethod::LatentVb => {
            let (post, model, elbo) = fit_latent_vb(&data, args.rank, &fit)?;
            io::write_json(&args.out_model, &model)?;
            if let Some(path) = &args.posterior {
                io::write_json(path, &post)?;
            }
            let rows = post
                .estimates()
                .into_iter()
                .zip(post.y_var.iter())
                .enumerate()
                .map(|(i, (m, &v))| (i, m, Some(v)))
                .collect();
            (rows, ("elbo", last_objective(&elbo)))
        }
    };
    io::save_estimates(&args.out_estimates, &rows)?;
    println!("method={} tasks={} final {}={}", args.method.name(), rows.len(), objective.0, objective.1);
    Ok(())
}

fn last_objective(trace: &[f64]) -> f64 {
    trace.last().copied().unwrap_or(f64::NAN)
}

/// Gathers the observed tasks of `data` as `(task, values, workers)`
/// triples; tasks without observations get no estimate row.
fn observed_tasks(data: &ObservationSet) -> Vec<(usize, Vec<f64>, Vec<usize>)> {
    (0..data.num_tasks())
        .filter_map(|i| {
            let block = data.task_entries(i);
            if block.is_empty() {
                return None;
            }
            let values = block.iter().map(|e| e.value).collect();
            let workers = block.iter().map(|e| e.worker).collect();
            Some((i, values, workers))
        })
        .collect()
}

/// Shrunk inverse-variance weighting, the independent-model counterpart
/// of the latent closed-form prediction.
fn predict_ind_posterior(
    values: &[f64],
    workers: &[usize],
    model: &IndependentNoiseModel,
    shift: f64,
) -> Result<(f64, f64), CliError> {
    let mut precision = 1.0 / model.prior_variance;
    let mut weighted = 0.0;
    for (v, &j) in values.iter().zip(workers.iter()) {
        let variance = *model
            .worker_variances
            .get(j)
            .ok_or_else(|| CliError::from(Error::IndexOutOfRange {
                index: j,
                bound: model.num_workers(),
            }))?;
        precision += 1.0 / variance;
        weighted += (v - shift) / variance;
    }
    Ok((weighted / precision + shift, 1.0 / precision))
}

fn cmd_predict(args: &PredictArgs, verbose: bool) -> Result<(), CliError> {
    let fit = args.fit.to_options();
    if verbose && matches!(args.mode, PredictMode::Refit) {
        print_fit_options(&fit);
    }
    let model = io::load_model(&args.model)?;
    let data = io::load_observations(&args.input)?;
    let tasks = observed_tasks(&data);

    let rows: Vec<(usize, f64, Option<f64>)> = match args.mode {
        PredictMode::ClosedForm => {
            let path = args.posterior.as_ref().ok_or_else(|| {
                CliError::Usage("closed-form mode requires --posterior".into())
            })?;
            let posterior = io::load_posterior(path)?;
            match (&model, &posterior) {
                (io::ModelFile::Latent(m), io::PosteriorFile::Latent(p)) => tasks
                    .iter()
                    .map(|(i, values, workers)| {
                        Ok((*i, predict_closed_form(values, workers, p, m)?, None))
                    })
                    .collect::<Result<_, CliError>>()?,
                (io::ModelFile::Independent(m), io::PosteriorFile::Independent(p)) => tasks
                    .iter()
                    .map(|(i, values, workers)| {
                        let (est, _) = predict_ind_posterior(values, workers, m, p.shift)?;
                        Ok((*i, est, None))
                    })
                    .collect::<Result<_, CliError>>()?,
                _ => {
                    return Err(CliError::Usage(
                        "model and posterior files belong to different model families".into(),
                    ))
                }
            }
        }
        PredictMode::Icov => match &model {
            io::ModelFile::Latent(m) => tasks
                .iter()
                .map(|(i, values, workers)| Ok((*i, predict_via_icov(values, workers, m)?, None)))
                .collect::<Result<_, CliError>>()?,
            io::ModelFile::Full(m) => tasks
                .iter()
                .map(|(i, values, workers)| {
                    Ok((*i, crowdagg::aggregate_icov(values, workers, m)?, None))
                })
                .collect::<Result<_, CliError>>()?,
            io::ModelFile::Independent(m) => tasks
                .iter()
                .map(|(i, values, workers)| Ok((*i, aggregate_ind(values, workers, m)?.0, None)))
                .collect::<Result<_, CliError>>()?,
        },
        PredictMode::Refit => {
            let train_path = args.train.as_ref().ok_or_else(|| {
                CliError::Usage("refit mode requires --train".into())
            })?;
            let train = io::load_observations(train_path)?;
            refit_predictions(&train, &data, &tasks, &model, &fit)?
        }
    };
    io::save_estimates(&args.out, &rows)?;
    println!("predicted tasks={}", rows.len());
    Ok(())
}

/// Runs the variational fit on training and new tasks jointly and reads
/// the new tasks' posteriors back out. The union keeps the training
/// truths as clamps and deliberately drops any truths in the prediction
/// input.
fn refit_predictions(
    train: &ObservationSet,
    data: &ObservationSet,
    tasks: &[(usize, Vec<f64>, Vec<usize>)],
    model: &io::ModelFile,
    fit: &FitOptions,
) -> Result<Vec<(usize, f64, Option<f64>)>, CliError> {
    let rank = match model {
        io::ModelFile::Latent(m) => m.rank,
        io::ModelFile::Independent(_) => 0,
        io::ModelFile::Full(_) => {
            return Err(CliError::Usage(
                "refit mode needs a variational model family, not a full covariance".into(),
            ))
        }
    };
    let offset = train.num_tasks();
    let num_workers = train.num_workers().max(data.num_workers());
    let mut entries: Vec<Observation> = train.entries().to_vec();
    // Only observed new tasks join the union; unobserved ones would sit
    // at the prior and trip the estimability check.
    let mut stacked_of_task = vec![usize::MAX; data.num_tasks()];
    let mut next = offset;
    for (i, _, _) in tasks {
        stacked_of_task[*i] = next;
        next += 1;
    }
    for e in data.entries() {
        entries.push(Observation { task: stacked_of_task[e.task], ..*e });
    }
    let truths = (0..train.num_tasks()).filter_map(|i| train.truth(i).map(|t| (i, t))).collect();
    let union = ObservationSet::with_truth(next, num_workers, entries, truths)?;

    match model {
        io::ModelFile::Independent(_) => {
            let (post, _, _) = fit_ind_vb(&union, fit)?;
            Ok(tasks
                .iter()
                .map(|(i, _, _)| {
                    let s = stacked_of_task[*i];
                    (*i, post.mean[s], Some(post.var[s]))
                })
                .collect())
        }
        io::ModelFile::Latent(_) => {
            let (post, _, _) = fit_latent_vb(&union, rank, fit)?;
            let estimates = post.estimates();
            Ok(tasks
                .iter()
                .map(|(i, _, _)| {
                    let s = stacked_of_task[*i];
                    (*i, estimates[s], Some(post.y_var[s]))
                })
                .collect())
        }
        io::ModelFile::Full(_) => unreachable!("rejected above"),
    }
}

fn cmd_eval(args: &EvalArgs, verbose: bool) -> Result<(), CliError> {
    let method: Method = args.method.parse().map_err(CliError::from)?;
    let params = MethodParams {
        rank: args.rank,
        fit: args.fit.to_options(),
        sgd: args.sgd.to_options(),
    };
    if verbose {
        print_fit_options(&params.fit);
        print_sgd_options(&params.sgd);
    }
    let train = io::load_observations(&args.train)?;
    let test = io::load_observations(&args.test)?;
    let report = evaluate_holdout(&train, &test, method, &params)?;
    if let Some(path) = &args.out {
        io::write_json(path, &report)?;
    }
    println!(
        "method={} rmse={} scored_tasks={} dropped_observations={}",
        method, report.rmse, report.scored_tasks, report.dropped_observations
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, verbose: bool) -> Result<(), CliError> {
    let spec: SweepSpec = io::read_json(&args.spec)?;
    if verbose {
        print_fit_options(&spec.fit);
        print_sgd_options(&spec.sgd);
        println!(
            "grid: methods={} alpha={:?} sigma_y={:?} rank={:?} seeds={}",
            spec.methods.len(),
            spec.alpha_grid,
            spec.sigma_y_grid,
            spec.rank_grid,
            spec.seeds
        );
    }
    let result = crowdagg::run_sweep(&spec)?;
    std::fs::write(&args.out, result.to_csv())
        .map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    println!("cells={}", result.cells.len());
    Ok(())
}
