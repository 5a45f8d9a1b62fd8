use log::info;
use rayon::prelude::*;
use serde::Serialize;

use pecl_core::dataset::io;
use pecl_core::experiment::{
    baseline, run_seed, test_report, write_metrics_csv, Baseline, ExperimentSummary, RunSettings, SeedRun,
};
use pecl_core::model::{Checkpoint, TrainReport};
use pecl_core::Error;

use super::{fmt_opt, load_experiment, resolve_seeds, run_settings, write_json, Context};
use crate::args::TrainArgs;
use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct TrainOutput<'a> {
    settings: Option<&'a RunSettings>,
    baseline: &'a Baseline,
    runs: Vec<&'a TrainReport>,
    summary: Option<&'a ExperimentSummary>,
}

pub fn run(ctx: &Context, args: &TrainArgs) -> CliResult<()> {
    let data = load_experiment(ctx, &args.data)?;
    let base = baseline(&data)?;
    info!(
        "train {} / val {} / test {} locations, {} species",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.species()
    );

    if args.baseline_only {
        write_metrics_csv(io::create(&ctx.out("metrics.csv"))?, &base, None)?;
        write_json(
            &ctx.out("train_report.json"),
            &TrainOutput {
                settings: None,
                baseline: &base,
                runs: Vec::new(),
                summary: None,
            },
        )?;
        println!(
            "mean_rate val mse {:.6}  test mse {:.6}",
            base.val.mse, base.test.mse
        );
        return Ok(());
    }

    let mut settings = run_settings(ctx, &data, resolve_seeds(ctx, &args.seeds), args.epochs)?;
    if let Some(a) = args.alpha {
        settings.loss.alpha = a;
        settings.validate()?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers.min(settings.seeds.len()).max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let runs: Vec<SeedRun> = pool.install(|| {
        settings
            .seeds
            .par_iter()
            .map(|&s| run_seed(&data, &settings, s))
            .collect::<Result<_, Error>>()
    })?;
    let summary = ExperimentSummary::from_runs(&runs);

    std::fs::create_dir_all(ctx.out("checkpoints"))?;
    for run in &runs {
        let seed = run.report.seed;
        Checkpoint::new(run.model.clone(), None, None)
            .save(&ctx.out(&format!("checkpoints/seed_{seed}.json")))?;
        let report = test_report(&data, &run.model, &base.model)?;
        report.write_fmse_csv(
            &data.test.ids,
            io::create(&ctx.out(&format!("fmse_seed_{seed}.csv")))?,
        )?;
    }
    write_metrics_csv(io::create(&ctx.out("metrics.csv"))?, &base, Some(&summary))?;
    write_json(
        &ctx.out("train_report.json"),
        &TrainOutput {
            settings: Some(&settings),
            baseline: &base,
            runs: runs.iter().map(|r| &r.report).collect(),
            summary: Some(&summary),
        },
    )?;

    println!("model      split  seed  mse        top5    top10");
    for (split, s) in [("val", &base.val), ("test", &base.test)] {
        println!(
            "mean_rate  {split:<5}  -     {:.6}  {}  {}",
            s.mse,
            fmt_opt(s.top5),
            fmt_opt(s.top10)
        );
    }
    for run in &runs {
        println!(
            "model      test   {:<4}  {:.6}  {}  {}   (best epoch {})",
            run.report.seed,
            run.test.mse,
            fmt_opt(run.test.top5),
            fmt_opt(run.test.top10),
            run.report.best_epoch
        );
    }
    let agg = &summary.test_aggregate;
    println!(
        "model      test   mean  {:.6} +/- {:.6}",
        agg.mse.mean, agg.mse.sem
    );
    Ok(())
}
