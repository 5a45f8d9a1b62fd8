use log::info;
use std::fs::OpenOptions;
use std::io::BufWriter;

use pecl_core::dataset::io;
use pecl_core::search::{append_record, read_records, run_search, write_table, SearchRecord};

use super::{fmt_opt, load_experiment, resolve_seeds, run_settings, Context};
use crate::args::{SearchArgs, SearchMode};
use crate::config::SearchModeConfig;
use crate::error::CliResult;

const RECORDS: &str = "search_results.jsonl";

pub fn run(ctx: &Context, args: &SearchArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let mode = match args.mode {
        Some(SearchMode::Grid) => SearchModeConfig::Grid,
        Some(SearchMode::Random) => SearchModeConfig::Random,
        None => cfg.search.mode,
    };
    let mut section = cfg.search.clone();
    if let Some(n) = args.n_samples {
        section.random.n_samples = n;
    }
    let candidates = section.space(mode).candidates(ctx.seed.unwrap_or(section.seed))?;

    let data = load_experiment(ctx, &args.data)?;
    let base = run_settings(ctx, &data, resolve_seeds(ctx, &args.seeds), args.epochs)?;

    // Rewrite what survived from an interrupted run so appends start on a
    // clean line.
    let records_path = ctx.out(RECORDS);
    let done: Vec<SearchRecord> = if records_path.is_file() {
        let done = read_records(io::open(&records_path)?)?;
        let mut out = io::create(&records_path)?;
        for r in &done {
            append_record(&mut out, r)?;
        }
        info!("resuming with {} finished candidates", done.len());
        done
    } else {
        io::create(&records_path)?;
        Vec::new()
    };
    let mut sink = BufWriter::new(OpenOptions::new().append(true).open(&records_path)?);

    let total = candidates.len();
    let ranked = run_search(&data, &base, &candidates, done, ctx.workers, |r| {
        info!(
            "candidate {}/{total} {} val mse {:.6}",
            r.index + 1,
            r.hash,
            r.val_mse()
        );
        append_record(&mut sink, r)
    })?;
    write_table(io::create(&ctx.out("search_results.csv"))?, &ranked)?;

    println!("rank  lr         batch  k   alpha     tau     val_mse    val_top10");
    for (i, r) in ranked.iter().enumerate() {
        let c = &r.candidate;
        println!(
            "{:<4}  {:<9.3e}  {:<5}  {:<2}  {:<8.4}  {:<6.3}  {:.6}   {}",
            i + 1,
            c.learning_rate,
            c.batch_size,
            c.k,
            c.alpha,
            c.tau,
            r.val_mse(),
            fmt_opt(r.summary.val_aggregate.top10.as_ref().map(|a| a.mean))
        );
    }
    Ok(())
}
