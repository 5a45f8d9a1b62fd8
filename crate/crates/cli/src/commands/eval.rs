use serde::Serialize;

use pecl_core::dataset::io;
use pecl_core::metrics::MetricReport;
use pecl_core::model::{Checkpoint, MeanRateModel};

use super::{fmt_opt, load_experiment, require_file, write_json, Context};
use crate::args::{EvalArgs, EvalSplit};
use crate::error::CliResult;

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    locations: usize,
    report: &'a MetricReport,
}

pub fn run(ctx: &Context, args: &EvalArgs) -> CliResult<()> {
    require_file(&args.checkpoint)?;
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let data = load_experiment(ctx, &args.data)?;
    let (name, split) = match args.split {
        EvalSplit::Val => ("val", &data.val),
        EvalSplit::Test => ("test", &data.test),
    };
    let baseline = MeanRateModel::fit(&data.train.labels)?;
    let preds = model.predict(&split.features)?.preds;
    let report = MetricReport::compute(&split.labels, &preds, &baseline.predict(split.len()))?;

    write_json(
        &ctx.out("eval_report.json"),
        &EvalOutput {
            split: name,
            locations: split.len(),
            report: &report,
        },
    )?;
    report.write_fmse_csv(&split.ids, io::create(&ctx.out("fmse.csv"))?)?;

    let (m, b) = (&report.summary, &report.baseline);
    println!("{name}: {} locations", split.len());
    println!(
        "model      mse {:.6}  top5 {}  top10 {}",
        m.mse,
        fmt_opt(m.top5),
        fmt_opt(m.top10)
    );
    println!(
        "mean_rate  mse {:.6}  top5 {}  top10 {}",
        b.mse,
        fmt_opt(b.top5),
        fmt_opt(b.top10)
    );
    println!(
        "pearson(f_mse, richness) {}",
        fmt_opt(report.pearson_r_species_count)
    );
    Ok(())
}
