use std::time::Instant;

use pecl_core::gradcheck::run_suite;
use pecl_core::gradcheck::{GradcheckReport, Suite};

use super::{write_json, Context};
use crate::args::GradcheckArgs;
use crate::error::{CliError, CliResult};

pub fn run(ctx: &Context, args: &GradcheckArgs) -> CliResult<()> {
    let mut cfg = ctx.config.gradcheck.clone();
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.max_batch {
        cfg.batch.1 = b;
    }
    if let Some(d) = args.max_dim {
        cfg.dim.1 = d;
    }
    if let Some(s) = args.max_species {
        cfg.species.1 = s;
    }
    if cfg.trials == 0 {
        log::warn!("gradcheck with zero trials checks nothing");
    }

    let mut suites = Vec::with_capacity(Suite::ALL.len());
    for suite in Suite::ALL {
        let start = Instant::now();
        let r = run_suite(suite, &cfg)?;
        println!(
            "{}  {:<13} trials {:>4}  failed {:>3}  coords {:>7}  worst {:.3e}  ({:.1}s)",
            if r.passed() { "PASS" } else { "FAIL" },
            suite.name(),
            r.trials,
            r.failed_trials,
            r.coordinates,
            r.worst_ratio,
            start.elapsed().as_secs_f64()
        );
        if let Some(f) = &r.first_failure {
            println!("      first failure: {f}");
        }
        suites.push(r);
    }
    let report = GradcheckReport { config: cfg, suites };
    write_json(&ctx.out("gradcheck_report.json"), &report)?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .suites
            .iter()
            .filter(|s| !s.passed())
            .map(|s| s.suite.name())
            .collect();
        Err(CliError::Verification(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}
