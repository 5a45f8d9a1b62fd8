use log::info;
use std::collections::HashMap;

use pecl_core::dataset::io;
use pecl_core::dataset::{check_split_safety, dbscan_clusters, split, Point, SplitKind};
use pecl_core::Error;

use super::{require_file, require_path, Context};
use crate::args::SplitArgs;
use crate::error::{CliError, CliResult};

pub fn run(ctx: &Context, args: &SplitArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let labels_path = require_path(&args.labels, &cfg.paths.labels, "labels")?;
    let locations_path = require_path(&args.locations, &cfg.paths.locations, "locations")?;
    require_file(&labels_path)?;
    require_file(&locations_path)?;
    let eps = args.eps.unwrap_or(cfg.split.eps);
    if !eps.is_finite() || eps <= 0.0 {
        return Err(CliError::Usage(format!(
            "eps must be a positive distance, got {eps}"
        )));
    }
    let fractions = match &args.fractions {
        Some(f) => [f[0], f[1], f[2]],
        None => cfg.split.fractions,
    };
    let seed = ctx.seed.unwrap_or(cfg.split.seed);

    let ids = io::read_labels(io::open(&labels_path)?)?.ids;
    let positions: HashMap<String, Point> = io::read_locations(io::open(&locations_path)?)?
        .into_iter()
        .collect();
    let points = ids
        .iter()
        .map(|id| {
            positions
                .get(id)
                .copied()
                .ok_or_else(|| Error::MissingLocation(id.clone(), locations_path.display().to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let clustering = dbscan_clusters(&points, eps, 2);
    info!(
        "{} clusters, {} unclustered locations",
        clustering.n_clusters,
        clustering.n_unclustered()
    );
    let assignment = split(&ids, &clustering, fractions, seed)?;
    let kinds: Vec<SplitKind> = ids
        .iter()
        .map(|id| assignment.get(id).expect("every id is assigned"))
        .collect();
    if let Err((i, j)) = check_split_safety(&points, &kinds, eps) {
        return Err(CliError::Verification(format!(
            "`{}` ({}) and `{}` ({}) are closer than {eps} m",
            ids[i], kinds[i], ids[j], kinds[j]
        )));
    }

    io::write_splits(io::create(&ctx.out("splits.json"))?, &assignment)?;
    let counts = assignment.counts();
    println!(
        "{} clusters, {} unclustered",
        clustering.n_clusters,
        clustering.n_unclustered()
    );
    for kind in SplitKind::ALL {
        println!("{kind}\t{}", counts[kind as usize]);
    }
    Ok(())
}
