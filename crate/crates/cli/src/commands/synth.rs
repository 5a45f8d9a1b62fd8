use pecl_core::dataset::io::{self, Table};
use pecl_core::dataset::synth_generate;

use super::Context;
use crate::args::SynthArgs;
use crate::error::CliResult;

pub fn run(ctx: &Context, args: &SynthArgs) -> CliResult<()> {
    let mut cfg = ctx.config.synth.clone();
    if let Some(v) = args.n_locations {
        cfg.n_locations = v;
    }
    if let Some(v) = args.species {
        cfg.species = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.habitats {
        cfg.n_habitats = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }

    let data = synth_generate(&cfg)?;
    let features = Table::new(
        data.ids.clone(),
        io::feature_names(cfg.feature_dim),
        (0..data.features.rows())
            .map(|i| data.features.row(i).to_vec())
            .collect(),
    )?;
    let labels = Table::new(data.ids.clone(), io::species_names(cfg.species), data.labels)?;
    io::write_features_csv(io::create(&ctx.out("features.csv"))?, &features)?;
    if args.binary {
        io::write_features_bin(io::create(&ctx.out("features.bin"))?, &features)?;
    }
    io::write_labels(io::create(&ctx.out("labels.csv"))?, &labels)?;
    let locations: Vec<_> = data.ids.into_iter().zip(data.coordinates).collect();
    io::write_locations(io::create(&ctx.out("locations.csv"))?, &locations)?;
    println!(
        "{} locations, {} species, {} features (seed {}) -> {}",
        cfg.n_locations,
        cfg.species,
        cfg.feature_dim,
        cfg.seed,
        ctx.out_dir.display()
    );
    Ok(())
}
