use log::{info, warn};
use serde::Serialize;
use std::collections::BTreeMap;

use pecl_core::dataset::io::{self, Table};
use pecl_core::dataset::{encounter_rates, filter_locations, LocationRecord, Point};
use pecl_core::numeric::cosine_similarity;
use pecl_core::Error;

use super::{require_file, require_path, write_json, Context};
use crate::args::PrepArgs;
use crate::error::CliResult;

const HIST_BINS: usize = 20;

#[derive(Debug, Serialize)]
struct PrepStats {
    records: usize,
    skipped_rows: usize,
    species: usize,
    locations_observed: usize,
    locations_without_records: usize,
    min_observations: usize,
    locations_kept: usize,
    mean_visits_kept: Option<f64>,
    mean_encounter_rate: Option<f64>,
}

pub fn run(ctx: &Context, args: &PrepArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let obs_path = require_path(&args.observations, &cfg.paths.observations, "observations")?;
    require_file(&obs_path)?;
    let min_obs = args.min_obs.unwrap_or(cfg.prep.min_observations);
    let lenient = args.lenient || cfg.prep.lenient;
    let species_flag = args.species.or(cfg.prep.species);

    let table = io::read_observations(io::open(&obs_path)?, species_flag, lenient)?;
    let species = species_flag.unwrap_or_else(|| {
        table
            .records
            .iter()
            .map(|r| r.species_id)
            .max()
            .map_or(0, |m| m + 1)
    });
    let mut locations = encounter_rates(&table.records, species)?;
    info!(
        "{} records over {} locations",
        table.records.len(),
        locations.len()
    );

    let mut without_records = 0;
    let locations_path = args.locations.clone().or_else(|| cfg.paths.locations.clone());
    if let Some(path) = &locations_path {
        require_file(path)?;
        let positions: BTreeMap<String, Point> = io::read_locations(io::open(path)?)?.into_iter().collect();
        for loc in &mut locations {
            let p = positions
                .get(&loc.location_id)
                .ok_or_else(|| Error::MissingLocation(loc.location_id.clone(), path.display().to_string()))?;
            loc.position = Some(*p);
        }
        let observed: std::collections::BTreeSet<&str> =
            locations.iter().map(|l| l.location_id.as_str()).collect();
        for id in positions.keys().filter(|id| !observed.contains(id.as_str())) {
            warn!("{}", Error::NoVisits(id.clone()));
            without_records += 1;
        }
    }

    let observed = locations.len();
    let kept = filter_locations(locations, min_obs);
    if kept.is_empty() {
        warn!("no location has at least {min_obs} observations");
    }

    let labels = Table::new(
        kept.iter().map(|l| l.location_id.clone()).collect(),
        io::species_names(species),
        kept.iter().map(|l| l.label.clone()).collect(),
    )?;
    io::write_labels(io::create(&ctx.out("labels.csv"))?, &labels)?;
    if locations_path.is_some() {
        let pts: Vec<(String, Point)> = kept
            .iter()
            .filter_map(|l| l.position.map(|p| (l.location_id.clone(), p)))
            .collect();
        io::write_locations(io::create(&ctx.out("locations.csv"))?, &pts)?;
    }
    write_species_presence(ctx, &kept, species)?;
    write_similarity_histogram(ctx, &kept)?;

    let n = kept.len() as f64;
    let stats = PrepStats {
        records: table.records.len(),
        skipped_rows: table.errors.len(),
        species,
        locations_observed: observed,
        locations_without_records: without_records,
        min_observations: min_obs,
        locations_kept: kept.len(),
        mean_visits_kept: (!kept.is_empty()).then(|| kept.iter().map(|l| l.n_visits as f64).sum::<f64>() / n),
        mean_encounter_rate: (!kept.is_empty() && species > 0)
            .then(|| kept.iter().flat_map(|l| &l.label).sum::<f64>() / (n * species as f64)),
    };
    write_json(&ctx.out("prep_stats.json"), &stats)?;
    println!(
        "kept {} of {} locations (min_obs {min_obs}), {species} species, {} rows skipped",
        kept.len(),
        observed,
        table.errors.len()
    );
    Ok(())
}

/// Per species: locations where it was ever encountered and its mean rate.
fn write_species_presence(ctx: &Context, kept: &[LocationRecord], species: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(io::create(&ctx.out("species_presence.csv"))?);
    w.write_record([
        "species",
        "locations_present",
        "fraction_present",
        "mean_encounter_rate",
    ])
    .map_err(Error::from)?;
    let n = kept.len();
    for s in 0..species {
        let present = kept.iter().filter(|l| l.label[s] > 0.0).count();
        let mean = kept.iter().map(|l| l.label[s]).sum::<f64>() / n as f64;
        let frac = present as f64 / n as f64;
        let f = |v: f64| if n == 0 { String::new() } else { v.to_string() };
        w.write_record([s.to_string(), present.to_string(), f(frac), f(mean)])
            .map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Counts of pairwise label cosine similarity over `[0, 1]`.
fn write_similarity_histogram(ctx: &Context, kept: &[LocationRecord]) -> CliResult<()> {
    let mut counts = [0u64; HIST_BINS];
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            let s = cosine_similarity(&kept[i].label, &kept[j].label);
            let bin = ((s * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            counts[bin] += 1;
        }
    }
    let mut w = csv::Writer::from_writer(io::create(&ctx.out("label_similarity_hist.csv"))?);
    w.write_record(["bin_lower", "bin_upper", "pairs"])
        .map_err(Error::from)?;
    for (b, c) in counts.iter().enumerate() {
        let lo = b as f64 / HIST_BINS as f64;
        let hi = (b + 1) as f64 / HIST_BINS as f64;
        w.write_record([lo.to_string(), hi.to_string(), c.to_string()])
            .map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}
