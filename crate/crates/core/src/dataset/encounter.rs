use chrono::NaiveDate;
use std::collections::{BTreeMap, BTreeSet};

use super::spatial::Point;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationRecord {
    pub location_id: String,
    pub visit_date: NaiveDate,
    pub species_id: usize,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    pub location_id: String,
    pub position: Option<Point>,
    /// Distinct visit dates.
    pub n_visits: usize,
    /// Records with a count of at least one.
    pub n_observations: usize,
    /// Per-species fraction of visits with at least one individual.
    pub label: Vec<f64>,
}

/// Per-location encounter rates, ordered by location id.
///
/// A visit is a distinct date at a location; a species is present on a visit
/// if any record of it that day has a positive count.
pub fn encounter_rates(records: &[ObservationRecord], species_count: usize) -> Result<Vec<LocationRecord>> {
    #[derive(Default)]
    struct Acc {
        dates: BTreeSet<NaiveDate>,
        presence: BTreeSet<(usize, NaiveDate)>,
        observations: usize,
    }

    let mut by_location: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in records {
        if r.species_id >= species_count {
            return Err(Error::SpeciesOutOfRange {
                species: r.species_id,
                count: species_count,
            });
        }
        let acc = by_location.entry(&r.location_id).or_default();
        acc.dates.insert(r.visit_date);
        if r.count >= 1 {
            acc.presence.insert((r.species_id, r.visit_date));
            acc.observations += 1;
        }
    }

    Ok(by_location
        .into_iter()
        .map(|(id, acc)| {
            let visits = acc.dates.len();
            let mut label = vec![0.0; species_count];
            for (s, _) in &acc.presence {
                label[*s] += 1.0;
            }
            label.iter_mut().for_each(|v| *v /= visits as f64);
            LocationRecord {
                location_id: id.to_string(),
                position: None,
                n_visits: visits,
                n_observations: acc.observations,
                label,
            }
        })
        .collect())
}

/// Keeps locations with at least `min_observations` observations.
pub fn filter_locations(locations: Vec<LocationRecord>, min_observations: usize) -> Vec<LocationRecord> {
    locations
        .into_iter()
        .filter(|l| l.n_observations >= min_observations)
        .collect()
}
