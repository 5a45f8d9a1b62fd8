//! DBSCAN over planar site coordinates and cluster-aware train/val/test
//! assignment.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

pub const DEFAULT_EPS_METRES: f64 = 4000.0;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];
/// Mean Earth radius.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Planar position in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection of `(lon, lat)` degrees about the mean
/// position of the inputs.
pub fn project_equirectangular(lon_lat: &[(f64, f64)]) -> Vec<Point> {
    if lon_lat.is_empty() {
        return Vec::new();
    }
    let n = lon_lat.len() as f64;
    let lon0 = lon_lat.iter().map(|p| p.0).sum::<f64>() / n;
    let lat0 = lon_lat.iter().map(|p| p.1).sum::<f64>() / n;
    let k = lat0.to_radians().cos();
    lon_lat
        .iter()
        .map(|&(lon, lat)| {
            Point::new(
                EARTH_RADIUS_M * (lon - lon0).to_radians() * k,
                EARTH_RADIUS_M * (lat - lat0).to_radians(),
            )
        })
        .collect()
}

/// Uniform grid with cells of side `radius` for fixed-radius queries.
pub struct GridIndex<'a> {
    points: &'a [Point],
    radius: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Point], radius: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, radius)).or_default().push(i);
        }
        Self {
            points,
            radius,
            cells,
        }
    }

    fn cell(p: &Point, radius: f64) -> (i64, i64) {
        ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64)
    }

    /// Indices strictly closer than the radius to point `i` (including `i`),
    /// in ascending order.
    pub fn within(&self, i: usize) -> Vec<usize> {
        let p = &self.points[i];
        let (cx, cy) = Self::cell(p, self.radius);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(members) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend(
                        members
                            .iter()
                            .copied()
                            .filter(|&j| p.distance(&self.points[j]) < self.radius),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster id per point, `None` for unclustered (noise) points.
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl Clustering {
    pub fn n_unclustered(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Members per cluster, then every unclustered point on its own.
    pub fn units(&self) -> Vec<Vec<usize>> {
        let mut units = vec![Vec::new(); self.n_clusters];
        let mut singles = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            match l {
                Some(c) => units[*c].push(i),
                None => singles.push(vec![i]),
            }
        }
        units.extend(singles);
        units
    }
}

/// DBSCAN with a strict `< eps` neighbourhood that counts the point itself.
///
/// With `min_pts = 2` every pair closer than `eps` ends up in one cluster and
/// the partition does not depend on input order.
pub fn dbscan_clusters(points: &[Point], eps: f64, min_pts: usize) -> Clustering {
    let index = GridIndex::new(points, eps);
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut n_clusters = 0;

    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = index.within(i);
        if seeds.len() < min_pts {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        labels[i] = Some(cluster);
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(cluster);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let reach = index.within(j);
            if reach.len() >= min_pts {
                queue.extend(reach.into_iter().filter(|&k| !visited[k] || labels[k].is_none()));
            }
        }
    }
    Clustering { labels, n_clusters }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: SplitKind,
    pub cluster_id: Option<usize>,
}

/// Split membership keyed by location id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    pub entries: BTreeMap<String, SplitEntry>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<SplitKind> {
        self.entries.get(id).map(|e| e.split)
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in self.entries.values() {
            c[e.split as usize] += 1;
        }
        c
    }

    /// Ids in one split, sorted.
    pub fn ids(&self, kind: SplitKind) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.split == kind)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

/// Randomly assigns whole clusters and single locations to splits.
///
/// Units are visited in shuffled order and each goes to the split that is
/// furthest below its location-count target (earlier split on ties), so every
/// split ends within one unit size of its target.
pub fn split(
    ids: &[String],
    clustering: &Clustering,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    validate_fractions(fractions)?;
    let n = ids.len();
    if clustering.labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: clustering.labels.len(),
        });
    }
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();
    if n < wanted {
        return Err(Error::InsufficientLocations {
            splits: wanted,
            locations: n,
        });
    }

    let train = (fractions[0] * n as f64).round() as usize;
    let val = ((fractions[1] * n as f64).round() as usize).min(n - train.min(n));
    let targets = [train.min(n), val, n - train.min(n) - val];

    let mut units = clustering.units();
    units.shuffle(&mut SeededRng::new(seed));
    let mut counts = [0usize; 3];
    let mut entries = BTreeMap::new();
    for unit in &units {
        let mut pick = 0;
        let mut best = i64::MIN;
        for s in 0..3 {
            let deficit = targets[s] as i64 - counts[s] as i64;
            if fractions[s] > 0.0 && deficit > best {
                best = deficit;
                pick = s;
            }
        }
        counts[pick] += unit.len();
        for &i in unit {
            entries.insert(
                ids[i].clone(),
                SplitEntry {
                    split: SplitKind::ALL[pick],
                    cluster_id: clustering.labels[i],
                },
            );
        }
    }
    for s in 0..3 {
        if fractions[s] > 0.0 && counts[s] == 0 {
            warn!(
                "split `{}` is empty: {} locations form {} units",
                SplitKind::ALL[s],
                n,
                units.len()
            );
        }
    }
    Ok(SplitAssignment { entries })
}

/// First pair of locations in different splits closer than `eps`, if any.
pub fn check_split_safety(
    points: &[Point],
    splits: &[SplitKind],
    eps: f64,
) -> std::result::Result<(), (usize, usize)> {
    let index = GridIndex::new(points, eps);
    for i in 0..points.len() {
        for j in index.within(i) {
            if j > i && splits[i] != splits[j] {
                return Err((i, j));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    #[test]
    fn dbscan_chains_within_eps() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(3000.0, 0.0),
            Point::new(6000.0, 0.0),
        ];
        let c = dbscan_clusters(&pts, 4000.0, 2);
        assert_eq!(c.n_clusters, 1);
        assert!(c.labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn dbscan_leaves_far_points_alone() {
        let pts = [Point::new(0.0, 0.0), Point::new(5000.0, 0.0)];
        let c = dbscan_clusters(&pts, 4000.0, 2);
        assert_eq!(c.n_clusters, 0);
        assert_eq!(c.n_unclustered(), 2);
        // exactly eps apart is not "less than"
        let c = dbscan_clusters(&[Point::new(0.0, 0.0), Point::new(4000.0, 0.0)], 4000.0, 2);
        assert_eq!(c.n_clusters, 0);
    }

    #[test]
    fn projection_preserves_local_distances() {
        // 0.036 degrees of latitude is ~4 km
        let pts = project_equirectangular(&[(-1.0, 52.0), (-1.0, 52.036)]);
        let d = pts[0].distance(&pts[1]);
        assert!((d - 4003.0).abs() < 5.0, "{d}");
    }

    #[test]
    fn singletons_split_near_fractions() {
        let pts: Vec<Point> = (0..100).map(|i| Point::new(i as f64 * 10_000.0, 0.0)).collect();
        let c = dbscan_clusters(&pts, 4000.0, 2);
        let a = split(&ids(100), &c, DEFAULT_FRACTIONS, 7).unwrap();
        assert_eq!(a.counts(), [70, 15, 15]);
        assert_eq!(a, split(&ids(100), &c, DEFAULT_FRACTIONS, 7).unwrap());
    }

    #[test]
    fn giant_cluster_lands_in_one_split() {
        let pts: Vec<Point> = (0..20).map(|i| Point::new(i as f64 * 100.0, 0.0)).collect();
        let c = dbscan_clusters(&pts, 4000.0, 2);
        let a = split(&ids(20), &c, DEFAULT_FRACTIONS, 1).unwrap();
        let counts = a.counts();
        assert_eq!(counts.iter().filter(|&&c| c == 20).count(), 1);
        assert_eq!(a.entries.values().next().unwrap().cluster_id, Some(0));
    }

    #[test]
    fn split_errors() {
        let c = dbscan_clusters(&[Point::new(0.0, 0.0), Point::new(1e6, 0.0)], 4000.0, 2);
        assert!(matches!(
            split(&ids(2), &c, DEFAULT_FRACTIONS, 0),
            Err(Error::InsufficientLocations { .. })
        ));
        assert!(split(&ids(2), &c, [0.5, 0.6, 0.1], 0).is_err());
        assert!(split(&ids(2), &c, [0.5, 0.5, 0.0], 0).is_ok());
    }

    #[test]
    fn safety_check_finds_violations() {
        let pts = [Point::new(0.0, 0.0), Point::new(100.0, 0.0)];
        assert_eq!(
            check_split_safety(&pts, &[SplitKind::Train, SplitKind::Test], 4000.0),
            Err((0, 1))
        );
        assert!(check_split_safety(&pts, &[SplitKind::Val, SplitKind::Val], 4000.0).is_ok());
    }

    #[test]
    fn splits_json_shape() {
        let mut a = SplitAssignment::default();
        a.entries.insert(
            "x".into(),
            SplitEntry {
                split: SplitKind::Val,
                cluster_id: None,
            },
        );
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            r#"{"x":{"split":"val","cluster_id":null}}"#
        );
    }

    fn brute_components(points: &[Point], eps: f64) -> Vec<usize> {
        // union-find over all pairs closer than eps
        let mut parent: Vec<usize> = (0..points.len()).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                i = p[i];
            }
            i
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                if points[i].distance(&points[j]) < eps {
                    let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        (0..points.len()).map(|i| root(&mut parent, i)).collect()
    }

    fn same_partition(a: &[usize], b: &[Option<usize>]) -> bool {
        (0..a.len()).all(|i| {
            (0..a.len()).all(|j| {
                let together_a = a[i] == a[j];
                let together_b = i == j || (b[i].is_some() && b[i] == b[j]);
                together_a == together_b
            })
        })
    }

    proptest! {
        #[test]
        fn dbscan_matches_components_and_ignores_order(seed in any::<u64>(), n in 2usize..120) {
            use rand::seq::SliceRandom;
            let mut rng = SeededRng::new(seed);
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.random_range(0.0..60_000.0), rng.random_range(0.0..60_000.0)))
                .collect();
            let c = dbscan_clusters(&pts, 4000.0, 2);
            prop_assert!(same_partition(&brute_components(&pts, 4000.0), &c.labels));

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
            let cs = dbscan_clusters(&shuffled, 4000.0, 2);
            for a in 0..n {
                for b in 0..n {
                    let orig = c.labels[perm[a]].is_some() && c.labels[perm[a]] == c.labels[perm[b]];
                    let new = cs.labels[a].is_some() && cs.labels[a] == cs.labels[b];
                    prop_assert_eq!(orig, new);
                }
            }
        }
    }
}
