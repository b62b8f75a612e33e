//! Radius-bounded agglomerative clustering of stations on great-circle distance.
//!
//! The dendrogram is built once (complete linkage by default) and then cut
//! top-down: a node is accepted as a cluster when its diameter is at most
//! `2 * radius_m` and every member lies within `radius_m` of the node's medoid.
//! Because the dendrogram does not depend on the radius, a larger radius can
//! only accept the same node or one of its ancestors, so the cluster count is
//! non-increasing in the radius.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{ClusterAssignment, Station};

/// Mean earth radius, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Cluster radius used when a configuration does not give one.
pub const DEFAULT_RADIUS_M: f64 = 18_026.0;

/// Great-circle distance in meters (haversine formula).
pub fn haversine(a: &Station, b: &Station) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Symmetric n×n matrix of great-circle distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(stations: &[Station]) -> Self {
        let n = stations.len();
        let data = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| if i == j { 0.0 } else { haversine(&stations[i], &stations[j]) })
            .collect();
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Member minimizing the maximum distance to the others (lowest index on ties),
    /// with that maximum.
    pub fn medoid(&self, members: &[usize]) -> (usize, f64) {
        let mut best = (members[0], f64::INFINITY);
        for &m in members {
            let reach = members.iter().map(|&o| self.get(m, o)).fold(0.0, f64::max);
            if reach < best.1 {
                best = (m, reach);
            }
        }
        best
    }

    pub fn diameter(&self, members: &[usize]) -> f64 {
        let mut d: f64 = 0.0;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                d = d.max(self.get(i, j));
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Complete,
    Single,
}

#[derive(Debug, Clone)]
struct Node {
    members: Vec<usize>,
    children: Option<(usize, usize)>,
}

/// Full agglomerative dendrogram. Leaves are nodes `0..n`; every merge appends
/// one node. Ties in merge distance go to the lowest (i, j) pair of active
/// clusters, where active clusters are ordered by their smallest member.
fn dendrogram(dist: &DistanceMatrix, linkage: Linkage) -> Vec<Node> {
    let n = dist.len();
    let mut nodes: Vec<Node> = (0..n)
        .map(|i| Node {
            members: vec![i],
            children: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    // Linkage distance between active clusters, indexed by node id.
    let link = |a: &[usize], b: &[usize]| -> f64 {
        let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j)));
        match linkage {
            Linkage::Complete => pairs.map(|(i, j)| dist.get(i, j)).fold(0.0, f64::max),
            Linkage::Single => pairs.map(|(i, j)| dist.get(i, j)).fold(f64::INFINITY, f64::min),
        }
    };
    while active.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let d = link(&nodes[active[a]].members, &nodes[active[b]].members);
                if best.map_or(true, |(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, _) = best.expect("at least two active clusters");
        let (na, nb) = (active[a], active[b]);
        let mut members = nodes[na].members.clone();
        members.extend_from_slice(&nodes[nb].members);
        members.sort_unstable();
        nodes.push(Node {
            members,
            children: Some((na, nb)),
        });
        let id = nodes.len() - 1;
        active.remove(b);
        active[a] = id;
    }
    nodes
}

/// Clusters stations with complete linkage.
pub fn hsc(stations: &[Station], radius_m: f64) -> ClusterAssignment {
    hsc_with(stations, radius_m, Linkage::Complete)
}

/// Clusters stations with the given linkage; see the module docs for the cut rule.
pub fn hsc_with(stations: &[Station], radius_m: f64, linkage: Linkage) -> ClusterAssignment {
    assert!(!stations.is_empty(), "clustering needs at least one station");
    assert!(radius_m > 0.0, "cluster radius must be positive");
    let dist = DistanceMatrix::new(stations);
    let nodes = dendrogram(&dist, linkage);

    let accept = |members: &[usize]| {
        dist.diameter(members) <= 2.0 * radius_m && dist.medoid(members).1 <= radius_m
    };
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut stack = vec![nodes.len() - 1];
    while let Some(id) = stack.pop() {
        let node = &nodes[id];
        match node.children {
            Some((l, r)) if !accept(&node.members) => {
                stack.push(l);
                stack.push(r);
            }
            _ => clusters.push(node.members.clone()),
        }
    }
    clusters.sort_by_key(|m| m[0]);

    let mut labels = vec![0; stations.len()];
    let mut representatives = Vec::with_capacity(clusters.len());
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = c;
        }
        representatives.push(dist.medoid(members).0);
    }
    ClusterAssignment {
        labels,
        radius_m,
        representatives,
    }
}

/// Writes `station_id,cluster_index,representative_id`.
pub fn write_assignment_csv<W: Write>(
    stations: &[Station],
    assignment: &ClusterAssignment,
    writer: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station_id", "cluster_index", "representative_id"])?;
    for (s, &label) in stations.iter().zip(&assignment.labels) {
        let rep = &stations[assignment.representatives[label]].id;
        w.write_record([s.id.as_str(), &label.to_string(), rep.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an assignment written by [`write_assignment_csv`].
pub fn read_assignment_csv<R: std::io::Read>(
    stations: &[Station],
    radius_m: f64,
    reader: R,
) -> Result<ClusterAssignment, String> {
    let mut rdr = csv::Reader::from_reader(reader);
    let n = stations.len();
    let mut labels = vec![usize::MAX; n];
    let mut reps: Vec<Option<usize>> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| e.to_string())?;
        let id = row.get(0).unwrap_or("");
        let i = stations
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| format!("unknown station {id:?}"))?;
        let label: usize = row
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad cluster index for {id:?}"))?;
        let rep_id = row.get(2).unwrap_or("");
        let rep = stations
            .iter()
            .position(|s| s.id == rep_id)
            .ok_or_else(|| format!("unknown representative {rep_id:?}"))?;
        labels[i] = label;
        if reps.len() <= label {
            reps.resize(label + 1, None);
        }
        reps[label] = Some(rep);
    }
    if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(format!("station {:?} has no cluster", stations[i].id));
    }
    let representatives = reps
        .into_iter()
        .enumerate()
        .map(|(c, r)| r.ok_or_else(|| format!("cluster {c} has no members")))
        .collect::<Result<_, _>>()?;
    Ok(ClusterAssignment {
        labels,
        radius_m,
        representatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spherical_cosines(a: &Station, b: &Station) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn identity_distance_is_zero() {
        let s = Station::new("A", 28.6139, 77.2090);
        assert_eq!(haversine(&s, &s), 0.0);
    }

    #[test]
    fn antipodal_on_equator() {
        let a = Station::new("A", 0.0, 0.0);
        let b = Station::new("B", 0.0, 180.0);
        let oracle = spherical_cosines(&a, &b);
        assert!((oracle - 20_015_086.796).abs() < 1e-3);
        assert!((haversine(&a, &b) - oracle).abs() < 1e-6);
    }

    #[test]
    fn delhi_pair_about_33_9_km() {
        let a = Station::new("A", 28.7041, 77.1025);
        let b = Station::new("B", 28.5355, 77.3910);
        let oracle = spherical_cosines(&a, &b);
        let d = haversine(&a, &b);
        assert!((d - oracle).abs() / oracle < 1e-3);
        assert!((d - 33_900.0).abs() / 33_900.0 < 1e-2, "{d}");
    }

    // Stations along the equator at the given offsets (meters).
    fn line(offsets_m: &[f64]) -> Vec<Station> {
        offsets_m
            .iter()
            .enumerate()
            .map(|(i, &x)| Station::new(format!("S{i}"), 0.0, (x / EARTH_RADIUS_M).to_degrees()))
            .collect()
    }

    #[test]
    fn infinite_radius_single_cluster() {
        let st = line(&[0.0, 10_000.0, 100_000.0]);
        let a = hsc(&st, f64::INFINITY);
        assert_eq!(a.n_clusters(), 1);
        assert_eq!(a.representatives, vec![1]);
    }

    #[test]
    fn tiny_radius_singletons() {
        let st = line(&[0.0, 10_000.0, 100_000.0]);
        let a = hsc(&st, 1e-6);
        assert_eq!(a.labels, vec![0, 1, 2]);
    }

    /// Brute force: partitions of 3 items whose blocks satisfy the radius rule;
    /// the linkage-consistent answer is the feasible partition with fewest blocks
    /// among those refining the complete-linkage dendrogram.
    #[test]
    fn collinear_three_station_example() {
        let st = line(&[0.0, 10_000.0, 100_000.0]);
        let dist = DistanceMatrix::new(&st);
        let partitions: Vec<Vec<Vec<usize>>> = vec![
            vec![vec![0, 1, 2]],
            vec![vec![0, 1], vec![2]],
            vec![vec![0, 2], vec![1]],
            vec![vec![0], vec![1, 2]],
            vec![vec![0], vec![1], vec![2]],
        ];
        let r = 18_026.0;
        let feasible: Vec<_> = partitions
            .into_iter()
            .filter(|p| {
                p.iter()
                    .all(|b| dist.diameter(b) <= 2.0 * r && dist.medoid(b).1 <= r)
            })
            .collect();
        let fewest = feasible.iter().map(Vec::len).min().unwrap();
        let best: Vec<_> = feasible.into_iter().filter(|p| p.len() == fewest).collect();
        assert_eq!(best, vec![vec![vec![0, 1], vec![2]]]);

        let a = hsc(&st, r);
        assert_eq!(a.labels, vec![0, 0, 1]);
    }

    #[test]
    fn single_linkage_switch() {
        // Chain 0-15-30 km: single linkage merges the chain order identically,
        // the cut still enforces the medoid rule.
        let st = line(&[0.0, 15_000.0, 30_000.0]);
        let a = hsc_with(&st, 16_000.0, Linkage::Single);
        assert_eq!(a.n_clusters(), 1);
        let b = hsc_with(&st, 14_000.0, Linkage::Single);
        assert_eq!(b.n_clusters(), 3);
    }

    #[test]
    fn assignment_csv_round_trip() {
        let st = line(&[0.0, 10_000.0, 100_000.0]);
        let a = hsc(&st, 18_026.0);
        let mut buf = Vec::new();
        write_assignment_csv(&st, &a, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "station_id,cluster_index,representative_id\nS0,0,S0\nS1,0,S0\nS2,1,S2\n"
        );
        assert_eq!(read_assignment_csv(&st, 18_026.0, buf.as_slice()).unwrap(), a);
    }

    fn stations_strategy() -> impl Strategy<Value = Vec<Station>> {
        prop::collection::vec((28.4f64..28.9, 76.9f64..77.4), 1..12).prop_map(|pts| {
            pts.into_iter()
                .enumerate()
                .map(|(i, (lat, lon))| Station::new(format!("S{i}"), lat, lon))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn distance_matrix_is_a_metric(st in stations_strategy()) {
            let d = DistanceMatrix::new(&st);
            for i in 0..st.len() {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..st.len() {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    for k in 0..st.len() {
                        prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-6);
                    }
                }
            }
        }

        #[test]
        fn members_within_radius_of_medoid(st in stations_strategy(), r in 1_000.0f64..60_000.0) {
            let a = hsc(&st, r);
            let mut seen = vec![false; st.len()];
            for c in 0..a.n_clusters() {
                let rep = &st[a.representatives[c]];
                for m in a.members(c) {
                    prop_assert!(!seen[m]);
                    seen[m] = true;
                    prop_assert!(haversine(rep, &st[m]) <= r);
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn cluster_count_monotone_in_radius(st in stations_strategy(), r in 1_000.0f64..40_000.0, f in 1.0f64..3.0) {
            prop_assert!(hsc(&st, r * f).n_clusters() <= hsc(&st, r).n_clusters());
        }
    }
}
