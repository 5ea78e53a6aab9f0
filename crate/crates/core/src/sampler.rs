//! Stratified tile sampling over aggregate climate statistics.
//!
//! Tiles arrive with two per-cell statistics (mean temperature proxy and
//! precipitation p99 proxy). Each variable is quantile-binned independently;
//! the cross product of the marginal bins forms the groups, and the sample
//! budget is drawn uniformly without replacement from each group.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::TileId;
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("grid parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One populated grid cell: the tile it references plus its two statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimateCell {
    pub tile: TileId,
    pub mean_value: f64,
    pub p99_value: f64,
}

/// Aggregate geospatial statistics, one cell per candidate tile.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClimateGrid {
    pub cells: Vec<ClimateCell>,
}

impl ClimateGrid {
    pub fn new(cells: Vec<ClimateCell>) -> Result<Self, SamplerError> {
        for (i, cell) in cells.iter().enumerate() {
            if !cell.mean_value.is_finite() || !cell.p99_value.is_finite() {
                return Err(SamplerError::Argument(format!(
                    "cell {i} ({}) has non-finite statistics",
                    cell.tile.tile_code
                )));
            }
        }
        Ok(Self { cells })
    }

    /// Reads the CSV interface: `tile_code,utm_zone,lat_band,mean_value,p99_value`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, SamplerError> {
        let mut rdr = csv::Reader::from_path(path.as_ref())
            .map_err(|e| SamplerError::Parse { line: 1, msg: e.to_string() })?;
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2; // 1-based, after header
            let rec = rec.map_err(|e| SamplerError::Parse { line, msg: e.to_string() })?;
            let field = |idx: usize| -> Result<&str, SamplerError> {
                rec.get(idx).ok_or(SamplerError::Parse {
                    line,
                    msg: format!("missing column {idx}"),
                })
            };
            let tile_code = field(0)?.to_string();
            let utm_zone: u8 = field(1)?
                .parse()
                .map_err(|e| SamplerError::Parse { line, msg: format!("utm_zone: {e}") })?;
            let lat_band = field(2)?
                .chars()
                .next()
                .ok_or(SamplerError::Parse { line, msg: "empty lat_band".into() })?;
            let mean_value: f64 = field(3)?
                .parse()
                .map_err(|e| SamplerError::Parse { line, msg: format!("mean_value: {e}") })?;
            let p99_value: f64 = field(4)?
                .parse()
                .map_err(|e| SamplerError::Parse { line, msg: format!("p99_value: {e}") })?;
            let tile = TileId::new(utm_zone, lat_band, tile_code)
                .map_err(|e| SamplerError::Parse { line, msg: e.to_string() })?;
            cells.push(ClimateCell { tile, mean_value, p99_value });
        }
        ClimateGrid::new(cells)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), SamplerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "tile_code,utm_zone,lat_band,mean_value,p99_value")?;
        for c in &self.cells {
            writeln!(
                f,
                "{},{},{},{},{}",
                c.tile.tile_code, c.tile.utm_zone, c.tile.lat_band, c.mean_value, c.p99_value
            )?;
        }
        Ok(())
    }
}

/// Marginal quantile-bin assignment of every cell to a group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    /// Group id per cell, aligned with the grid's cell order.
    pub group_ids: Vec<usize>,
    /// Upper bound on the number of groups (`g1 * g2`).
    pub group_count: usize,
    /// Interior bin edges on the mean-value variable (`g1 - 1` entries).
    pub mean_edges: Vec<f64>,
    /// Interior bin edges on the p99-value variable (`g2 - 1` entries).
    pub p99_edges: Vec<f64>,
}

impl GroupAssignment {
    /// Distinct non-empty group ids, ascending.
    pub fn nonempty_groups(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.group_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Equal-frequency binning, `g1` bins on mean values and `g2` on p99 values;
/// `group_id = bin1 * g2 + bin2`. Ties at a bin edge resolve to the lower bin.
pub fn assign_groups(
    grid: &ClimateGrid,
    g1: usize,
    g2: usize,
) -> Result<GroupAssignment, SamplerError> {
    if g1 < 1 || g2 < 1 {
        return Err(SamplerError::Argument(format!("bin counts must be >= 1, got {g1}x{g2}")));
    }
    if grid.cells.is_empty() {
        return Err(SamplerError::Argument("empty climate grid".into()));
    }
    let means: Vec<f64> = grid.cells.iter().map(|c| c.mean_value).collect();
    let p99s: Vec<f64> = grid.cells.iter().map(|c| c.p99_value).collect();
    let mean_edges = quantile_edges(&means, g1);
    let p99_edges = quantile_edges(&p99s, g2);
    for (name, edges, g) in [("mean_value", &mean_edges, g1), ("p99_value", &p99_edges, g2)] {
        let mut distinct = edges.clone();
        distinct.dedup_by(|a, b| a == b);
        if distinct.len() < edges.len() {
            log::warn!(
                "{name}: fewer distinct values than {g} bins, degenerate bins collapse"
            );
        }
    }
    let group_ids = grid
        .cells
        .iter()
        .map(|c| bin_of(c.mean_value, &mean_edges) * g2 + bin_of(c.p99_value, &p99_edges))
        .collect();
    Ok(GroupAssignment { group_ids, group_count: g1 * g2, mean_edges, p99_edges })
}

/// Interior edges for `g` equal-frequency bins: the k-th edge is the
/// `ceil(k*n/g)`-th smallest value.
fn quantile_edges(values: &[f64], g: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    (1..g)
        .map(|k| {
            let rank = (k * n + g - 1) / g; // ceil(k*n/g)
            sorted[rank.saturating_sub(1)]
        })
        .collect()
}

/// Number of edges strictly below `v`; a value equal to an edge stays in the
/// lower bin.
fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| v > e).count()
}

/// Uniform per-group sampling without replacement under a fixed budget.
///
/// Quotas differ by at most one across non-empty groups; when a group is
/// smaller than its quota the shortfall is redistributed round-robin to the
/// largest groups with spare capacity. Output is group-major, sampled order
/// within each group.
pub fn stratified_sample(
    grid: &ClimateGrid,
    assignment: &GroupAssignment,
    budget: usize,
    seed: u64,
) -> Result<Vec<TileId>, SamplerError> {
    if budget < 1 {
        return Err(SamplerError::Argument("budget must be >= 1".into()));
    }
    if assignment.group_ids.len() != grid.cells.len() {
        return Err(SamplerError::Argument(format!(
            "assignment covers {} cells, grid has {}",
            assignment.group_ids.len(),
            grid.cells.len()
        )));
    }
    if budget > grid.cells.len() {
        return Err(SamplerError::Argument(format!(
            "budget {budget} exceeds population {}",
            grid.cells.len()
        )));
    }

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (cell_idx, &g) in assignment.group_ids.iter().enumerate() {
        members.entry(g).or_default().push(cell_idx);
    }
    let group_ids: Vec<usize> = members.keys().copied().collect();
    let n_groups = group_ids.len();

    // base quotas, remainder to the lowest group ids
    let base = budget / n_groups;
    let rem = budget % n_groups;
    let mut quota: BTreeMap<usize, usize> = group_ids
        .iter()
        .enumerate()
        .map(|(rank, &g)| (g, base + usize::from(rank < rem)))
        .collect();

    // cap quotas at population and collect the shortfall
    let mut shortfall = 0usize;
    for &g in &group_ids {
        let pop = members[&g].len();
        let q = quota[&g];
        if pop < q {
            shortfall += q - pop;
            quota.insert(g, pop);
        }
    }
    // round-robin the shortfall over the largest groups with capacity
    while shortfall > 0 {
        let mut open: Vec<usize> = group_ids
            .iter()
            .copied()
            .filter(|g| members[g].len() > quota[g])
            .collect();
        if open.is_empty() {
            break; // budget <= population guarantees this never strands quota
        }
        open.sort_by_key(|g| (std::cmp::Reverse(members[g].len()), *g));
        for g in open {
            if shortfall == 0 {
                break;
            }
            if members[&g].len() > quota[&g] {
                *quota.get_mut(&g).unwrap() += 1;
                shortfall -= 1;
            }
        }
    }

    let mut out = Vec::with_capacity(budget);
    for &g in &group_ids {
        let mut idxs = members[&g].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, g as u64));
        idxs.shuffle(&mut rng);
        for &cell_idx in idxs.iter().take(quota[&g]) {
            out.push(grid.cells[cell_idx].tile.clone());
        }
    }
    Ok(out)
}

/// Writes the sample as newline-separated tile codes.
pub fn write_sample(tiles: &[TileId], path: impl AsRef<Path>) -> Result<(), SamplerError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tiles {
        writeln!(f, "{}", t.tile_code)?;
    }
    Ok(())
}

/// Reads a sample written by [`write_sample`], as bare tile codes.
pub fn read_sample(path: impl AsRef<Path>) -> Result<Vec<String>, SamplerError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line.trim().to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from(values: &[(f64, f64)]) -> ClimateGrid {
        let cells = values
            .iter()
            .enumerate()
            .map(|(i, &(m, p))| ClimateCell {
                tile: TileId::new(((i % 60) + 1) as u8, 'T', format!("tile{i:04}")).unwrap(),
                mean_value: m,
                p99_value: p,
            })
            .collect();
        ClimateGrid::new(cells).unwrap()
    }

    #[test]
    fn four_by_five_yields_up_to_twenty_groups() {
        let values: Vec<(f64, f64)> =
            (0..400).map(|i| (f64::from(i % 40), f64::from(i / 2))).collect();
        let grid = grid_from(&values);
        let a = assign_groups(&grid, 4, 5).unwrap();
        assert_eq!(a.group_count, 20);
        assert!(a.nonempty_groups().len() <= 20);
        assert!(a.group_ids.iter().all(|&g| g < 20));
    }

    #[test]
    fn single_bin_collapses_to_group_zero() {
        let grid = grid_from(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)]);
        let a = assign_groups(&grid, 1, 1).unwrap();
        assert!(a.group_ids.iter().all(|&g| g == 0));
    }

    #[test]
    fn distinct_values_split_into_equal_marginal_bins() {
        // sort-and-split oracle: with 100 distinct values and 2 bins, the
        // 50 smallest land in the low bin on each variable
        let values: Vec<(f64, f64)> =
            (0..100).map(|i| (f64::from(i), f64::from(997 * i % 100))).collect();
        let grid = grid_from(&values);
        let a = assign_groups(&grid, 2, 2).unwrap();

        let mut mean_sorted: Vec<(f64, usize)> =
            grid.cells.iter().enumerate().map(|(i, c)| (c.mean_value, i)).collect();
        mean_sorted.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        for (rank, &(_, idx)) in mean_sorted.iter().enumerate() {
            let expected_bin = usize::from(rank >= 50);
            assert_eq!(a.group_ids[idx] / 2, expected_bin, "cell {idx} rank {rank}");
        }
        let low_mean = a.group_ids.iter().filter(|&&g| g / 2 == 0).count();
        let low_p99 = a.group_ids.iter().filter(|&&g| g % 2 == 0).count();
        assert_eq!(low_mean, 50);
        assert_eq!(low_p99, 50);
    }

    #[test]
    fn ties_at_edge_go_to_lower_bin() {
        let grid = grid_from(&[(1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let a = assign_groups(&grid, 2, 1).unwrap();
        // edge is the 2nd smallest = 1.0; all 1.0s stay in bin 0
        assert_eq!(a.group_ids, vec![0, 0, 0, 1]);
    }

    #[test]
    fn assignment_ignores_storage_order() {
        let values: Vec<(f64, f64)> =
            (0..50).map(|i| (f64::from(31 * i % 50), f64::from(17 * i % 50))).collect();
        let grid = grid_from(&values);
        let a = assign_groups(&grid, 3, 3).unwrap();

        let mut rev_cells = grid.cells.clone();
        rev_cells.reverse();
        let rev = ClimateGrid::new(rev_cells).unwrap();
        let b = assign_groups(&rev, 3, 3).unwrap();
        for i in 0..50 {
            assert_eq!(a.group_ids[i], b.group_ids[49 - i]);
        }
    }

    #[test]
    fn twenty_groups_budget_100_gives_five_each() {
        let values: Vec<(f64, f64)> =
            (0..400).map(|i| (f64::from(i % 20), f64::from(i / 20))).collect();
        let grid = grid_from(&values);
        let a = assign_groups(&grid, 4, 5).unwrap();
        assert_eq!(a.nonempty_groups().len(), 20);
        let sample = stratified_sample(&grid, &a, 100, 1).unwrap();
        assert_eq!(sample.len(), 100);
        let tile_group: BTreeMap<&str, usize> = grid
            .cells
            .iter()
            .zip(&a.group_ids)
            .map(|(c, &g)| (c.tile.tile_code.as_str(), g))
            .collect();
        let mut per_group: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &sample {
            *per_group.entry(tile_group[t.tile_code.as_str()]).or_default() += 1;
        }
        assert!(per_group.values().all(|&n| n == 5), "{per_group:?}");
    }

    #[test]
    fn shortfall_redistributes_to_largest_groups() {
        // group layout: one tiny group (3 cells) plus two large ones
        let mut values = Vec::new();
        values.extend((0..3).map(|i| (0.0, f64::from(i)))); // bin (0,*): 3 cells
        values.extend((0..20).map(|i| (10.0, f64::from(i)))); // large
        values.extend((0..22).map(|i| (20.0, f64::from(i)))); // largest
        let grid = grid_from(&values);
        // manual assignment for exact control
        let mut group_ids = vec![0usize; 3];
        group_ids.extend(std::iter::repeat(1).take(20));
        group_ids.extend(std::iter::repeat(2).take(22));
        let a = GroupAssignment { group_ids, group_count: 3, mean_edges: vec![], p99_edges: vec![] };

        let sample = stratified_sample(&grid, &a, 15, 9).unwrap();
        assert_eq!(sample.len(), 15);
        let mut counts = [0usize; 3];
        for t in &sample {
            let idx: usize = t.tile_code[4..].parse().unwrap();
            counts[a.group_ids[idx]] += 1;
        }
        // direct simulation oracle: quotas 5/5/5, group 0 caps at 3, the
        // 2-sample shortfall goes round-robin to the largest groups (2 then 1)
        assert_eq!(counts, [3, 6, 6]);
    }

    #[test]
    fn same_seed_same_sample() {
        let values: Vec<(f64, f64)> =
            (0..80).map(|i| (f64::from(i % 8), f64::from(i / 8))).collect();
        let grid = grid_from(&values);
        let a = assign_groups(&grid, 2, 2).unwrap();
        let s1 = stratified_sample(&grid, &a, 20, 77).unwrap();
        let s2 = stratified_sample(&grid, &a, 20, 77).unwrap();
        let s3 = stratified_sample(&grid, &a, 20, 78).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
    }

    #[test]
    fn budget_above_population_is_rejected() {
        let grid = grid_from(&[(0.0, 0.0), (1.0, 1.0)]);
        let a = assign_groups(&grid, 1, 1).unwrap();
        assert!(matches!(
            stratified_sample(&grid, &a, 3, 0),
            Err(SamplerError::Argument(_))
        ));
    }

    #[test]
    fn selection_frequency_is_uniform_within_group() {
        // one group of size 10 with quota 4: each member should be picked
        // with frequency 0.4 +- 0.05 over 1000 seeds
        let values: Vec<(f64, f64)> = (0..10).map(|i| (f64::from(i), 0.0)).collect();
        let grid = grid_from(&values);
        let a = assign_groups(&grid, 1, 1).unwrap();
        let mut hits = vec![0usize; 10];
        for seed in 0..1000 {
            for t in stratified_sample(&grid, &a, 4, seed).unwrap() {
                let idx: usize = t.tile_code[4..].parse().unwrap();
                hits[idx] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / 1000.0;
            assert!((freq - 0.4).abs() <= 0.05, "member {i} frequency {freq}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        let grid = grid_from(&[(1.5, 200.0), (-3.25, 17.0)]);
        grid.write_csv(&path).unwrap();
        let back = ClimateGrid::read_csv(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn csv_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "tile_code,utm_zone,lat_band,mean_value,p99_value\nt1,10,T,1.0,2.0\nt2,10,T,oops,2.0\n",
        )
        .unwrap();
        match ClimateGrid::read_csv(&path) {
            Err(SamplerError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
