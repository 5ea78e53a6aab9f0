//! Offline quality filtering: evaluates per-date cloud masks over
//! non-overlapping windows and emits the index of good-quality sub-regions
//! used for packing.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{QualityCode, QualityMask};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One good-quality sub-region: a window of a tile plus the run of dates on
/// which it passed the filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipIndexEntry {
    #[serde(rename = "tile")]
    pub tile_code: String,
    pub timestamps: Vec<NaiveDate>,
    pub x: u32,
    pub y: u32,
    /// Window extent `[X, Y]` in pixels.
    pub window: (u32, u32),
}

/// Filtering policy: window geometry, the codes counted as bad, the maximum
/// tolerated bad fraction, and how many consecutive dates a window must pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub window: (usize, usize),
    pub bad_fraction_threshold: f64,
    pub bad_codes: Vec<QualityCode>,
    pub timesteps_required: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            window: (224, 224),
            bad_fraction_threshold: 0.05,
            bad_codes: vec![
                QualityCode::Cloud,
                QualityCode::CloudShadow,
                QualityCode::Adjacent,
                QualityCode::NoData,
            ],
            timesteps_required: 3,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.window.0 < 1 || self.window.1 < 1 {
            return Err(FilterError::Argument("window dims must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bad_fraction_threshold) {
            return Err(FilterError::Argument(format!(
                "threshold {} outside [0,1]",
                self.bad_fraction_threshold
            )));
        }
        if self.timesteps_required < 1 {
            return Err(FilterError::Argument("timesteps_required must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scans one mask with non-overlapping windows in row-major order from
/// `(0, 0)`; partial windows at the right/bottom edges are discarded.
/// Returns `((x, y), bad_fraction)` per window.
pub fn scan_windows(mask: &QualityMask, policy: &FilterPolicy) -> Vec<((u32, u32), f64)> {
    let (wx, wy) = policy.window;
    let bad: HashSet<u8> = policy.bad_codes.iter().map(|&c| c as u8).collect();
    let area = (wx * wy) as f64;
    let mut out = Vec::new();
    let mut y = 0;
    while y + wy <= mask.h {
        let mut x = 0;
        while x + wx <= mask.w {
            let mut count = 0usize;
            for dy in 0..wy {
                let row = (y + dy) * mask.w + x;
                count += mask.codes[row..row + wx].iter().filter(|c| bad.contains(c)).count();
            }
            out.push(((x as u32, y as u32), count as f64 / area));
            x += wx;
        }
        y += wy;
    }
    out
}

/// Evaluates all per-date masks of one tile.
///
/// Masks are first sorted by timestamp, so the result does not depend on the
/// order they were supplied in. Every run of `timesteps_required` consecutive
/// dates whose bad fractions all stay at or below the threshold yields one
/// entry; entries are sorted by `(y, x, first timestamp)`.
pub fn filter_tile(
    masks: &[QualityMask],
    policy: &FilterPolicy,
) -> Result<Vec<ChipIndexEntry>, FilterError> {
    policy.validate()?;
    if masks.len() < policy.timesteps_required {
        return Err(FilterError::Argument(format!(
            "{} masks supplied, {} required",
            masks.len(),
            policy.timesteps_required
        )));
    }
    let (h, w) = (masks[0].h, masks[0].w);
    for m in masks {
        if m.h != h || m.w != w {
            return Err(FilterError::Shape(format!(
                "mask dims {}x{} inconsistent with {}x{}",
                m.w, m.h, w, h
            )));
        }
    }
    let mut sorted: Vec<&QualityMask> = masks.iter().collect();
    sorted.sort_by_key(|m| m.timestamp);
    if sorted.windows(2).any(|p| p[0].timestamp == p[1].timestamp) {
        return Err(FilterError::Argument("duplicate mask timestamps".into()));
    }

    // per-date window fractions; all dates share the same window grid
    let per_date: Vec<Vec<((u32, u32), f64)>> =
        sorted.iter().map(|m| scan_windows(m, policy)).collect();
    let n_windows = per_date[0].len();
    let k = policy.timesteps_required;

    let mut entries = Vec::new();
    for wi in 0..n_windows {
        let (x, y) = per_date[0][wi].0;
        for start in 0..=(sorted.len() - k) {
            let ok = (start..start + k).all(|ti| per_date[ti][wi].1 <= policy.bad_fraction_threshold);
            if ok {
                entries.push(ChipIndexEntry {
                    tile_code: sorted[start].origin.tile.tile_code.clone(),
                    timestamps: sorted[start..start + k].iter().map(|m| m.timestamp).collect(),
                    x,
                    y,
                    window: (policy.window.0 as u32, policy.window.1 as u32),
                });
            }
        }
    }
    entries.sort_by(|a, b| {
        (a.y, a.x, a.timestamps[0]).cmp(&(b.y, b.x, b.timestamps[0]))
    });
    Ok(entries)
}

/// Writes the index as JSON Lines (UTF-8, LF).
pub fn write_index(entries: &[ChipIndexEntry], path: impl AsRef<Path>) -> Result<(), FilterError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|err| FilterError::Argument(format!("serialize entry: {err}")))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads an index written by [`write_index`]; parse failures name the line.
pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<ChipIndexEntry>, FilterError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ChipIndexEntry = serde_json::from_str(&line)
            .map_err(|e| FilterError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ChipOrigin, TileId};

    fn mask_with(codes: Vec<u8>, h: usize, w: usize, day: u32) -> QualityMask {
        QualityMask::new(
            (h, w),
            codes,
            ChipOrigin { tile: TileId::new(12, 'S', "12SVB001").unwrap(), x: 0, y: 0 },
            NaiveDate::from_ymd_opt(2022, 1, 1).unwrap() + chrono::Days::new(u64::from(day)),
        )
        .unwrap()
    }

    fn clear_mask(h: usize, w: usize, day: u32) -> QualityMask {
        mask_with(vec![QualityCode::Clear as u8; h * w], h, w, day)
    }

    fn policy(window: usize, threshold: f64, k: usize) -> FilterPolicy {
        FilterPolicy {
            window: (window, window),
            bad_fraction_threshold: threshold,
            timesteps_required: k,
            ..FilterPolicy::default()
        }
    }

    #[test]
    fn windows_tile_the_mask() {
        let m = clear_mask(64, 64, 0);
        let got = scan_windows(&m, &policy(32, 0.05, 3));
        let coords: Vec<(u32, u32)> = got.iter().map(|w| w.0).collect();
        assert_eq!(coords, vec![(0, 0), (32, 0), (0, 32), (32, 32)]);
        assert!(got.iter().all(|w| w.1 == 0.0));
    }

    #[test]
    fn partial_edge_windows_are_discarded() {
        let m = clear_mask(70, 70, 0);
        let got = scan_windows(&m, &policy(32, 0.05, 3));
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn mask_smaller_than_window_yields_empty() {
        let m = clear_mask(16, 16, 0);
        assert!(scan_windows(&m, &policy(32, 0.05, 3)).is_empty());
    }

    #[test]
    fn three_clear_dates_one_window_one_entry() {
        let masks: Vec<QualityMask> = (0..3).map(|d| clear_mask(224, 224, d * 16)).collect();
        let entries = filter_tile(&masks, &policy(224, 0.05, 3)).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].timestamps.len(), 3);
        assert_eq!((entries[0].x, entries[0].y), (0, 0));
    }

    #[test]
    fn cloudy_middle_date_blocks_all_runs() {
        let mut masks: Vec<QualityMask> = (0..3).map(|d| clear_mask(64, 64, d * 16)).collect();
        // 10% of the middle mask cloudy
        let n_bad = 64 * 64 / 10;
        for i in 0..n_bad {
            masks[1].codes[i] = QualityCode::Cloud as u8;
        }
        // window = whole tile, so the bad fraction applies to the only window
        let entries = filter_tile(&masks, &policy(64, 0.05, 3)).unwrap();
        assert!(entries.is_empty());
    }

    #[test]
    fn four_clear_dates_required_three_gives_two_runs() {
        // enumeration oracle: consecutive runs of length 3 over 4 dates are
        // (t1,t2,t3) and (t2,t3,t4)
        let masks: Vec<QualityMask> = (0..4).map(|d| clear_mask(64, 64, d * 16)).collect();
        let entries = filter_tile(&masks, &policy(64, 0.05, 3)).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].timestamps, masks[0..3].iter().map(|m| m.timestamp).collect::<Vec<_>>());
        assert_eq!(entries[1].timestamps, masks[1..4].iter().map(|m| m.timestamp).collect::<Vec<_>>());
    }

    #[test]
    fn supplied_order_does_not_matter() {
        let mut masks: Vec<QualityMask> = (0..4).map(|d| clear_mask(64, 64, d * 16)).collect();
        masks[2].codes[0] = QualityCode::NoData as u8;
        let a = filter_tile(&masks, &policy(32, 0.05, 2)).unwrap();
        masks.reverse();
        let b = filter_tile(&masks, &policy(32, 0.05, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_is_monotone() {
        let mut masks: Vec<QualityMask> = (0..3).map(|d| clear_mask(64, 64, d * 16)).collect();
        for i in 0..200 {
            masks[0].codes[i * 7 % (64 * 64)] = QualityCode::Cloud as u8;
        }
        let lo = filter_tile(&masks, &policy(32, 0.01, 2)).unwrap();
        let hi = filter_tile(&masks, &policy(32, 0.2, 2)).unwrap();
        for e in &lo {
            assert!(hi.contains(e), "entry lost when threshold raised");
        }
        assert!(hi.len() >= lo.len());
    }

    #[test]
    fn emitted_entries_satisfy_threshold_when_rechecked() {
        let mut masks: Vec<QualityMask> = (0..4).map(|d| clear_mask(96, 96, d * 16)).collect();
        for (i, m) in masks.iter_mut().enumerate() {
            for j in 0..(i * 400) {
                m.codes[(j * 13) % (96 * 96)] = QualityCode::CloudShadow as u8;
            }
        }
        let pol = policy(32, 0.08, 2);
        let entries = filter_tile(&masks, &pol).unwrap();
        assert!(!entries.is_empty());
        for e in &entries {
            for ts in &e.timestamps {
                let m = masks.iter().find(|m| m.timestamp == *ts).unwrap();
                let frac = scan_windows(m, &pol)
                    .into_iter()
                    .find(|(pos, _)| *pos == (e.x, e.y))
                    .unwrap()
                    .1;
                assert!(frac <= pol.bad_fraction_threshold);
            }
        }
    }

    #[test]
    fn index_round_trip_and_hand_written_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        let masks: Vec<QualityMask> = (0..4).map(|d| clear_mask(96, 96, d * 16)).collect();
        let entries = filter_tile(&masks, &policy(8, 0.05, 3)).unwrap();
        assert!(entries.len() >= 100, "want >= 100 entries, got {}", entries.len());
        write_index(&entries, &path).unwrap();
        assert_eq!(read_index(&path).unwrap(), entries);

        // empty index
        let empty = dir.path().join("empty.jsonl");
        write_index(&[], &empty).unwrap();
        assert!(read_index(&empty).unwrap().is_empty());

        // hand-written line matches the documented schema
        let hand = dir.path().join("hand.jsonl");
        std::fs::write(
            &hand,
            "{\"tile\":\"12SVB001\",\"timestamps\":[\"2022-01-01\",\"2022-01-17\"],\"x\":32,\"y\":64,\"window\":[224,224]}\n",
        )
        .unwrap();
        let parsed = read_index(&hand).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].tile_code, "12SVB001");
        assert_eq!(parsed[0].x, 32);
        assert_eq!(parsed[0].y, 64);
        assert_eq!(parsed[0].window, (224, 224));
        assert_eq!(parsed[0].timestamps.len(), 2);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"tile\":\"a\",\"timestamps\":[\"2022-01-01\"],\"x\":0,\"y\":0,\"window\":[8,8]}\nnot json\n").unwrap();
        match read_index(&path) {
            Err(FilterError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_mask_dims_is_shape_error() {
        let masks = vec![clear_mask(64, 64, 0), clear_mask(32, 32, 16), clear_mask(64, 64, 32)];
        assert!(matches!(
            filter_tile(&masks, &policy(32, 0.05, 2)),
            Err(FilterError::Shape(_))
        ));
    }
}
