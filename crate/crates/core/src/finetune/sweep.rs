//! Data-efficiency sweep: fine-tune on seeded subsamples of the training
//! set at several fractions and evaluate each run on the fixed validation
//! split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::optim::ParamStore;
use crate::util::derive_seed;

use super::seg::{train_seg_with_curve, SegDataset, SegRunConfig};

use super::FinetuneError;

/// One sweep measurement, as emitted into the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Runs `fractions x seeds` independent fine-tunes; each run trains on a
/// seeded subsample of `floor(fraction * n)` items and reports final
/// validation mIoU. Runs execute on the ambient rayon pool.
pub fn run_data_efficiency_sweep(
    run: &SegRunConfig,
    pretrained: Option<&ParamStore<f32>>,
    train: &SegDataset,
    val: &SegDataset,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, FinetuneError> {
    let n = train.len();
    if n == 0 {
        return Err(FinetuneError::Argument("empty training set".into()));
    }
    let mut jobs = Vec::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(FinetuneError::Argument(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let take = (fraction * n as f64).floor() as usize;
        if take < 1 {
            return Err(FinetuneError::Argument(format!(
                "fraction {fraction} of {n} samples yields no training data"
            )));
        }
        for &seed in seeds {
            jobs.push((fraction, take, seed));
        }
    }

    let rows: Result<Vec<SweepRow>, FinetuneError> = jobs
        .par_iter()
        .map(|&(fraction, take, seed)| {
            let subset = subsample(train, take, derive_seed(seed, (fraction * 1e6) as u64));
            let (_, curve) = train_seg_with_curve(run, pretrained, &subset, val, seed)?;
            let value = curve.last().copied().unwrap_or(0.0);
            Ok(SweepRow { fraction, seed, metric: "miou".into(), value })
        })
        .collect();
    let mut rows = rows?;
    rows.sort_by(|a, b| {
        (b.fraction, a.seed)
            .partial_cmp(&(a.fraction, b.seed))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(rows)
}

/// Seeded subsample without replacement; validation stays untouched.
pub fn subsample(data: &SegDataset, take: usize, seed: u64) -> SegDataset {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(take);
    SegDataset {
        samples: order.iter().map(|&i| data.samples[i].clone()).collect(),
        labels: order.iter().map(|&i| data.labels[i].clone()).collect(),
    }
}

/// Writes sweep rows as `fraction,seed,metric,value` CSV.
pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,seed,metric,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6}\n", r.fraction, r.seed, r.metric, r.value));
    }
    out
}
