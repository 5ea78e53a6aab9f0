//! Deterministic batch iteration with parallel chunk decoding.
//!
//! The epoch permutation is chunk-aware: chunk order is shuffled, then
//! sample order within each chunk, so samples of one chunk stay contiguous
//! and each chunk file is opened exactly once per epoch. Batch content is a
//! pure function of `(seed, epoch, batch index)`; worker count and prefetch
//! depth only change scheduling, never data.

use std::collections::HashMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam::channel::{bounded, Receiver, Sender};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::derive_seed;

use super::{StoreError, StoreManifest, ZarrStore};

/// Batch assembly knobs: batch/workers/prefetch mirror the usual data
/// loader configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub workers: usize,
    /// Upper bound on batches buffered ahead of the consumer.
    pub prefetch: usize,
    pub shuffle_seed: u64,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self { batch_size: 8, workers: 2, prefetch: 2, shuffle_seed: 0 }
    }
}

/// One training batch: raw stored values widened to f32 (standardization
/// happens downstream), C-order `(B, T, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub epoch: u64,
    pub index: usize,
    pub sample_ids: Vec<usize>,
    pub shape: (usize, usize, usize, usize, usize),
    pub data: Vec<f32>,
}

/// The sample visit order for one epoch: shuffled chunk order, then shuffled
/// sample order within each chunk. Depends only on the store geometry, the
/// seed and the epoch.
pub fn epoch_permutation(manifest: &StoreManifest, seed: u64, epoch: u64) -> Vec<usize> {
    let k = manifest.chunk_samples;
    let n = manifest.sample_count;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    let mut chunk_order: Vec<usize> = (0..manifest.chunk_count()).collect();
    chunk_order.shuffle(&mut rng);
    let mut perm = Vec::with_capacity(n);
    for &ch in &chunk_order {
        let first = ch * k;
        let count = k.min(n - first);
        let mut ids: Vec<usize> = (first..first + count).collect();
        ids.shuffle(&mut rng);
        perm.extend(ids);
    }
    perm
}

type ChunkResult = (usize, Result<Vec<Vec<f32>>, StoreError>);

/// Iterator over the full batches of one epoch.
pub struct BatchIter {
    store: Arc<ZarrStore>,
    cfg: LoaderConfig,
    epoch: u64,
    perm: Vec<usize>,
    n_batches: usize,
    next_batch: usize,
    /// chunk ids in consumption order
    chunk_seq: Vec<usize>,
    /// chunk id -> position in `chunk_seq`
    chunk_pos: HashMap<usize, usize>,
    /// per chunk position, how many samples remain to be consumed
    remaining: Vec<usize>,
    /// decoded chunks by position
    cache: HashMap<usize, Vec<Vec<f32>>>,
    task_tx: Option<Sender<(usize, usize)>>,
    result_rx: Receiver<ChunkResult>,
    next_task: usize,
    failed: bool,
    workers: Vec<JoinHandle<()>>,
}

impl BatchIter {
    pub fn new(store: Arc<ZarrStore>, cfg: LoaderConfig, epoch: u64) -> Result<Self, StoreError> {
        if cfg.batch_size < 1 || cfg.workers < 1 {
            return Err(StoreError::Argument("batch_size and workers must be >= 1".into()));
        }
        let n = store.manifest.sample_count;
        if cfg.batch_size > n {
            return Err(StoreError::Argument(format!(
                "batch_size {} exceeds sample_count {n}",
                cfg.batch_size
            )));
        }
        let mut perm = epoch_permutation(&store.manifest, cfg.shuffle_seed, epoch);
        let n_batches = n / cfg.batch_size;
        perm.truncate(n_batches * cfg.batch_size);

        let k = store.manifest.chunk_samples;
        let mut chunk_seq = Vec::new();
        let mut chunk_pos = HashMap::new();
        let mut remaining = Vec::new();
        for &s in &perm {
            let ch = s / k;
            let pos = *chunk_pos.entry(ch).or_insert_with(|| {
                chunk_seq.push(ch);
                remaining.push(0);
                chunk_seq.len() - 1
            });
            remaining[pos] += 1;
        }

        let (task_tx, task_rx) = bounded::<(usize, usize)>(chunk_seq.len().max(1));
        let (result_tx, result_rx) = bounded::<ChunkResult>(cfg.workers + cfg.prefetch + 2);
        let mut workers = Vec::with_capacity(cfg.workers);
        for _ in 0..cfg.workers {
            let store = store.clone();
            let task_rx = task_rx.clone();
            let result_tx = result_tx.clone();
            workers.push(std::thread::spawn(move || {
                while let Ok((pos, chunk)) = task_rx.recv() {
                    let res = store.read_chunk_f32(chunk);
                    if result_tx.send((pos, res)).is_err() {
                        break;
                    }
                }
            }));
        }

        Ok(Self {
            store,
            cfg,
            epoch,
            perm,
            n_batches,
            next_batch: 0,
            chunk_seq,
            chunk_pos,
            remaining,
            cache: HashMap::new(),
            task_tx: Some(task_tx),
            result_rx,
            next_task: 0,
            failed: false,
            workers,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_batches
    }

    /// Sends chunk tasks up to the allowed lookahead past `current_pos`.
    fn top_up(&mut self, current_pos: usize) {
        let k = self.store.manifest.chunk_samples.max(1);
        let prefetch_chunks =
            ((self.cfg.prefetch + 1) * self.cfg.batch_size).div_ceil(k) + self.cfg.workers;
        let limit = (current_pos + prefetch_chunks + 1).min(self.chunk_seq.len());
        while self.next_task < limit {
            let pos = self.next_task;
            let chunk = self.chunk_seq[pos];
            if let Some(tx) = &self.task_tx {
                if tx.send((pos, chunk)).is_err() {
                    break;
                }
            }
            self.next_task += 1;
        }
    }

    fn ensure_chunk(&mut self, pos: usize) -> Result<(), StoreError> {
        while !self.cache.contains_key(&pos) {
            match self.result_rx.recv() {
                Ok((p, Ok(rows))) => {
                    self.cache.insert(p, rows);
                }
                Ok((_, Err(e))) => return Err(e),
                Err(_) => {
                    return Err(StoreError::Corruption("loader workers terminated".into()))
                }
            }
        }
        Ok(())
    }

    fn assemble(&mut self, batch_idx: usize) -> Result<Batch, StoreError> {
        let b = self.cfg.batch_size;
        let (t, c, h, w) = self.store.manifest.sample_shape;
        let numel = self.store.manifest.sample_numel();
        let ids: Vec<usize> = self.perm[batch_idx * b..(batch_idx + 1) * b].to_vec();
        let mut data = Vec::with_capacity(b * numel);
        let k = self.store.manifest.chunk_samples;
        for &s in &ids {
            let ch = s / k;
            let pos = self.chunk_pos[&ch];
            self.top_up(pos);
            self.ensure_chunk(pos)?;
            let rows = &self.cache[&pos];
            data.extend_from_slice(&rows[s % k]);
            self.remaining[pos] -= 1;
            if self.remaining[pos] == 0 {
                self.cache.remove(&pos);
            }
        }
        Ok(Batch { epoch: self.epoch, index: batch_idx, sample_ids: ids, shape: (b, t, c, h, w), data })
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_batch >= self.n_batches {
            return None;
        }
        let idx = self.next_batch;
        self.next_batch += 1;
        match self.assemble(idx) {
            Ok(batch) => Some(Ok(batch)),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

impl Drop for BatchIter {
    fn drop(&mut self) {
        self.task_tx.take(); // close the channel so workers exit
        while self.result_rx.try_recv().is_ok() {}
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}
