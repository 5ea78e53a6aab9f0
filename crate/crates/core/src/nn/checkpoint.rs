//! Checkpoint format: `ckpt.json` (names, shapes, dtype, schedule step,
//! RNG state) plus `ckpt.bin` (parameter values as little-endian f32,
//! concatenated in name order).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::ParamStore;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub names: Vec<String>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub dtype: String,
    pub schedule_step: u64,
    pub rng: RngState,
}

/// Writes `ckpt.json` + `ckpt.bin` into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    store: &ParamStore<f32>,
    schedule_step: u64,
    rng: &ChaCha8Rng,
) -> Result<(), NnError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut names = Vec::new();
    let mut shapes = BTreeMap::new();
    for (name, entry) in store.iter() {
        names.push(name.to_string());
        shapes.insert(name.to_string(), entry.value.shape().to_vec());
    }
    let meta = CheckpointMeta {
        names,
        shapes,
        dtype: "f32".into(),
        schedule_step,
        rng: RngState::capture(rng),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| NnError::State(format!("serialize checkpoint meta: {e}")))?;
    std::fs::write(dir.join("ckpt.json"), json + "\n").map_err(io_err)?;

    let mut bin = std::io::BufWriter::new(
        std::fs::File::create(dir.join("ckpt.bin")).map_err(io_err)?,
    );
    for (_, entry) in store.iter() {
        for &v in entry.value.data() {
            bin.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    bin.flush().map_err(io_err)?;
    Ok(())
}

/// Loads a checkpoint; moment buffers start fresh.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
) -> Result<(ParamStore<f32>, u64, ChaCha8Rng), NnError> {
    let dir = dir.as_ref();
    let meta_raw = std::fs::read_to_string(dir.join("ckpt.json")).map_err(io_err)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| NnError::State(format!("bad ckpt.json: {e}")))?;
    if meta.dtype != "f32" {
        return Err(NnError::State(format!("unsupported checkpoint dtype {}", meta.dtype)));
    }
    let mut bin = std::io::BufReader::new(
        std::fs::File::open(dir.join("ckpt.bin")).map_err(io_err)?,
    );
    let mut store = ParamStore::new();
    for name in &meta.names {
        let shape = meta.shapes.get(name).ok_or_else(|| {
            NnError::State(format!("checkpoint meta missing shape for {name}"))
        })?;
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        bin.read_exact(&mut buf)
            .map_err(|e| NnError::State(format!("ckpt.bin truncated at {name}: {e}")))?;
        let values: Vec<f32> =
            buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        store.insert(name.clone(), Tensor::from_vec(shape, values)?)?;
    }
    let mut probe = [0u8; 1];
    if bin.read(&mut probe).map_err(io_err)? != 0 {
        return Err(NnError::State("ckpt.bin has trailing bytes".into()));
    }
    Ok((store, meta.schedule_step, meta.rng.restore()))
}

fn io_err(e: std::io::Error) -> NnError {
    NnError::State(format!("checkpoint I/O: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::blocks::{init_rng, trunc_normal};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = init_rng(3);
        let mut store = ParamStore::<f32>::new();
        store.insert("b.w", trunc_normal(&[4, 3], 0.02, &mut rng)).unwrap();
        store.insert("a.w", trunc_normal(&[2], 0.02, &mut rng)).unwrap();

        let d1 = dir.path().join("one");
        save_checkpoint(&d1, &store, 17, &rng).unwrap();
        let (loaded, step, rng2) = load_checkpoint(&d1).unwrap();
        assert_eq!(step, 17);
        let d2 = dir.path().join("two");
        save_checkpoint(&d2, &loaded, step, &rng2).unwrap();

        for f in ["ckpt.json", "ckpt.bin"] {
            let a = std::fs::read(d1.join(f)).unwrap();
            let b = std::fs::read(d2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs after round trip");
        }
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        use rand::Rng;
        let mut rng = init_rng(9);
        let _: u64 = rng.gen();
        let _: u64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: Vec<u64> = (0..4).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..4).map(|_| restored.gen()).collect();
        assert_eq!(a, b);
    }
}
