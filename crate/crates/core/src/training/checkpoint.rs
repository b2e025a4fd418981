//! Training checkpoints: the model in its own format followed by the
//! optimizer block `ADAM`, `u64` step, `f64` rate factor, `u64` count, first
//! and second moments, the five loss weights and the `u64` iteration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Adam, AdamConfig, Model};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{expect_magic, read_f64s, read_u64, write_f64s, write_u64};

const MAGIC: &[u8; 4] = b"ADAM";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub adam: Adam,
    pub lambdas: [f64; 5],
    pub iteration: usize,
}

pub fn save_training_checkpoint<M: Model>(path: &Path, model: &M, state: &TrainingState) -> Result<()> {
    // write to a sibling file first so a crash never leaves half a checkpoint
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        model.write_model(&mut w)?;
        w.write_all(MAGIC)?;
        write_u64(&mut w, state.adam.t)?;
        write_f64s(&mut w, &[state.adam.lr_factor])?;
        write_u64(&mut w, state.adam.m.len() as u64)?;
        write_f64s(&mut w, &state.adam.m)?;
        write_f64s(&mut w, &state.adam.v)?;
        write_f64s(&mut w, &state.lambdas)?;
        write_u64(&mut w, state.iteration as u64)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_training_checkpoint`]. The optimizer
/// hyper-parameters are not stored; `config` supplies them.
pub fn load_training_checkpoint<M: Model>(path: &Path, config: AdamConfig) -> Result<(M, TrainingState)> {
    let mut r = BufReader::new(File::open(path)?);
    let model = M::read_model(&mut r)?;
    expect_magic(&mut r, MAGIC)?;
    let t = read_u64(&mut r)?;
    let lr_factor = read_f64s(&mut r, 1)?[0];
    let n = read_u64(&mut r)? as usize;
    if n != model.num_params() {
        return Err(Error::Checkpoint(format!("optimizer state has {n} entries, model has {}", model.num_params())));
    }
    let m = read_f64s(&mut r, n)?;
    let v = read_f64s(&mut r, n)?;
    let lambdas: [f64; 5] = read_f64s(&mut r, 5)?.try_into().expect("five weights");
    let iteration = read_u64(&mut r)? as usize;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the optimizer state", rest.len())));
    }
    Ok((model, TrainingState { adam: Adam { config, t, m, v, lr_factor }, lambdas, iteration }))
}
