//! On-disk layout of a trained operator directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Architecture, EpochRecord, Network, NetworkState, StopReason, TrainConfig, TrainedOperator};
use crate::datagen::Standardizer;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const OPERATOR_FORMAT_VERSION: u32 = 1;

/// Byte layout of `params.bin`, all integers `u64` and all values `f64`,
/// little-endian.
pub const PARAMS_LAYOUT: &str = "u64 tensor_count; per tensor: u64 rows, u64 cols, rows*cols f64 row-major; \
u64 batchnorm_count; per batchnorm: u64 channels, channels f64 running mean, channels f64 running variance";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    format_version: u32,
    architecture: Architecture,
    in_dim: usize,
    out_dim: usize,
    config: TrainConfig,
    stop: StopReason,
    params_layout: String,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<'a>(w: &mut impl Write, vs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Upper bound on any stored dimension, to reject corrupt headers early.
const MAX_DIM: u64 = 1 << 32;

fn checked_dim(v: u64) -> Result<usize> {
    if v > MAX_DIM {
        return Err(Error::Config(format!("params.bin: implausible dimension {v}")));
    }
    Ok(v as usize)
}

pub fn write_state(path: &Path, state: &NetworkState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    put_u64(&mut w, state.params.len() as u64)?;
    for t in &state.params {
        put_u64(&mut w, t.nrows() as u64)?;
        put_u64(&mut w, t.ncols() as u64)?;
        put_f64s(&mut w, t.iter())?;
    }
    put_u64(&mut w, state.running.len() as u64)?;
    for (m, v) in &state.running {
        put_u64(&mut w, m.len() as u64)?;
        put_f64s(&mut w, m.iter())?;
        put_f64s(&mut w, v.iter())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_state(path: &Path) -> Result<NetworkState> {
    let mut r = BufReader::new(File::open(path)?);
    let count = checked_dim(get_u64(&mut r)?)?;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rows = checked_dim(get_u64(&mut r)?)?;
        let cols = checked_dim(get_u64(&mut r)?)?;
        let vals = get_f64s(&mut r, rows * cols)?;
        params.push(Array2::from_shape_vec((rows, cols), vals).map_err(|e| Error::ShapeMismatch(e.to_string()))?);
    }
    let bn = checked_dim(get_u64(&mut r)?)?;
    let mut running = Vec::with_capacity(bn.min(4096));
    for _ in 0..bn {
        let c = checked_dim(get_u64(&mut r)?)?;
        let m = Array1::from(get_f64s(&mut r, c)?);
        let v = Array1::from(get_f64s(&mut r, c)?);
        running.push((m, v));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Config(format!("params.bin: {} trailing bytes", rest.len())));
    }
    Ok(NetworkState { params, running })
}

impl TrainedOperator {
    /// Writes `spec.json`, `params.bin`, `standardizer.json` and `history.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(
            &dir.join("spec.json"),
            &SpecFile {
                format_version: OPERATOR_FORMAT_VERSION,
                architecture: self.network.arch.clone(),
                in_dim: self.network.in_dim,
                out_dim: self.network.out_dim,
                config: self.config.clone(),
                stop: self.stop,
                params_layout: PARAMS_LAYOUT.to_string(),
            },
        )?;
        write_state(&dir.join("params.bin"), &self.network.state)?;
        write_json(&dir.join("standardizer.json"), &self.standardizer)?;
        let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
        for h in &self.history {
            w.serialize(h)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: SpecFile = read_json(&dir.join("spec.json"))?;
        if spec.format_version != OPERATOR_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "operator format version {} is not supported (expected {OPERATOR_FORMAT_VERSION})",
                spec.format_version
            )));
        }
        let state = read_state(&dir.join("params.bin"))?;
        let standardizer: Standardizer = read_json(&dir.join("standardizer.json"))?;
        let mut history = Vec::new();
        for rec in csv::Reader::from_path(dir.join("history.csv"))?.deserialize() {
            let rec: EpochRecord = rec?;
            history.push(rec);
        }
        let network = Network {
            arch: spec.architecture,
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            state,
        };
        // rebuild once to confirm the stored tensors fit the architecture
        network.graph(crate::autodiff::Mode::Eval, 1, None)?;
        Ok(Self {
            network,
            standardizer,
            history,
            config: spec.config,
            stop: spec.stop,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{train, CnnSpec, OutputActivation, TrainData};
    use crate::numerics::Matrix;
    use crate::rng::RngStream;

    #[test]
    fn reload_reproduces_predictions_exactly() {
        let mut rng = RngStream::new(3, 0);
        let m: Matrix = Array2::from_shape_simple_fn((80, 6), || rng.uniform());
        let d: Matrix = Array2::from_shape_simple_fn((80, 5), || rng.normal());
        let mut spec = CnnSpec::paper(OutputActivation::Softplus);
        spec.filters = 4;
        spec.dense = vec![8];
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let op = train(&Architecture::Cnn(spec), &TrainData { m: &m, d: &d, physics: None }, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        op.save(dir.path()).unwrap();
        let back = TrainedOperator::load(dir.path()).unwrap();
        assert_eq!(back, op);
        assert_eq!(back.predict_batch(&d).unwrap(), op.predict_batch(&d).unwrap());
    }

    #[test]
    fn truncated_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.bin");
        let state = NetworkState {
            params: vec![Array2::zeros((2, 3))],
            running: vec![],
        };
        write_state(&p, &state).unwrap();
        assert_eq!(read_state(&p).unwrap(), state);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_state(&p).is_err());
    }
}
