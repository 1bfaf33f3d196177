//! Binary container: `u64` LE header length, JSON header, then a flat
//! little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ensure, Error, Result};
use crate::numerics::{ParamStore, Tensor};

const PARAMS_FORMAT: &str = "synthpair-params-v1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    format: String,
    meta: Value,
    params: Vec<ParamEntry>,
}

pub fn write_container(path: &Path, header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    f.write_all(&(head.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&head).map_err(io)?;
    f.write_all(payload).map_err(io)?;
    Ok(())
}

/// Returns the raw JSON header and the payload bytes.
pub fn read_container(path: &Path) -> Result<(Value, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() >= 8, Data, "{}: truncated header", path.display());
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 8 + n, Data, "{}: header overruns file", path.display());
    let header = serde_json::from_slice(&bytes[8..8 + n])?;
    Ok((header, bytes[8 + n..].to_vec()))
}

pub fn save_params(path: &Path, meta: Value, store: &ParamStore<f32>) -> Result<()> {
    let mut payload = Vec::with_capacity(store.num_elements(false) * 4);
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
        });
        for x in p.tensor.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = ParamsHeader {
        format: PARAMS_FORMAT.into(),
        meta,
        params,
    };
    write_container(path, &header, &payload)
}

/// Returns the `meta` object stored with the parameters.
pub fn load_params(path: &Path) -> Result<(Value, ParamStore<f32>)> {
    let (header, payload) = read_container(path)?;
    let header: ParamsHeader = serde_json::from_value(header)?;
    ensure!(
        header.format == PARAMS_FORMAT,
        Data,
        "{}: unknown format {:?}",
        path.display(),
        header.format
    );
    let mut store = ParamStore::new();
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        ensure!(
            data.len() == n,
            Data,
            "{}: payload ends inside {}",
            path.display(),
            e.name
        );
        store.add(e.name, Tensor::new(e.shape, data)?, e.trainable);
    }
    ensure!(floats.next().is_none(), Data, "{}: trailing payload", path.display());
    Ok((header.meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.init("a.w", &[3, 4], Init::Normal(1.0), &mut rng);
        let b = s.init("b", &[5], Init::Uniform(2.0), &mut rng);
        s.get_mut(b).trainable = false;
        save_params(&path, serde_json::json!({"k": 7}), &s).unwrap();
        let (meta, back) = load_params(&path).unwrap();
        assert_eq!(meta["k"], 7);
        assert_eq!(back.content_hash(""), s.content_hash(""));
        assert!(!back.by_name("b").unwrap().trainable);
    }

    #[test]
    fn truncated_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        std::fs::write(&path, [1u8, 0, 0]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Data(_))));
    }
}
