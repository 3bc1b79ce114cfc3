//! Single-file checkpoint archive: named weight arrays, a config snapshot,
//! and the epoch counter, in a simple little-endian binary layout.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use candle_core::Tensor;
use candle_nn::VarMap;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"OREYCKPT";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u32,
    pub weights: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    epoch: u32,
    varmap: &VarMap,
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    {
        let data = varmap.data().lock().unwrap();
        for (name, var) in data.iter() {
            let t = var.as_tensor().to_dtype(candle_core::DType::F32)?;
            let dims = t.dims().to_vec();
            let flat = t.flatten_all()?.to_vec1::<f32>()?;
            entries.push((name.clone(), dims, flat));
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&epoch.to_le_bytes()).map_err(io_err)?;
    let cfg_text = config.to_kv();
    w.write_all(&(cfg_text.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(cfg_text.as_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, dims, flat) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(io_err)?;
        for d in &dims {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io_err)?;
        }
        let mut bytes = Vec::with_capacity(flat.len() * 4);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    if u32::from_le_bytes(u32buf) != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let epoch = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(io_err)?;
    let config = TrainConfig::from_kv(
        std::str::from_utf8(&cfg_bytes).map_err(|_| bad("config snapshot is not utf-8"))?,
    )?;
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    let mut weights = HashMap::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("weight name not utf-8"))?;
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let ndims = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndims);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndims {
            r.read_exact(&mut u64buf).map_err(io_err)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let count: usize = dims.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let mut flat = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(4) {
            flat.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        weights.insert(name, (dims, flat));
    }
    Ok(Checkpoint {
        config,
        epoch,
        weights,
    })
}

/// Copy checkpoint weights into an already-built variable store; every
/// variable must be present with a matching shape.
pub fn apply_weights(varmap: &VarMap, ckpt: &Checkpoint) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    for (name, var) in data.iter() {
        let (dims, flat) = ckpt.weights.get(name).ok_or_else(|| {
            Error::Data(format!("checkpoint is missing weight `{name}`"))
        })?;
        if var.dims() != dims.as_slice() {
            return Err(Error::Data(format!(
                "weight `{name}` shape {:?} does not match checkpoint {:?}",
                var.dims(),
                dims
            )));
        }
        let t = Tensor::from_vec(flat.clone(), dims.as_slice(), var.device())?
            .to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarBuilder;

    #[test]
    fn checkpoint_roundtrip_restores_weights_and_config() {
        let dir = std::env::temp_dir().join(format!("oreyolo-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");

        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let w = vb
            .get_with_hints((4, 3), "layer.weight", candle_nn::init::DEFAULT_KAIMING_NORMAL)
            .unwrap();
        let _b = vb.get_with_hints(4, "layer.bias", candle_nn::init::ZERO).unwrap();
        let orig = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();

        let mut cfg = TrainConfig::default();
        cfg.seed = 77;
        save_checkpoint(&path, &cfg, 12, &varmap).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.epoch, 12);
        assert_eq!(ckpt.config.seed, 77);
        assert_eq!(ckpt.weights.len(), 2);
        assert_eq!(ckpt.weights["layer.weight"].0, vec![4, 3]);

        // wipe and restore
        let varmap2 = VarMap::new();
        let vb2 = VarBuilder::from_varmap(&varmap2, DType::F32, &Device::Cpu);
        let w2 = vb2
            .get_with_hints((4, 3), "layer.weight", candle_nn::init::ZERO)
            .unwrap();
        let _b2 = vb2.get_with_hints(4, "layer.bias", candle_nn::init::ZERO).unwrap();
        apply_weights(&varmap2, &ckpt).unwrap();
        let restored = w2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(orig, restored);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join(format!("oreyolo-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let _w = vb.get_with_hints((4, 3), "w", candle_nn::init::ZERO).unwrap();
        save_checkpoint(&path, &TrainConfig::default(), 0, &varmap).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        let varmap2 = VarMap::new();
        let vb2 = VarBuilder::from_varmap(&varmap2, DType::F32, &Device::Cpu);
        let _w2 = vb2.get_with_hints((3, 4), "w", candle_nn::init::ZERO).unwrap();
        assert!(apply_weights(&varmap2, &ckpt).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
