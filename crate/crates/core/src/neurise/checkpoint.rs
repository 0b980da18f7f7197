//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every network's parameters group by group as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{Mlp, MlpShape, ParamGroup};
use super::model::{ConditionalModel, Topology};
use super::train::TrainConfig;
use crate::dist::SampleSet;
use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;

const MAGIC: &[u8; 8] = b"CONDIFF\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schedule: NoiseSchedule,
    pub topology: Topology,
    pub shape: MlpShape,
    pub networks: usize,
    pub groups: Vec<ParamGroup>,
    pub config: Option<TrainConfig>,
    pub training_seed: Option<u64>,
    pub data_fingerprint: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the alphabet, width and rows of a sample set.
pub fn data_fingerprint(samples: &SampleSet) -> String {
    let mut h = Sha256::new();
    h.update((samples.q() as u64).to_le_bytes());
    h.update((samples.p() as u64).to_le_bytes());
    h.update(samples.as_flat());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint<W: Write>(
    model: &ConditionalModel,
    config: Option<&TrainConfig>,
    data_fingerprint: Option<&str>,
    mut w: W,
) -> Result<()> {
    let shape = model.nets()[0].shape();
    let header = CheckpointHeader {
        schedule: *model.schedule(),
        topology: model.topology(),
        shape,
        networks: model.nets().len(),
        groups: shape.groups(),
        config: config.cloned(),
        training_seed: config.map(|c| c.seed),
        data_fingerprint: data_fingerprint.map(str::to_string),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for net in model.nets() {
        for v in net.params() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ConditionalModel, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Format("checkpoint header too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.groups != header.shape.groups() {
        return Err(Error::Format("parameter layout does not match network shape".into()));
    }
    let count = header.shape.num_params();
    let mut nets = Vec::with_capacity(header.networks);
    let mut buf = [0u8; 8];
    for _ in 0..header.networks {
        let mut theta = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            theta.push(f64::from_le_bytes(buf));
        }
        nets.push(Mlp::from_params(header.shape, theta)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    let model = ConditionalModel::new(header.schedule, header.topology, nets)?;
    Ok((model, header))
}

pub fn save_checkpoint(
    model: &ConditionalModel,
    config: Option<&TrainConfig>,
    data_fingerprint: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, config, data_fingerprint, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ConditionalModel, CheckpointHeader)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::StateSpace;

    #[test]
    fn round_trip_preserves_everything() {
        let sch = NoiseSchedule::with_sweeps(3, 3, 2, 0.25).unwrap();
        for topology in [Topology::Global, Topology::PerStep] {
            let model = ConditionalModel::init(sch, topology, 6, 2, 11).unwrap();
            let cfg = TrainConfig { seed: 42, topology, ..TrainConfig::default() };
            let mut buf = Vec::new();
            write_checkpoint(&model, Some(&cfg), Some("abc"), &mut buf).unwrap();
            let (back, header) = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, model);
            assert_eq!(header.config, Some(cfg));
            assert_eq!(header.training_seed, Some(42));
            assert_eq!(header.data_fingerprint.as_deref(), Some("abc"));
            // parameters start right after the header, little-endian
            let start = buf.len() - 8 * model.num_params();
            let first = f64::from_le_bytes(buf[start..start + 8].try_into().unwrap());
            assert_eq!(first, model.nets()[0].params()[0]);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let sch = NoiseSchedule::new(2, 2, 2, 0.0).unwrap();
        let model = ConditionalModel::init(sch, Topology::Global, 3, 1, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, None, None, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut version = buf;
        version[8] = 9;
        assert!(read_checkpoint(&version[..]).is_err());
    }

    #[test]
    fn fingerprint_depends_on_content() {
        let space = StateSpace::new(2, 2).unwrap();
        let a = SampleSet::from_rows(space, [[0u8, 1], [1, 1]], "x").unwrap();
        let b = SampleSet::from_rows(space, [[0u8, 1], [1, 0]], "x").unwrap();
        let c = SampleSet::from_rows(space, [[0u8, 1], [1, 1]], "other provenance").unwrap();
        assert_ne!(data_fingerprint(&a), data_fingerprint(&b));
        assert_eq!(data_fingerprint(&a), data_fingerprint(&c));
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
