//! File plumbing shared by the command line: staged outputs, run
//! manifests and saved ensembles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::qnn::{Ensemble, NetConfig, QuantileNet};
use crate::taus::TauGrid;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = BufReader::new(open(path)?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Opens an input file, reporting a missing file as a data error.
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

pub fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(open(path)?))
}

/// Outputs of one run. Files are written under a `.partial` name and only
/// renamed into place by [`OutputSet::commit`]; uncommitted files are
/// removed on drop, so a failed stage leaves no half-written artifacts.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// A buffered writer for `name` inside the output directory.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let fin = self.dir.join(name);
        let tmp = self.dir.join(format!("{name}.partial"));
        let f = File::create(&tmp)?;
        self.staged.push((tmp, fin));
        Ok(BufWriter::new(f))
    }

    pub fn names(&self) -> Vec<String> {
        self.staged
            .iter()
            .filter_map(|(_, f)| f.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        for (tmp, fin) in &self.staged {
            std::fs::rename(tmp, fin)?;
        }
        self.committed = true;
        Ok(self.staged.iter().map(|s| s.1.clone()).collect())
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.staged {
                let _ = std::fs::remove_file(tmp);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of a run written next to its outputs. Contains no timestamps,
/// so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    /// SHA-256 of the effective configuration as JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, threads: usize, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        let text = serde_json::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            threads,
            config_hash: sha256_hex(text.as_bytes()),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::State(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }
}

/// Description of a saved ensemble, stored as `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub net: NetConfig,
    pub taus: Vec<f64>,
    pub x_width: usize,
    pub z_width: usize,
    pub members: usize,
    pub stock_features: Vec<String>,
    pub market_features: Vec<String>,
}

pub fn member_file(m: usize) -> String {
    format!("member_{m:02}.ckpt")
}

/// Writes `model.json` and one checkpoint per member into `out`.
pub fn save_ensemble(
    ens: &Ensemble,
    stock_features: &[String],
    market_features: &[String],
    out: &mut OutputSet,
) -> Result<()> {
    let first = ens
        .members
        .first()
        .ok_or_else(|| Error::State("empty ensemble".into()))?;
    let info = ModelInfo {
        net: first.config.clone(),
        taus: first.taus.levels().to_vec(),
        x_width: first.x_width(),
        z_width: first.z_width(),
        members: ens.members.len(),
        stock_features: stock_features.to_vec(),
        market_features: market_features.to_vec(),
    };
    let mut w = out.create("model.json")?;
    serde_json::to_writer_pretty(&mut w, &info).map_err(|e| Error::State(e.to_string()))?;
    w.flush()?;
    for (m, net) in ens.members.iter().enumerate() {
        let mut w = out.create(&member_file(m))?;
        net.store.write_checkpoint(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<(ModelInfo, Ensemble)> {
    let info: ModelInfo = serde_json::from_reader(reader(&dir.join("model.json"))?)
        .map_err(|e| Error::Data(format!("model.json: {e}")))?;
    let taus = TauGrid::new(info.taus.clone())?;
    let mut members = Vec::with_capacity(info.members);
    for m in 0..info.members {
        let mut net = QuantileNet::new(&info.net, &taus, info.x_width, info.z_width, 0)?;
        let store = ParamStore::read_checkpoint(reader(&dir.join(member_file(m)))?)?;
        net.store.load_values_from(&store)?;
        members.push(net);
    }
    Ok((
        info,
        Ensemble {
            members,
            reports: Vec::new(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut o = OutputSet::new(dir.path()).unwrap();
            writeln!(o.create("a.csv").unwrap(), "x").unwrap();
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut o = OutputSet::new(dir.path()).unwrap();
        writeln!(o.create("a.csv").unwrap(), "x").unwrap();
        o.commit().unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x\n");
    }

    #[test]
    fn manifest_hash_tracks_config() {
        let a = Manifest::new("x", 1, 1, &serde_json::json!({"a": 1})).unwrap();
        let b = Manifest::new("x", 1, 1, &serde_json::json!({"a": 2})).unwrap();
        assert_ne!(a.config_hash, b.config_hash);
        assert_eq!(a, Manifest::new("x", 1, 1, &serde_json::json!({"a": 1})).unwrap());
    }
}
