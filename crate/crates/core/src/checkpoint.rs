//! `HBFPCK1` checkpoints: a versioned named-tensor table plus the run config.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{read_tensor, read_u32, read_u64, write_tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"HBFPCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model) -> Self {
        Self {
            config: config.clone(),
            params: model.params.clone(),
        }
    }

    /// Rebuilds the model, checking every tensor against the config's layout.
    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.config.model_config(), self.params)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.config.to_text().as_bytes())?;
        let entries = self.params.entries();
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for e in entries {
            write_bytes(&mut w, e.name.as_bytes())?;
            w.write_all(&[e.trainable as u8])?;
            write_tensor(&mut w, &e.value)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an HBFPCK1 checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config = RunConfig::parse(&read_string(&mut r)?)?;
        let n = read_u64(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let mut flag = [0u8];
            r.read_exact(&mut flag)?;
            let value = read_tensor(&mut r)?;
            match flag[0] {
                1 => params.add_param(&name, value)?,
                0 => params.add_buffer(&name, value)?,
                f => return Err(Error::Format(format!("bad trainable flag {f} on {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
