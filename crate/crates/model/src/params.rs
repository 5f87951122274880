use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::config::ModelConfig;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"SMKCKPT1";

/// Whether a parameter set is being trained or serves as a frozen baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Role {
    #[default]
    Policy,
    Reference,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    pub role: Role,
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub(crate) fn empty(config: ModelConfig) -> Self {
        Self {
            config,
            role: Role::Policy,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Mat) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Mat {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[self.id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        let id = self.id(name);
        &mut self.tensors[id]
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Copy with the reference role, sharing names and shapes.
    pub fn as_reference(&self) -> Self {
        Self {
            role: Role::Reference,
            ..self.clone()
        }
    }

    pub fn zero_grads(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect()
    }

    /// Binary checkpoint: magic, config JSON, then every tensor by name with
    /// little-endian `f64` data. The role is not stored.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<(), CheckpointError> {
        out.write_all(MAGIC)?;
        let config = serde_json::to_vec(&self.config).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        out.write_all(&(config.len() as u64).to_le_bytes())?;
        out.write_all(&config)?;
        out.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.write_all(&(name.len() as u64).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.rows as u64).to_le_bytes())?;
            out.write_all(&(t.cols as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    /// Reads a checkpoint and validates every tensor against the shapes the
    /// stored config implies.
    pub fn read_checkpoint(mut input: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let config_len = read_u64(&mut input)? as usize;
        if config_len > 1 << 20 {
            return Err(CheckpointError::Invalid("config block too large".into()));
        }
        let mut config = vec![0u8; config_len];
        input.read_exact(&mut config)?;
        let config: ModelConfig =
            serde_json::from_slice(&config).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        config.validate().map_err(CheckpointError::Invalid)?;
        let mut store = crate::model::init_params(&config);
        let count = read_u64(&mut input)? as usize;
        if count != store.len() {
            return Err(CheckpointError::Invalid(format!(
                "expected {} tensors, found {count}",
                store.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = read_u64(&mut input)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Invalid("tensor name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
            let id = store
                .try_id(&name)
                .ok_or_else(|| CheckpointError::Invalid(format!("unexpected tensor {name}")))?;
            let found = (read_u64(&mut input)? as usize, read_u64(&mut input)? as usize);
            let expected = store.tensors[id].shape();
            if found != expected || seen[id] {
                return Err(CheckpointError::Shape { name, expected, found });
            }
            seen[id] = true;
            let mut bytes = vec![0u8; found.0 * found.1 * 8];
            input.read_exact(&mut bytes)?;
            for (x, chunk) in store.tensors[id].data.iter_mut().zip(bytes.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(store)
    }
}

fn read_u64(input: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
