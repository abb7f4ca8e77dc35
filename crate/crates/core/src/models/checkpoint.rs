//! Checkpoint files: a text manifest terminated by an `end` line, followed by
//! every parameter as little-endian `f32` values in manifest order.

use std::path::Path;

use crate::diffcore::{Real, Tensor};

use super::{Model, ModelConfig, ModelError, ModelKind};

const MAGIC: &str = "bcfnet-checkpoint v1";

struct Manifest {
    kind: ModelKind,
    config: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    body: usize,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest, ModelError> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str, ModelError> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest is truncated"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not valid text"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut fields = std::collections::HashMap::new();
    let mut params = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let mut parts = line.split(' ');
        let key = parts.next().unwrap_or_default();
        if key == "param" {
            let name = parts.next().ok_or_else(|| bad("param line without a name"))?;
            let shape = parts
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension {d:?} for {name}"))))
                .collect::<Result<Vec<_>, _>>()?;
            params.push((name.to_string(), shape));
        } else {
            let value = parts.next().ok_or_else(|| bad(format!("{key} has no value")))?;
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| fields.get(key).ok_or_else(|| bad(format!("manifest lacks {key}")));
    let int = |key: &str| -> Result<usize, ModelError> {
        get(key)?.parse().map_err(|_| bad(format!("{key} is not an integer")))
    };
    let flag = |key: &str| -> Result<bool, ModelError> {
        match get(key)?.as_str() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(bad(format!("{key} flag {other:?}"))),
        }
    };
    let config = ModelConfig {
        num_users: int("num_users")?,
        num_items: int("num_items")?,
        factors: int("factors")?,
        encoder_dim: int("encoder_dim")?,
        embedding_dim: int("embedding_dim")?,
        balance_dim: int("balance_dim")?,
        attention: flag("attention")?,
        balance: flag("balance")?,
        init_std: get("init_std")?.parse().map_err(|_| bad("init_std is not a number"))?,
    };
    Ok(Manifest {
        kind: get("kind")?.parse()?,
        config,
        params,
        body: pos,
    })
}

impl<T: Real> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut head = format!(
            "{MAGIC}\nkind {}\nnum_users {}\nnum_items {}\nfactors {}\nencoder_dim {}\nembedding_dim {}\n\
             balance_dim {}\nattention {}\nbalance {}\ninit_std {}\n",
            self.kind,
            c.num_users,
            c.num_items,
            c.factors,
            c.encoder_dim,
            c.embedding_dim,
            c.balance_dim,
            u8::from(c.attention),
            u8::from(c.balance),
            c.init_std,
        );
        for p in self.params.iter() {
            head.push_str("param ");
            head.push_str(&p.name);
            for d in p.value.shape() {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(self.params.num_values() * 4);
        for p in self.params.iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rebuilds a model from checkpoint bytes. Nothing is returned unless the
    /// manifest matches the declared configuration and the body length is exact.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let manifest = parse_manifest(bytes)?;
        let mut model = Model::new(manifest.kind, manifest.config.clone(), 0)?;
        model.fill_from(&manifest, bytes)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint_bytes(&read(path)?)
    }

    /// Overwrites this model's parameters from a checkpoint of the same shape.
    pub fn load_params(&mut self, path: &Path) -> Result<(), ModelError> {
        let bytes = read(path)?;
        let manifest = parse_manifest(&bytes)?;
        if manifest.kind != self.kind {
            return Err(bad(format!(
                "checkpoint holds a {} model, target is {}",
                manifest.kind, self.kind
            )));
        }
        let mut staged = self.clone();
        staged.fill_from(&manifest, &bytes)?;
        *self = staged;
        Ok(())
    }

    fn fill_from(&mut self, manifest: &Manifest, bytes: &[u8]) -> Result<(), ModelError> {
        if manifest.params.len() != self.params.len() {
            return Err(bad(format!(
                "checkpoint lists {} parameters, model has {}",
                manifest.params.len(),
                self.params.len()
            )));
        }
        for ((name, shape), p) in manifest.params.iter().zip(self.params.iter()) {
            if *name != p.name {
                return Err(bad(format!("parameter {name} found where {} was expected", p.name)));
            }
            if shape.as_slice() != p.value.shape() {
                return Err(bad(format!(
                    "parameter {name}: checkpoint shape {shape:?}, model shape {:?}",
                    p.value.shape()
                )));
            }
        }
        let body = &bytes[manifest.body..];
        let expected = self.params.num_values() * 4;
        if body.len() != expected {
            return Err(bad(format!("body has {} bytes, manifest implies {expected}", body.len())));
        }
        let mut chunks = body.chunks_exact(4);
        for p in self.params.iter_mut() {
            let data: Vec<T> = chunks
                .by_ref()
                .take(p.value.len())
                .map(|c| T::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
                .collect();
            p.value = Tensor::new(p.value.shape().to_vec(), data)
                .map_err(|e| bad(format!("parameter {}: {e}", p.name)))?;
        }
        self.params.reset_opt_state();
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, ModelError> {
    std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}
