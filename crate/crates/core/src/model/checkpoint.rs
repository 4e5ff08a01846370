//! JSON checkpoint: `{"model": ModelConfig, "echo": any, "params": {id: {"shape": [r, c], "values": [..]}}}`.
//! Values are written with 17 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{DaNet, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct Stored {
    model: ModelConfig,
    #[serde(default)]
    echo: Value,
    params: BTreeMap<String, StoredTensor>,
}

/// A loaded checkpoint: the model plus whatever configuration was echoed into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DaNet,
    pub echo: Value,
}

pub fn save_checkpoint(net: &DaNet, echo: &Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let model = serde_json::to_string(&net.config)
        .map_err(|e| Error::Integrity(format!("model config not serializable: {e}")))?;
    let mut out = String::new();
    let _ = write!(out, "{{\"model\":{model},\"echo\":{echo},\"params\":{{");
    for (n, p) in net.params().into_iter().enumerate() {
        if n > 0 {
            out.push(',');
        }
        let id = Value::String(p.id.clone());
        let _ = write!(out, "\n{id}:{{\"shape\":[{},{}],\"values\":[", p.value.rows(), p.value.cols());
        for (j, v) in p.value.data().iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push_str("]}");
    }
    out.push_str("\n}}\n");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from its config echo, then copies every tensor after
/// checking ids and shapes one for one.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: Stored = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut net = DaNet::new(stored.model)?;
    let mut params = stored.params;
    for p in net.params_mut() {
        let t = params
            .remove(&p.id)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks tensor {}", p.id)))?;
        let shape = (t.shape[0], t.shape[1]);
        if shape != p.shape() || t.values.len() != p.value.len() {
            return Err(Error::Integrity(format!(
                "tensor {} stored as {shape:?} with {} values, model expects {:?}",
                p.id,
                t.values.len(),
                p.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(&t.values);
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Integrity(format!("checkpoint has unknown tensor {extra}")));
    }
    Ok(Checkpoint {
        net,
        echo: stored.echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Activation;

    fn net() -> DaNet {
        DaNet::new(ModelConfig {
            input_dim: 3,
            encoder_widths: vec![4],
            disentangler_width: 3,
            adaptor_width: 3,
            num_classes: 2,
            num_sources: 2,
            activation: Activation::Relu,
            dropout: 0.5,
            init_seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let n = net();
        let echo = serde_json::json!({"tau": 0.5});
        save_checkpoint(&n, &echo, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.net, n);
        assert_eq!(back.echo, echo);
        // saving again yields the same bytes
        let again = dir.path().join("again.json");
        save_checkpoint(&back.net, &echo, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn shape_drift_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&net(), &Value::Null, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let broken = text.replacen("\"shape\":[3,4]", "\"shape\":[4,3]", 1);
        assert_ne!(text, broken);
        fs::write(&path, broken).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }
}
