//! Experiment configuration files, the `HBFM` model format and atomic writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::channel::ChannelModelParams;
use crate::error::{Error, Result};
use crate::net::{HbfNet, RunningStats};
use crate::trainer::TrainConfig;

/// Write `bytes` to a temporary file beside `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// JSON experiment description. Relative paths are resolved against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// HBFD dataset. When absent, `samples` channels are generated from `channel`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub channel: ChannelModelParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model_out: Option<PathBuf>,
    #[serde(default)]
    pub metrics_out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.model_out, &mut cfg.metrics_out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.channel
            .validate()
            .map_err(|e| Error::Config(format!("channel: {e}")))?;
        if self.dataset.is_none() && !matches!(self.samples, Some(n) if n > 0) {
            return Err(Error::Config(
                "dataset: give a dataset path or a positive sample count".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

const MODEL_MAGIC: &[u8; 4] = b"HBFM";
const MODEL_VERSION: u32 = 1;

/// Trained network plus the configuration it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub config: TrainConfig,
    pub net: HbfNet,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("model file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Encode `HBFM` v1: magic, version, SHA-256 of the config JSON, the config JSON
/// (length-prefixed), then every layer as `(ndim, dims…, f32 values)`. Parameter
/// tensors come first, then the batch-norm running means and variances.
pub fn encode_model(model: &ModelFile) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    let layers = model_layers(&model.net);
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for (shape, data) in layers {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numeric("model weight overflows f32".into()));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

fn model_layers(net: &HbfNet) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut layers: Vec<(Vec<usize>, Vec<f64>)> = net
        .params
        .iter()
        .map(|p| (p.shape().to_vec(), p.data().to_vec()))
        .collect();
    for s in &net.running {
        layers.push((vec![s.mean.len()], s.mean.clone()));
        layers.push((vec![s.var.len()], s.var.clone()));
    }
    layers
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not an HBFM model file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let digest = c.take(32)?.to_vec();
    let json_len = c.u32()? as usize;
    let json = c.take(json_len)?;
    if Sha256::digest(json).as_slice() != digest.as_slice() {
        return Err(Error::Format("model config digest mismatch".into()));
    }
    let config: TrainConfig = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    config.validate()?;
    let template = HbfNet::new(config.net_config())?;
    let expected = model_layers(&template);
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "model has {count} layers, its config implies {}",
            expected.len()
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, (shape, _)) in expected.iter().enumerate() {
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Format(format!("layer {i} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("layer size overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("layer {i} has non-finite weights")));
        }
        layers.push((dims, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let n_params = template.params.len();
    let mut it = layers.into_iter();
    let params = it
        .by_ref()
        .take(n_params)
        .map(|(s, d)| Tensor::new(&s, d))
        .collect::<Result<Vec<_>>>()?;
    let mut running = Vec::with_capacity(template.running.len());
    while let (Some((_, mean)), Some((_, var))) = (it.next(), it.next()) {
        running.push(RunningStats { mean, var });
    }
    Ok(ModelFile {
        net: HbfNet {
            config: template.config,
            params,
            running,
        },
        config,
    })
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// `sample_index,sumrate_bps_hz` rows followed by `mean` and `std` summary rows.
pub fn results_csv(indices: &[usize], rates: &[f64]) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("sample_index,sumrate_bps_hz\n");
    for (i, r) in indices.iter().zip(rates) {
        let _ = writeln!(s, "{i},{r}");
    }
    let _ = writeln!(s, "mean,{}", crate::trainer::mean(rates));
    let _ = writeln!(s, "std,{}", crate::trainer::std_dev(rates));
    s
}

/// Parse a results CSV back into `(indices, rates, mean, std)`.
pub fn parse_results_csv(text: &str) -> Result<(Vec<usize>, Vec<f64>, f64, f64)> {
    let mut lines = text.lines();
    if lines.next() != Some("sample_index,sumrate_bps_hz") {
        return Err(Error::Format("missing results header".into()));
    }
    let (mut idx, mut rates, mut mean, mut std) = (Vec::new(), Vec::new(), f64::NAN, f64::NAN);
    for line in lines {
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("bad results row {line:?}")))?;
        let v: f64 = v.parse().map_err(|_| Error::Format(format!("bad value in {line:?}")))?;
        match k {
            "mean" => mean = v,
            "std" => std = v,
            k => {
                idx.push(k.parse().map_err(|_| Error::Format(format!("bad index in {line:?}")))?);
                rates.push(v);
            }
        }
    }
    Ok((idx, rates, mean, std))
}

/// Sidecar path holding the effective configuration of an output file.
pub fn config_sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    output.with_file_name(name)
}
