//! Checkpoint file: a UTF-8 text manifest followed by one little-endian
//! binary32 blob.
//!
//! ```text
//! myoseg-checkpoint 1
//! arch.base_channels = 16
//! ...
//! meta.<key> = <value>
//! tensor <name> f32 <d0>x<d1>x... <byte offset> <byte length>
//! ...
//! end
//! <blob>
//! ```
//!
//! Tensor byte offsets are relative to the first byte after the `end` line.
//! Batch-norm running statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var` tensors, present only once the layer has been updated
//! in training mode.

use std::collections::BTreeMap;
use std::path::Path;

use crate::batchnorm::RunningStats;
use crate::error::{Result, TensorError};
use crate::model::{ArchConfig, Model};
use crate::Tensor;

const MAGIC: &str = "myoseg-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    /// Free-form provenance (config digest, strategy, iteration count, ...).
    pub metadata: BTreeMap<String, String>,
    /// Parameters then running statistics, in model order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, metadata: BTreeMap<String, String>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        for (name, stats) in model.running_stats() {
            if stats.tracked {
                let c = stats.mean.len();
                tensors.push((format!("{}.running_mean", name), Tensor::from_vec(&[c], stats.mean.clone()).expect("length")));
                tensors.push((format!("{}.running_var", name), Tensor::from_vec(&[c], stats.var.clone()).expect("length")));
            }
        }
        Self { arch: model.arch.clone(), metadata, tensors }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::zeroed(&self.arch)?;
        let lookup: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut used = 0;
        for (name, p) in model.params_mut() {
            let Some(t) = lookup.get(name.as_str()) else {
                return bad(format!("missing tensor `{}`", name));
            };
            if t.shape() != p.value.shape() {
                return bad(format!("tensor `{}` has shape {:?}, expected {:?}", name, t.shape(), p.value.shape()));
            }
            p.value = (*t).clone();
            used += 1;
        }
        let names: Vec<String> = model.running_stats().into_iter().map(|(n, _)| n).collect();
        for (name, stats) in names.iter().zip(model.running_stats_mut()) {
            let mean = lookup.get(format!("{}.running_mean", name).as_str());
            let var = lookup.get(format!("{}.running_var", name).as_str());
            match (mean, var) {
                (Some(m), Some(v)) => {
                    if m.len() != stats.mean.len() || v.len() != stats.var.len() {
                        return bad(format!("running statistics of `{}` have the wrong length", name));
                    }
                    *stats = RunningStats { mean: m.data().to_vec(), var: v.data().to_vec(), tracked: true };
                    used += 2;
                }
                (None, None) => {}
                _ => return bad(format!("incomplete running statistics for `{}`", name)),
            }
        }
        if used != self.tensors.len() {
            return bad("checkpoint holds tensors the architecture does not use");
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in [
            ("base_channels", a.base_channels.to_string()),
            ("num_res_blocks", a.num_res_blocks.to_string()),
            ("num_classes", a.num_classes.to_string()),
            ("conv_kernel", a.conv_kernel.to_string()),
            ("down_stride", a.down_stride.to_string()),
            ("input_channels", a.input_channels.to_string()),
            ("bn_eps", a.bn_eps.to_string()),
            ("bn_momentum", a.bn_momentum.to_string()),
        ] {
            head.push_str(&format!("arch.{} = {}\n", k, v));
        }
        for (k, v) in &self.metadata {
            head.push_str(&format!("meta.{} = {}\n", k, v));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let len = t.len() * 4;
            head.push_str(&format!("tensor {} f32 {} {} {}\n", name, dims.join("x"), offset, len));
            offset += len;
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = Vec::new();
        let mut pos = 0;
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return bad("manifest is not terminated by `end`");
            };
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| TensorError::Checkpoint("manifest is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let blob = &bytes[pos..];
        let mut it = lines.iter();
        if it.next().map(String::as_str) != Some(MAGIC) {
            return bad("not a checkpoint file (bad magic line)");
        }
        let mut arch_kv = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut tensors = Vec::new();
        let mut expected_offset = 0usize;
        for line in it {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, dtype, dims, off, len] = parts[..] else {
                    return bad(format!("malformed tensor line `{}`", line));
                };
                if dtype != "f32" {
                    return bad(format!("unsupported element type `{}`", dtype));
                }
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| TensorError::Checkpoint(format!("bad shape `{}`", dims)))?;
                let parse = |s: &str| s.parse::<usize>().map_err(|_| TensorError::Checkpoint(format!("bad number `{}`", s)));
                let (off, len) = (parse(off)?, parse(len)?);
                let count: usize = shape.iter().product();
                if off != expected_offset || len != count * 4 || off + len > blob.len() {
                    return bad(format!("tensor `{}` has an inconsistent byte range", name));
                }
                expected_offset += len;
                let data = blob[off..off + len]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                tensors.push((name.to_string(), Tensor::from_vec(&shape, data)?));
            } else if let Some((k, v)) = line.split_once(" = ") {
                if let Some(k) = k.strip_prefix("arch.") {
                    if arch_kv.insert(k.to_string(), v.to_string()).is_some() {
                        return bad(format!("duplicate key `arch.{}`", k));
                    }
                } else if let Some(k) = k.strip_prefix("meta.") {
                    metadata.insert(k.to_string(), v.to_string());
                } else {
                    return bad(format!("unknown manifest key `{}`", k));
                }
            } else {
                return bad(format!("malformed manifest line `{}`", line));
            }
        }
        if expected_offset != blob.len() {
            return bad("blob length does not match the manifest");
        }
        let get = |k: &str| arch_kv.get(k).ok_or_else(|| TensorError::Checkpoint(format!("missing key `arch.{}`", k)));
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| TensorError::Checkpoint(format!("bad arch.{}", k))) };
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| TensorError::Checkpoint(format!("bad arch.{}", k))) };
        let arch = ArchConfig {
            base_channels: int("base_channels")?,
            num_res_blocks: int("num_res_blocks")?,
            num_classes: int("num_classes")?,
            conv_kernel: int("conv_kernel")?,
            down_stride: int("down_stride")?,
            input_channels: int("input_channels")?,
            bn_eps: real("bn_eps")?,
            bn_momentum: real("bn_momentum")?,
        };
        arch.validate()?;
        Ok(Self { arch, metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig { base_channels: 2, num_res_blocks: 1, num_classes: 3, ..ArchConfig::default() }
    }

    #[test]
    fn untrained_model_round_trips_without_running_stats() {
        let model = Model::<f32>::build(&small_arch(), 3).unwrap();
        let ck = Checkpoint::from_model(&model, BTreeMap::new());
        assert!(ck.tensors.iter().all(|(n, _)| !n.contains("running")));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn trained_model_round_trips_with_running_stats() {
        let mut model = Model::<f32>::build(&small_arch(), 5).unwrap();
        let x = Tensor::from_vec(&[1, 1, 4, 4, 4], (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        model.forward_train(&x).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("strategy".to_string(), "none".to_string());
        let ck = Checkpoint::from_model(&model, meta);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.metadata["strategy"], "none");
        let restored = back.to_model().unwrap();
        assert_eq!(restored, model);
        assert_eq!(restored.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn rejects_truncated_blob_and_bad_magic() {
        let model = Model::<f32>::build(&small_arch(), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, BTreeMap::new()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    }
}
