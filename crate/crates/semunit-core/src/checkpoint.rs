//! Checkpoint files: a text header (version, step, config, tensor
//! directory) followed by raw little-endian 32-bit float arrays in the
//! declared order. Optimizer state travels under `opt.`-prefixed names and
//! is excluded from averaging.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Su4mtModel};
use crate::nn::Parameters;
use crate::tensor::{Scalar, Tensor};

const FORMAT: &str = "semunit-ckpt 1";

/// Prefix for optimizer-state arrays stored alongside model parameters.
pub const OPT_PREFIX: &str = "opt.";

/// An on-disk model snapshot. `arrays` holds model parameters and,
/// optionally, optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of the parameters the model's input mode actually uses; a
    /// baseline (token-only) run therefore produces a checkpoint without
    /// fusion arrays, and loading it leaves a finetuning model's fusion
    /// layer freshly initialized.
    pub fn from_model<F: Scalar>(model: &Su4mtModel<F>, step: u64) -> Self {
        let arrays = model
            .params
            .iter()
            .filter(|(name, _)| model.param_active(name))
            .map(|(name, t)| (name.to_owned(), t.cast::<f32>()))
            .collect();
        Checkpoint {
            config: model.config.clone(),
            step,
            arrays,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Model parameters only (skips optimizer state), in stored order.
    pub fn model_arrays(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.arrays
            .iter()
            .filter(|(n, _)| !n.starts_with(OPT_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn opt_arrays(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.arrays
            .iter()
            .filter(|(n, _)| n.starts_with(OPT_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let write = |out: &mut BufWriter<std::fs::File>, s: String| {
            out.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
        };
        write(&mut out, format!("#version: {FORMAT}\n"))?;
        write(&mut out, format!("#step: {}\n", self.step))?;
        write(&mut out, format!("#config: {}\n", self.config.to_kv()))?;
        write(&mut out, format!("#tensors: {}\n", self.arrays.len()))?;
        for (name, t) in &self.arrays {
            let dims = t
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            write(&mut out, format!("{name} {dims}\n"))?;
        }
        write(&mut out, "#data\n".to_string())?;
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_owned(),
            msg,
        };
        let mut line = String::new();
        let read_line = |reader: &mut BufReader<std::fs::File>,
                             line: &mut String|
         -> Result<String> {
            line.clear();
            reader
                .read_line(line)
                .map_err(|e| Error::io(path, e))?;
            Ok(line.trim_end_matches('\n').to_owned())
        };

        let version = read_line(&mut reader, &mut line)?;
        if version != format!("#version: {FORMAT}") {
            return Err(bad(format!("unsupported version line {version:?}")));
        }
        let step = read_line(&mut reader, &mut line)?
            .strip_prefix("#step: ")
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| bad("bad #step line".into()))?;
        let config_line = read_line(&mut reader, &mut line)?;
        let config = ModelConfig::from_kv(
            config_line
                .strip_prefix("#config: ")
                .ok_or_else(|| bad("bad #config line".into()))?,
        )?;
        let count = read_line(&mut reader, &mut line)?
            .strip_prefix("#tensors: ")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad("bad #tensors line".into()))?;
        let mut directory = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = read_line(&mut reader, &mut line)?;
            let mut fields = entry.split_whitespace();
            let name = fields
                .next()
                .ok_or_else(|| bad("empty tensor directory line".into()))?
                .to_owned();
            let shape: Vec<usize> = fields
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|_| bad(format!("bad dim {f:?} for {name}")))
                })
                .collect::<Result<_>>()?;
            directory.push((name, shape));
        }
        if read_line(&mut reader, &mut line)? != "#data" {
            return Err(bad("missing #data separator".into()));
        }
        let mut arrays = Vec::with_capacity(count);
        for (name, shape) in directory {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            reader
                .read_exact(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, Tensor::from_vec(shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            config,
            step,
            arrays,
        })
    }

    /// Loads parameters into a model. Every model array in the checkpoint
    /// must exist in the model with the same shape; model parameters absent
    /// from the checkpoint (the fusion layer, when initializing from a
    /// baseline run) keep their fresh values.
    pub fn load_into<F: Scalar>(&self, model: &mut Su4mtModel<F>) -> Result<()> {
        if !self.config.compatible_with(&model.config) {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint config ({}) vs model config ({})",
                self.config.to_kv(),
                model.config.to_kv()
            )));
        }
        for (name, tensor) in self.model_arrays() {
            match model.params.get(name) {
                Some(existing) if existing.shape() == tensor.shape() => {
                    model.params.set(name, tensor.cast::<F>());
                }
                Some(existing) => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{name}: checkpoint shape {:?} vs model shape {:?}",
                        tensor.shape(),
                        existing.shape()
                    )));
                }
                None => {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {name} not present in the model"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full parameter set as a [`Parameters`] store (model arrays only).
    pub fn to_parameters<F: Scalar>(&self) -> Parameters<F> {
        let mut params = Parameters::new();
        for (name, t) in self.model_arrays() {
            params.insert(name.to_owned(), t.cast::<F>());
        }
        params
    }
}

/// Arithmetic mean of the model parameters across checkpoints; optimizer
/// state is dropped. Accumulation runs in f64, so averaging k identical
/// checkpoints reproduces them bit for bit.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::Config("no checkpoints to average".into()));
    }
    let first = Checkpoint::load(paths[0].as_ref())?;
    let names: Vec<String> = first.model_arrays().map(|(n, _)| n.to_owned()).collect();
    let mut sums: Vec<Tensor<f64>> = first
        .model_arrays()
        .map(|(_, t)| t.cast::<f64>())
        .collect();
    let mut step = first.step;

    for path in &paths[1..] {
        let ckpt = Checkpoint::load(path.as_ref())?;
        if ckpt.config != first.config {
            return Err(Error::CheckpointMismatch(format!(
                "{} has a different config",
                path.as_ref().display()
            )));
        }
        let model_arrays: Vec<(&str, &Tensor<f32>)> = ckpt.model_arrays().collect();
        if model_arrays.len() != names.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} has {} arrays, expected {}",
                path.as_ref().display(),
                model_arrays.len(),
                names.len()
            )));
        }
        for ((name, tensor), (expect_name, sum)) in
            model_arrays.iter().zip(names.iter().zip(&mut sums))
        {
            if name != expect_name {
                return Err(Error::CheckpointMismatch(format!(
                    "array order mismatch: {name} vs {expect_name}"
                )));
            }
            if tensor.shape() != sum.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    tensor.shape(),
                    sum.shape()
                )));
            }
            sum.add_assign(&tensor.cast::<f64>());
        }
        step = step.max(ckpt.step);
    }

    let k = 1.0 / paths.len() as f64;
    let arrays = names
        .into_iter()
        .zip(sums)
        .map(|(name, sum)| (name, sum.scale(k).cast::<f32>()))
        .collect();
    Ok(Checkpoint {
        config: first.config,
        step,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputMode, ModelConfig};

    fn tiny_model(seed: u64) -> Su4mtModel<f32> {
        let mut cfg = ModelConfig::desk(10, 10);
        cfg.d_model = 8;
        cfg.d_ffn = 16;
        cfg.heads = 2;
        cfg.asf_heads = 2;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        Su4mtModel::init(cfg, seed).unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let model = tiny_model(3);
        let ckpt = Checkpoint::from_model(&model, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.arrays.len(), ckpt.arrays.len());
        for ((na, ta), (nb, tb)) in loaded.arrays.iter().zip(&ckpt.arrays) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn average_of_identical_is_identity() {
        let model = tiny_model(7);
        let ckpt = Checkpoint::from_model(&model, 1);
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = (0..3)
            .map(|i| {
                let p = dir.path().join(format!("c{i}.ckpt"));
                ckpt.save(&p).unwrap();
                p
            })
            .collect();
        let avg = average_checkpoints(&paths).unwrap();
        for ((na, ta), (nb, tb)) in avg.arrays.iter().zip(&ckpt.arrays) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} not bit-identical");
        }
    }

    #[test]
    fn average_of_zero_and_two_is_one() {
        let mut a = tiny_model(1);
        let mut b = tiny_model(1);
        let shape = a.params.get("asf.down.b").unwrap().shape().to_vec();
        a.params
            .set("asf.down.b", Tensor::full(shape.clone(), 0.0f32));
        b.params.set("asf.down.b", Tensor::full(shape, 2.0f32));
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        Checkpoint::from_model(&a, 1).save(&pa).unwrap();
        Checkpoint::from_model(&b, 2).save(&pb).unwrap();
        let avg = average_checkpoints(&[&pa, &pb]).unwrap();
        assert!(avg.get("asf.down.b").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(avg.step, 2);
    }

    #[test]
    fn averaging_is_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = (0..4)
            .map(|i| {
                let p = dir.path().join(format!("s{i}.ckpt"));
                Checkpoint::from_model(&tiny_model(i), i as u64).save(&p).unwrap();
                p
            })
            .collect();
        let forward = average_checkpoints(&paths).unwrap();
        let reversed: Vec<_> = paths.iter().rev().collect();
        let backward = average_checkpoints(&reversed).unwrap();
        for ((na, ta), (_, tb)) in forward.arrays.iter().zip(&backward.arrays) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert!((x - y).abs() <= f32::EPSILON * 4.0, "{na} differs");
            }
        }
    }

    #[test]
    fn averaging_drops_optimizer_state() {
        let model = tiny_model(9);
        let mut ckpt = Checkpoint::from_model(&model, 5);
        ckpt.push("opt.m.enc.embed", Tensor::zeros(vec![10, 8]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.ckpt");
        ckpt.save(&p).unwrap();
        let avg = average_checkpoints(&[&p]).unwrap();
        assert!(avg.get("opt.m.enc.embed").is_none());
        assert_eq!(avg.arrays.len(), ckpt.arrays.len() - 1);
    }

    #[test]
    fn load_into_requires_compatible_config() {
        let model = tiny_model(2);
        let ckpt = Checkpoint::from_model(&model, 1);
        let mut other_cfg = model.config.clone();
        other_cfg.d_model = 16;
        other_cfg.d_ffn = 32;
        let mut other = Su4mtModel::<f32>::init(other_cfg, 0).unwrap();
        assert!(matches!(
            ckpt.load_into(&mut other),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn rejects_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, "#version: something-else\n").unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::Checkpoint { .. })
        ));
    }
}
