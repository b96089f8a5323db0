//! Named parameter storage, Adam updates, and the checkpoint container.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"VGNP1\n";

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    grad: Option<Vec<f64>>,
    // Adam state.
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Param { value, grad: None, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Named learnable parameters with per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<()> {
        if name.contains('\n') {
            return Err(Error::Config(format!("parameter name {name:?} contains a newline")));
        }
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Overwrites one scalar entry; used by the finite-difference checker.
    pub fn set_entry(&mut self, name: &str, index: usize, v: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        p.value.data_mut()[index] = v;
        Ok(())
    }

    /// Alphabetical parameter names.
    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn total_entries(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Stores gradients produced by a backward pass.
    pub fn apply_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if g.len() != p.value.len() {
                return Err(Error::ShapeMismatch {
                    op: "apply_grads",
                    left: vec![p.value.len()],
                    right: vec![g.len()],
                });
            }
            p.grad = Some(g.clone());
        }
        Ok(())
    }

    /// One Adam update over every parameter. Consumes the staged gradients;
    /// a parameter without a gradient is an error.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let grad = p
                .grad
                .take()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            p.step += 1;
            let bc1 = 1.0 - beta1.powi(p.step as i32);
            let bc2 = 1.0 - beta2.powi(p.step as i32);
            for i in 0..grad.len() {
                let g = grad[i];
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Adds a xavier-uniform matrix parameter.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.range_f64(-bound, bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    /// Adds a `w`/`b` pair for one linear layer.
    pub fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
        self.add_xavier(&format!("{prefix}/w"), fan_in, fan_out, rng)?;
        self.add(&format!("{prefix}/b"), Tensor::zeros(1, fan_out))
    }
}

/// MLP parameter bundle for standalone node-feature construction.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub store: ParamStore,
    pub prefix: String,
}

impl MlpParams {
    /// Creates layers `{prefix}/{i}/w` and `{prefix}/{i}/b` with xavier init.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("mlp needs at least [input, output] widths".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let prefix = "mlp".to_string();
        for i in 0..widths.len() - 1 {
            store.add_linear(&format!("{prefix}/{i}"), widths[i], widths[i + 1], &mut rng)?;
        }
        Ok(MlpParams { widths: widths.to_vec(), store, prefix })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: VGNP1\n, then per parameter (alphabetical):
//   name\n
//   d0,d1\n
//   <len * 8 bytes little-endian f64>
// ---------------------------------------------------------------------------

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, p) in &store.params {
        w.write_all(name.as_bytes())?;
        w.write_all(b"\n")?;
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        w.write_all(dims.join(",").as_bytes())?;
        w.write_all(b"\n")?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("magic bytes missing".into()));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut store = ParamStore::new();

    let read_line = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        let nl = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointFormat("unterminated record line".into()))?;
        let s = std::str::from_utf8(&bytes[*pos..*pos + nl])
            .map_err(|_| Error::CheckpointFormat("record line is not UTF-8".into()))?
            .to_string();
        *pos += nl + 1;
        Ok(s)
    };

    while pos < bytes.len() {
        let name = read_line(&bytes, &mut pos)?;
        let shape_line = read_line(&bytes, &mut pos)?;
        let dims: Vec<usize> = shape_line
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::CheckpointFormat(format!("bad shape {shape_line:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::CheckpointFormat(format!("bad shape {shape_line:?}")));
        }
        let n = dims[0] * dims[1];
        let need = n * 8;
        if bytes.len() - pos < need {
            return Err(Error::CheckpointFormat(format!(
                "truncated payload for {name:?}: need {need} bytes, have {}",
                bytes.len() - pos
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes[pos..pos + need].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        pos += need;
        store.add(&name, Tensor::from_vec(dims[0], dims[1], data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        store.apply_grads(&grads).unwrap();
        store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        // Bias-corrected first step: w -= lr * g / (sqrt(g*g) + eps).
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.get("w").unwrap().at(0, 0) - expected).abs() < 1e-15);
        assert!((store.get("w").unwrap().at(0, 0) - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameter() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(2.5)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        store.apply_grads(&grads).unwrap();
        store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("w").unwrap().at(0, 0), 2.5);
    }

    #[test]
    fn adam_equal_gradients_give_equal_updates() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        store.add("b", Tensor::scalar(1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![0.37]);
        grads.insert("b".to_string(), vec![0.37]);
        store.apply_grads(&grads).unwrap();
        store.adam_step(0.05, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("a").unwrap().at(0, 0), store.get("b").unwrap().at(0, 0));
    }

    #[test]
    fn adam_missing_gradient_is_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            store.adam_step(0.1, 0.9, 0.999, 1e-8),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_values_and_order() {
        let dir = std::env::temp_dir().join("vastopo_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.vgnp");
        let mut store = ParamStore::new();
        store.add("zeta", Tensor::from_rows(&[vec![1.0, -2.0]])).unwrap();
        store.add("alpha/w", Tensor::from_rows(&[vec![0.5], vec![0.25]])).unwrap();
        save_checkpoint(&store, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let alpha_pos = bytes.windows(7).position(|w| w == b"alpha/w").unwrap();
        let zeta_pos = bytes.windows(4).position(|w| w == b"zeta").unwrap();
        assert!(alpha_pos < zeta_pos, "records must be alphabetical");

        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.get("zeta").unwrap(), store.get("zeta").unwrap());
        assert_eq!(back.get("alpha/w").unwrap(), store.get("alpha/w").unwrap());
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let dir = std::env::temp_dir().join("vastopo_ckpt_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.vgnp");
        std::fs::write(&path, b"WRONG!data").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn gradients_flow_store_to_store() {
        // Round trip: graph grads -> store -> adam; loss = sum(w) so each
        // entry moves by exactly the same amount.
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[vec![1.0, 2.0, 3.0]])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum_all(w);
        g.backward(loss).unwrap();
        store.apply_grads(&g.param_grads()).unwrap();
        store.adam_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        let after = store.get("w").unwrap();
        let step = 0.1 / (1.0 + 1e-8);
        for (i, base) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((after.data()[i] - (base - step)).abs() < 1e-12);
        }
    }
}
