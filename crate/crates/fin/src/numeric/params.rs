//! Named parameter storage with gradient slots, Adam state, and a binary
//! checkpoint format that reloads bit-exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{FinError, Result};
use crate::numeric::matrix::DenseMatrix;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || self.beta1 <= 0.0
            || !(0.0..1.0).contains(&self.beta2)
            || self.beta2 <= 0.0
            || self.epsilon <= 0.0
        {
            return Err(FinError::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Param {
    name: String,
    value: DenseMatrix,
    grad: DenseMatrix,
    m: DenseMatrix,
    v: DenseMatrix,
}

/// All learnable state of a model plus the optimizer moments and step count.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, value: DenseMatrix) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let (rows, cols) = (value.rows, value.cols);
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: DenseMatrix::zeros(rows, cols),
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
        });
        let idx = self.params.len() - 1;
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    /// Glorot-style uniform init in +-sqrt(6/(fan_in+fan_out)).
    pub fn add_weight<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add_param(name, DenseMatrix::from_vec(rows, cols, data).unwrap())
    }

    /// Embedding init, uniform +-0.05.
    pub fn add_embedding<R: Rng>(&mut self, name: &str, vocab: usize, dim: usize, rng: &mut R) -> usize {
        let data = (0..vocab * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        self.add_param(name, DenseMatrix::from_vec(vocab, dim, data).unwrap())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn value(&self, idx: usize) -> &DenseMatrix {
        &self.params[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut DenseMatrix {
        &mut self.params[idx].value
    }

    pub fn grad(&self, idx: usize) -> &DenseMatrix {
        &self.params[idx].grad
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut DenseMatrix {
        &mut self.params[idx].grad
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// One bias-corrected Adam update over every parameter; zeroes gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for p in &self.params {
            if !p.grad.is_finite() {
                return Err(FinError::Training(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in self.params.iter_mut() {
            for k in 0..p.value.data.len() {
                let g = p.grad.data[k];
                p.m.data[k] = cfg.beta1 * p.m.data[k] + (1.0 - cfg.beta1) * g;
                p.v.data[k] = cfg.beta2 * p.v.data[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m.data[k] / bc1;
                let vhat = p.v.data[k] / bc2;
                p.value.data[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
                p.grad.data[k] = 0.0;
            }
        }
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"FINCKPT1")?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let nb = p.name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(p.value.rows as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols as u64).to_le_bytes())?;
            for mat in [&p.value, &p.m, &p.v] {
                for &f in &mat.data {
                    w.write_all(&f.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ParamStore> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FINCKPT1" {
            return Err(FinError::Format("bad checkpoint magic".into()));
        }
        let step = read_u64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        store.step = step;
        for _ in 0..n {
            let name_len = read_u64(&mut r)? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| FinError::Format("non-utf8 parameter name".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut mats = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut data = vec![0.0f64; rows * cols];
                for d in data.iter_mut() {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    *d = f64::from_le_bytes(b);
                }
                mats.push(DenseMatrix { rows, cols, data });
            }
            let v = mats.pop().unwrap();
            let m = mats.pop().unwrap();
            let value = mats.pop().unwrap();
            let idx = store.add_param(&name, value);
            store.params[idx].m = m;
            store.params[idx].v = v;
        }
        Ok(store)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Compare the analytic gradient of `f` against central finite differences
/// on the sampled `(param, coord)` coordinates. `f` must run forward and
/// backward, leaving gradients in the store, and return the scalar loss.
/// Returns the max relative error over the sample.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grads();
    let _ = f(store)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, k)| store.grad(p).data[k])
        .collect();
    store.zero_grads();

    let mut max_rel = 0.0f64;
    for (ci, &(p, k)) in coords.iter().enumerate() {
        let orig = store.value(p).data[k];
        store.value_mut(p).data[k] = orig + eps;
        let f1 = f(store)?;
        store.zero_grads();
        store.value_mut(p).data[k] = orig - eps;
        let f2 = f(store)?;
        store.zero_grads();
        store.value_mut(p).data[k] = orig;
        let numeric = (f1 - f2) / (2.0 * eps);
        let a = analytic[ci];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tape::Tape;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", DenseMatrix::scalar(0.0));
        store.grad_mut(w).data[0] = 1.0;
        let cfg = AdamConfig::default();
        store.adam_step(&cfg).unwrap();
        // bias-corrected first step: -lr * g / (|g| + eps') ~ -lr
        let got = store.value(w).data[0];
        assert!((got + cfg.learning_rate).abs() < 1e-6, "got {got}");
        assert_eq!(store.grad(w).data[0], 0.0);
    }

    #[test]
    fn adam_zero_grad_leaves_param() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", DenseMatrix::scalar(1.5));
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value(w).data[0], 1.5);
    }

    #[test]
    fn adam_deterministic_across_clones() {
        let build = || {
            let mut s = ParamStore::new();
            let w = s.add_param("w", DenseMatrix::from_vec(1, 3, vec![0.1, -0.2, 0.3]).unwrap());
            s.grad_mut(w).data.copy_from_slice(&[1.0, -0.5, 0.25]);
            s.adam_step(&AdamConfig::default()).unwrap();
            s.value(w).clone()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut store = ParamStore::new();
        let w = store.add_param("bad", DenseMatrix::scalar(0.0));
        store.grad_mut(w).data[0] = f64::NAN;
        let err = store.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn grad_check_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", DenseMatrix::scalar(3.0));
        let rel = grad_check(
            &mut store,
            |s| {
                let mut t = Tape::new();
                let nw = t.param(s, w);
                let f = t.mul(nw, nw)?;
                let loss = t.value(f).data[0];
                t.backward_into(f, s)?;
                Ok(loss)
            },
            &[(w, 0)],
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-7, "rel {rel}");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut store = ParamStore::new();
        let w = store.add_param(
            "layer.w",
            DenseMatrix::from_vec(2, 2, vec![0.1, -0.2, 1e-300, 3.7]).unwrap(),
        );
        store.grad_mut(w).data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        store.adam_step(&AdamConfig::default()).unwrap();
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.step, store.step);
        assert_eq!(loaded.value(0).data, store.value(0).data);

        // next step from the same gradient must be bit-identical
        let mut a = store;
        let mut b = loaded;
        for s in [&mut a, &mut b] {
            s.grad_mut(0).data.copy_from_slice(&[0.5, 0.5, -0.5, 0.1]);
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(a.value(0).data, b.value(0).data);
    }
}
