//! Named parameters, SGD with momentum, and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::io::{read_ftns, write_atomic, write_ftns, RawTensor};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered set of parameters with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `±sqrt(1 / fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add_uniform_bound(name, shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng)
    }

    /// Uniform init in `±bound`.
    pub fn add_uniform_bound<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape matches"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, T::of(v)))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    /// Adds `g` into the accumulator for `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        let acc = self.params[id.0].grad.data_mut();
        assert_eq!(acc.len(), g.len(), "gradient size mismatch");
        for (a, &b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.scale(s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(T::of(max_norm / norm));
        }
        norm
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Same names and ids, converted element type, zeroed gradients.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
        }
    }

    /// Writes one `FTNS` file per parameter plus `index.tsv` (`name\tfile\tshape`).
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for p in &self.params {
            let name = format!("{prefix}{}", p.name);
            let file = format!("{name}.ftns");
            let data = p.value.data().iter().map(|v| v.as_f64() as f32).collect();
            let raw = RawTensor::new(1, 1, p.value.numel(), data)?;
            write_ftns(&dir.join(&file), &raw)?;
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            index.push_str(&format!("{name}\t{file}\t{}\n", shape.join("x")));
        }
        let index_path = dir.join(format!("{}index.tsv", prefix));
        write_atomic(&index_path, index.as_bytes())
    }

    /// Loads values saved by [`ParamStore::save`] into parameters of matching names.
    pub fn load(&mut self, dir: &Path, prefix: &str) -> Result<()> {
        let index_path = dir.join(format!("{}index.tsv", prefix));
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::format(
                    &index_path,
                    format!("line {}: expected 3 fields", i + 1),
                ));
            }
            let shape = f[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(&index_path, format!("line {}: bad shape", i + 1)))?;
            entries.insert(f[0].to_string(), (f[1].to_string(), shape));
        }
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let (file, shape) = entries
                .get(&key)
                .ok_or_else(|| Error::format(&index_path, format!("missing parameter {key}")))?;
            if shape.as_slice() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint {key} has shape {shape:?}, model expects {:?}",
                    p.value.shape()
                )));
            }
            let raw = read_ftns(&dir.join(file))?;
            if raw.data.len() != p.value.numel() {
                return Err(Error::format(dir.join(file), "size disagrees with index"));
            }
            for (d, &s) in p.value.data_mut().iter_mut().zip(&raw.data) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Learning-rate schedule over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g + λp`, `p ← p − η v`.
#[derive(Debug, Clone)]
pub struct Sgd<T = f32> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        }
        let lr = T::of(self.config.lr);
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for (p, v) in store.params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.data();
            for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_follows_hand_recurrence() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut opt = Sgd::new(cfg);
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for step in 0..5 {
            let g = 0.5 - 0.1 * step as f64;
            store.zero_grad();
            store.accumulate(id, &[g]);
            opt.step(&mut store);
            v = 0.9 * v + g + 0.01 * p;
            p -= 0.1 * v;
            assert!((store.value(id).data()[0] - p).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        a.add_uniform("l.w", &[3, 4], 4, &mut rng);
        a.add_filled("l.b", &[3], 0.25);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path(), "refiner.").unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add_zeros("l.w", &[3, 4]);
        b.add_zeros("l.b", &[3]);
        b.load(dir.path(), "refiner.").unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.value, y.value);
        }
        let mut c = ParamStore::<f32>::new();
        c.add_zeros("l.w", &[4, 3]);
        assert!(matches!(c.load(dir.path(), "refiner."), Err(Error::Shape(_))));
        let index = fs::read_to_string(dir.path().join("refiner.index.tsv")).unwrap();
        assert!(index.starts_with("refiner.l.w\trefiner.l.w.ftns\t3x4\n"));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("a", &[1]);
        s.add_zeros("a", &[1]);
    }
}
