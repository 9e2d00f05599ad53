use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const BUFFER_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

/// Running statistics are stored alongside parameters but never optimized.
pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named variables created on first request with initial values drawn from a
/// seeded generator, so a model is a pure function of its config and seed.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, self.device.clone())
    }

    /// Fetches (or creates) the variable itself, for state that layers mutate.
    pub fn var(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        let shape = shape.into();
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(v) = inner.vars.get(name) {
            if v.shape() != &shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {shape:?}"),
                    actual: format!("{:?}", v.shape()),
                });
            }
            return Ok(v.clone());
        }
        let values = init_values(&shape, init, &mut inner.rng);
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        inner.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// `(name, var)` pairs under `prefix`, sorted by name.
    pub fn vars(&self, prefix: &str) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Optimizable variables under `prefix` (running statistics excluded).
    pub fn trainable(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars(prefix)
            .into_iter()
            .filter(|(k, _)| !is_buffer(k))
            .collect()
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        self.vars(prefix).into_iter().map(|(k, _)| k).collect()
    }

    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.trainable(prefix)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Hash of the names and exact bit patterns of every variable under `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, var) in self.vars(prefix) {
            name.hash(&mut h);
            let values: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            for v in values {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    pub fn tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars(prefix)
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every variable under `prefix` from `source`; all must be present.
    pub fn load(&self, prefix: &str, source: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars(prefix) {
            let t = source.get(&name).ok_or_else(|| Error::ShapeMismatch {
                expected: format!("tensor `{name}`"),
                actual: "missing".into(),
            })?;
            if t.shape() != var.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {:?}", var.shape()),
                    actual: format!("{:?}", t.shape()),
                });
            }
            var.set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Copies whichever names exist in `source`; returns how many were loaded.
    pub fn load_matching(&self, source: &HashMap<String, Tensor>) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars("") {
            if let Some(t) = source.get(&name) {
                if t.shape() == var.shape() {
                    var.set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }
}

fn init_values(shape: &Shape, init: Init, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f32> {
        let d = Normal::new(mean, std).expect("finite std");
        (0..n).map(|_| d.sample(rng) as f32).collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f32> {
        (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()
    };
    match init {
        Init::Const(c) => vec![c as f32; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal(rng, 0.0, std),
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let var = self
            .var(name, s, h)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        var.as_tensor().to_dtype(dtype)?.to_device(dev)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.inner.lock().expect("param store poisoned");
        match inner.vars.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype)?.to_device(dev),
            None => Err(candle_core::Error::CannotFindTensor {
                path: name.to_string(),
            }),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner
            .lock()
            .expect("param store poisoned")
            .vars
            .contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let dev = Device::Cpu;
        let a = ParamStore::new(5, &dev);
        let b = ParamStore::new(5, &dev);
        for s in [&a, &b] {
            let vb = s.var_builder();
            candle_nn::linear(4, 3, vb.pp("fc")).unwrap();
        }
        assert_eq!(a.checksum("").unwrap(), b.checksum("").unwrap());
        let c = ParamStore::new(6, &dev);
        candle_nn::linear(4, 3, c.var_builder().pp("fc")).unwrap();
        assert_ne!(a.checksum("").unwrap(), c.checksum("").unwrap());
        assert_eq!(a.names(""), vec!["fc.bias".to_string(), "fc.weight".to_string()]);
        assert_eq!(a.parameter_count("fc"), 15);
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = ParamStore::new(0, &Device::Cpu);
        s.var("bn.running_mean", 3, Init::Const(0.0)).unwrap();
        s.var("bn.weight", 3, Init::Const(1.0)).unwrap();
        let t: Vec<String> = s.trainable("").into_iter().map(|(k, _)| k).collect();
        assert_eq!(t, vec!["bn.weight".to_string()]);
    }
}
