use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{c, cast, Real};
use crate::error::{Error, Result};

/// Initialization rule for a freshly registered parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal(0, std) truncated at two standard deviations.
    TruncatedNormal { std: f64 },
}

impl Init {
    pub const DEFAULT: Init = Init::TruncatedNormal { std: 0.02 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Array2<F>,
    pub trainable: bool,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Param<F>>,
    seed: u64,
}

impl<F: Real> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a trainable tensor drawn from `init` with a generator derived
    /// from the store seed and `name`.
    pub fn init(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<()> {
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::TruncatedNormal { std } => {
                let mut rng = name_rng(self.seed, name);
                Array2::from_shape_simple_fn((rows, cols), || {
                    c(truncated_normal(&mut rng) * std)
                })
            }
        };
        self.insert(name, value, true)
    }

    pub fn insert(&mut self, name: &str, value: Array2<F>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.entries
            .insert(name.to_owned(), Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array2<F>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    /// Mutable access to a trainable tensor. Frozen tensors are refused.
    pub fn trainable_mut(&mut self, name: &str) -> Result<&mut Array2<F>> {
        match self.entries.get_mut(name) {
            Some(p) if p.trainable => Ok(&mut p.value),
            Some(_) => Err(Error::config(format!("parameter `{name}` is frozen"))),
            None => Err(Error::config(format!("unknown parameter `{name}`"))),
        }
    }

    /// Overwrites any tensor, frozen or not, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array2<F>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if p.value.dim() != value.dim() {
            return Err(Error::config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.dim(),
                value.dim()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: cast(&p.value),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            seed: self.seed,
        }
    }
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let mut a = ParamStore::<f64>::new(11);
        let mut b = ParamStore::<f64>::new(11);
        a.init("w", 4, 3, Init::DEFAULT).unwrap();
        a.init("v", 4, 3, Init::DEFAULT).unwrap();
        // registration order does not matter
        b.init("v", 4, 3, Init::DEFAULT).unwrap();
        b.init("w", 4, 3, Init::DEFAULT).unwrap();
        assert_eq!(a.value("w").unwrap(), b.value("w").unwrap());
        assert_ne!(a.value("w").unwrap(), a.value("v").unwrap());
        assert!(a.value("w").unwrap().iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn f32_and_f64_share_initial_values() {
        let mut a = ParamStore::<f64>::new(3);
        let mut b = ParamStore::<f32>::new(3);
        a.init("w", 5, 5, Init::DEFAULT).unwrap();
        b.init("w", 5, 5, Init::DEFAULT).unwrap();
        assert_eq!(&a.cast::<f32>().value("w").unwrap(), &b.value("w").unwrap());
    }

    #[test]
    fn duplicate_and_frozen_are_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.init("w", 1, 1, Init::Zeros).unwrap();
        assert!(s.init("w", 1, 1, Init::Zeros).is_err());
        s.insert("frozen", Array2::zeros((1, 2)), false).unwrap();
        assert!(s.trainable_mut("frozen").is_err());
        assert!(s.trainable_mut("w").is_ok());
        assert_eq!(s.trainable_names().collect::<Vec<_>>(), vec!["w"]);
    }
}
