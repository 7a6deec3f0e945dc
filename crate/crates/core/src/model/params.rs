use indexmap::IndexMap;
use rand::Rng;

use super::config::{ModelConfig, Readout};
use crate::autodiff::{Matrix, Real};
use crate::error::{Error, Result};

/// Rows of the element embedding table (`Z = 1..=MAX_Z`, row `Z - 1`).
pub const MAX_Z: usize = 17;

/// Scale applied to the initial weights of the final readout layers.
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with unit variance.
    Embedding,
    /// Uniform with variance `gain^2 / fan_in`.
    FanIn { fan_in: usize, gain: f64 },
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) {
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        });
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize, gain: f64) {
        self.push(name, fan_in, fan_out, Init::FanIn { fan_in, gain });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.weight(format!("{prefix}.weight"), fan_in, fan_out, gain);
        self.push(format!("{prefix}.bias"), 1, fan_out, Init::Zero);
    }

    fn mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize, out_gain: f64) {
        self.linear(&format!("{prefix}.0"), fan_in, hidden, 1.0);
        self.linear(&format!("{prefix}.1"), hidden, fan_out, out_gain);
    }
}

/// Names, shapes and initializers of every trainable tensor, in a fixed order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let s = config.scalar_channels;
    let v = config.vector_channels;
    let t = config.tensor_channels;
    let h = config.hidden;
    let k = config.num_rbf;
    let edge_in = 2 * s + k;
    let mut b = SpecBuilder { specs: Vec::new() };

    b.push("embedding".into(), MAX_Z, s, Init::Embedding);
    for l in 0..config.layers {
        let p = format!("layers.{l}");
        b.mlp(&format!("{p}.scalar_message"), edge_in + config.invariant_width(), h, s, 1.0);
        b.mlp(&format!("{p}.scalar_update"), 2 * s, h, s, 1.0);
        b.mlp(&format!("{p}.vector_edge"), edge_in, h, 3 * v, 1.0);
        b.weight(format!("{p}.vector_mix"), v, v, 1.0);
        b.linear(&format!("{p}.vector_gate"), s, v, 1.0);
        if config.has_tensor_path() {
            if config.rv || config.vv {
                b.weight(format!("{p}.tensor_u"), v, t, 1.0);
            }
            if config.vv {
                b.weight(format!("{p}.tensor_w"), v, t, 1.0);
            }
            let feedback = if config.trace_feedback { t } else { 0 };
            let nb = config.branches().count();
            b.mlp(&format!("{p}.tensor_edge"), edge_in + feedback, h, nb * t, 1.0);
            b.linear(&format!("{p}.tensor_gate"), s, t, 1.0);
            if config.use_lora {
                let r = config.lora_rank;
                b.weight(format!("{p}.lora_a"), t, r, 1.0);
                b.weight(format!("{p}.lora_b"), r, t, HEAD_INIT_SCALE);
            }
        }
    }
    match config.readout {
        Readout::TensorChannel => b.mlp("readout", s, h, 1 + t, HEAD_INIT_SCALE),
        Readout::PainnReadout => {
            b.mlp("readout", s, h, 1, HEAD_INIT_SCALE);
            b.weight("readout_nu".into(), v, 1, HEAD_INIT_SCALE);
        }
    }
    b.specs
}

/// Exact number of trainable scalars of a configuration.
pub fn param_count(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(ParamSpec::numel).sum()
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Matrix<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = IndexMap::new();
        for spec in param_specs(config) {
            let m = match spec.init {
                Init::Zero => Matrix::zeros(spec.rows, spec.cols),
                Init::Embedding => {
                    let a = 3f64.sqrt();
                    Matrix::from_fn(spec.rows, spec.cols, |_, _| T::c(rng.random_range(-a..a)))
                }
                Init::FanIn { fan_in, gain } => {
                    let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                    Matrix::from_fn(spec.rows, spec.cols, |_, _| T::c(rng.random_range(-a..=a)))
                }
            };
            tensors.insert(spec.name, m);
        }
        Self { tensors }
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn from_tensors(config: &ModelConfig, tensors: IndexMap<String, Matrix<T>>) -> Result<Self> {
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for spec in &specs {
            match tensors.get(&spec.name) {
                Some(m) if m.shape() == (spec.rows, spec.cols) => {}
                Some(m) => {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape {:?}, expected {:?}",
                        spec.name,
                        m.shape(),
                        (spec.rows, spec.cols)
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {}", spec.name))),
            }
        }
        let ordered = specs
            .iter()
            .map(|s| (s.name.clone(), tensors[&s.name].clone()))
            .collect();
        Ok(Self { tensors: ordered })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<T>)> {
        self.tensors.iter_mut()
    }

    pub fn values(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.tensors.values()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Flat view of the `index`-th scalar across all tensors, in order.
    pub fn locate(&self, mut index: usize) -> Option<(&str, usize)> {
        for (name, m) in &self.tensors {
            if index < m.len() {
                return Some((name, index));
            }
            index -= m.len();
        }
        None
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.tensors.get_mut(name)
    }

    pub fn into_map(self) -> IndexMap<String, Matrix<T>> {
        self.tensors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Branches;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_matches_allocation() {
        let c = ModelConfig::toy();
        let p = ParamSet::<f32>::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.numel(), param_count(&c));
    }

    #[test]
    fn linear_head_count() {
        let mut b = SpecBuilder { specs: Vec::new() };
        b.linear("head", 10, 5, 1.0);
        assert_eq!(b.specs.iter().map(ParamSpec::numel).sum::<usize>(), 55);
    }

    #[test]
    fn wider_tensor_channels_grow_the_tensor_path() {
        let base = ModelConfig::toy();
        let mut wide = base.clone();
        wide.tensor_channels *= 2;
        let tensor_params = |c: &ModelConfig| {
            param_specs(c)
                .iter()
                .filter(|s| s.name.contains("tensor") || s.name.contains("lora"))
                .map(ParamSpec::numel)
                .sum::<usize>()
        };
        let (a, b) = (tensor_params(&base), tensor_params(&wide));
        assert!(b > a && b <= 4 * a, "{a} -> {b}");
        assert!(param_count(&wide) > param_count(&base));
    }

    #[test]
    fn disabled_branches_drop_their_weights() {
        let mut c = ModelConfig::toy();
        c.set_branches(Branches::RR_ONLY);
        assert!(param_specs(&c).iter().all(|s| !s.name.contains("tensor_u")));
        c.set_branches(Branches::ALL);
        assert!(param_specs(&c).iter().any(|s| s.name.ends_with("tensor_w")));
    }

    #[test]
    fn from_tensors_rejects_wrong_shapes() {
        let c = ModelConfig::toy();
        let p = ParamSet::<f32>::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        let mut map = p.clone().into_map();
        map.insert("embedding".into(), Matrix::zeros(1, 1));
        assert!(ParamSet::from_tensors(&c, map).is_err());
        assert_eq!(ParamSet::from_tensors(&c, p.clone().into_map()).unwrap(), p);
    }
}
