use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;

/// Tensor names in serialization order.
pub const TENSOR_NAMES: [&str; 12] = [
    "token_embed",
    "update_input",
    "update_recurrent",
    "update_bias",
    "reset_input",
    "reset_recurrent",
    "reset_bias",
    "candidate_input",
    "candidate_recurrent",
    "candidate_bias",
    "output_proj",
    "output_bias",
];

/// All learnable tensors of the encoder, row-major `[in x out]`.
///
/// The same layout doubles as a gradient buffer and as optimizer moment
/// storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub token_embed: Vec<f64>,
    pub update_input: Vec<f64>,
    pub update_recurrent: Vec<f64>,
    pub update_bias: Vec<f64>,
    pub reset_input: Vec<f64>,
    pub reset_recurrent: Vec<f64>,
    pub reset_bias: Vec<f64>,
    pub candidate_input: Vec<f64>,
    pub candidate_recurrent: Vec<f64>,
    pub candidate_bias: Vec<f64>,
    pub output_proj: Vec<f64>,
    pub output_bias: Vec<f64>,
}

pub type ModelParams = Weights;
pub type GradientBuffer = Weights;

impl Weights {
    /// `(rows, cols)` of every tensor, in serialization order. Biases are `(1, n)`.
    pub fn shapes(config: &ModelConfig) -> [(usize, usize); 12] {
        let (v, d, h, o) = (
            config.vocab_size,
            config.token_embed_dim,
            config.hidden_dim,
            config.output_dim,
        );
        [
            (v, d),
            (d, h),
            (h, h),
            (1, h),
            (d, h),
            (h, h),
            (1, h),
            (d, h),
            (h, h),
            (1, h),
            (h, o),
            (1, o),
        ]
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let s = Self::shapes(config).map(|(r, c)| vec![0.0; r * c]);
        let [token_embed, update_input, update_recurrent, update_bias, reset_input, reset_recurrent, reset_bias, candidate_input, candidate_recurrent, candidate_bias, output_proj, output_bias] =
            s;
        Self {
            token_embed,
            update_input,
            update_recurrent,
            update_bias,
            reset_input,
            reset_recurrent,
            reset_bias,
            candidate_input,
            candidate_recurrent,
            candidate_bias,
            output_proj,
            output_bias,
        }
    }

    pub fn tensors(&self) -> [&[f64]; 12] {
        [
            &self.token_embed,
            &self.update_input,
            &self.update_recurrent,
            &self.update_bias,
            &self.reset_input,
            &self.reset_recurrent,
            &self.reset_bias,
            &self.candidate_input,
            &self.candidate_recurrent,
            &self.candidate_bias,
            &self.output_proj,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            &mut self.token_embed,
            &mut self.update_input,
            &mut self.update_recurrent,
            &mut self.update_bias,
            &mut self.reset_input,
            &mut self.reset_recurrent,
            &mut self.reset_bias,
            &mut self.candidate_input,
            &mut self.candidate_recurrent,
            &mut self.candidate_bias,
            &mut self.output_proj,
            &mut self.output_bias,
        ]
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_matches(&self, config: &ModelConfig) -> bool {
        self.tensors()
            .iter()
            .zip(Self::shapes(config))
            .all(|(t, (r, c))| t.len() == r * c)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().into_iter().flat_map(|t| t.iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|v| v == 0.0)
    }

    /// Mutable access to the `index`-th scalar in serialization order.
    pub fn flat_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for t in self.tensors_mut() {
            if index < t.len() {
                return Some(&mut t[index]);
            }
            index -= t.len();
        }
        None
    }
}

/// Uniform Glorot initialization per weight tensor; biases start at zero.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Weights::zeros(config);
    let shapes = Weights::shapes(config);
    for ((tensor, (rows, cols)), name) in params.tensors_mut().into_iter().zip(shapes).zip(TENSOR_NAMES) {
        if name.ends_with("_bias") {
            continue;
        }
        let a = (6.0 / (rows + cols) as f64).sqrt();
        tensor.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 50,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&config()).unwrap();
        let b = init_params(&config()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_params(&ModelConfig { seed: 6, ..config() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_params(&config()).unwrap();
        for (t, name) in p.tensors().into_iter().zip(TENSOR_NAMES) {
            if name.ends_with("_bias") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_variance_matches_uniform_moment() {
        let cfg = config();
        let p = init_params(&cfg).unwrap();
        for ((t, (rows, cols)), name) in p.tensors().into_iter().zip(Weights::shapes(&cfg)).zip(TENSOR_NAMES) {
            if name.ends_with("_bias") {
                continue;
            }
            let a2 = 6.0 / (rows + cols) as f64;
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let expected = a2 / 3.0;
            assert!(
                (var - expected).abs() < 0.2 * expected,
                "{name}: var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = config();
        let p = init_params(&cfg).unwrap();
        assert!(p.shape_matches(&cfg));
        assert_eq!(p.len(), 50 * 32 + 3 * (32 * 64 + 64 * 64 + 64) + 64 * 32 + 32);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(init_params(&ModelConfig::default()).is_err());
        let cfg = ModelConfig {
            output_dim: 257,
            ..config()
        };
        assert!(init_params(&cfg).is_err());
    }
}
