use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::kernels::Real;

/// Weights of one transformer block. Matrices are row-major `[in × out]`
/// and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: Vec<T>,
    /// Gate projection `W` (goes through swish).
    pub w_gate: Vec<T>,
    /// Value projection `V`.
    pub w_up: Vec<T>,
    /// Output projection `W2`.
    pub w_down: Vec<T>,
}

/// All trainable tensors. There is no positional table: position enters only
/// through the attention bias. The output projection reuses `embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub embedding: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Gain,
    Embedding,
    Projection,
    /// Projections that write into the residual stream.
    ResidualOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl<T: Real> Parameters<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let z = |n: usize| vec![T::zero(); n];
        let layer = LayerParams {
            attn_norm: z(d),
            wq: z(d * d),
            wk: z(d * d),
            wv: z(d * d),
            wo: z(d * d),
            ffn_norm: z(d),
            w_gate: z(d * f),
            w_up: z(d * f),
            w_down: z(f * d),
        };
        Ok(Self {
            config,
            embedding: z(config.vocab_size * d),
            layers: vec![layer; config.n_layers],
            final_norm: z(d),
        })
    }

    /// All matrices zero, all gains one.
    pub fn zero_init(config: ModelConfig) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        for (spec, data) in p.named_mut() {
            if spec.role == TensorRole::Gain {
                data.iter_mut().for_each(|x| *x = T::one());
            }
        }
        Ok(p)
    }

    /// Normal(0, 0.02) weights, with residual outputs scaled by `1/√(2·n_layers)`;
    /// gains at one. Tensors are filled in canonical name order.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        let base = 0.02f64;
        let residual = base / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        for (spec, data) in p.named_mut() {
            let std = match spec.role {
                TensorRole::Gain => {
                    data.iter_mut().for_each(|x| *x = T::one());
                    continue;
                }
                TensorRole::ResidualOutput => residual,
                TensorRole::Embedding | TensorRole::Projection => base,
            };
            for x in data.iter_mut() {
                *x = T::of(std * normal.sample(rng));
            }
        }
        Ok(p)
    }

    /// Tensor specs in canonical (lexicographic name) order.
    pub fn specs(config: &ModelConfig) -> Vec<TensorSpec> {
        let d = config.d_model;
        let f = config.d_ff;
        let mut specs = vec![
            TensorSpec {
                name: "embedding".into(),
                shape: vec![config.vocab_size, d],
                role: TensorRole::Embedding,
            },
            TensorSpec {
                name: "final_norm".into(),
                shape: vec![d],
                role: TensorRole::Gain,
            },
        ];
        for l in 0..config.n_layers {
            let mut push = |suffix: &str, shape: Vec<usize>, role| {
                specs.push(TensorSpec {
                    name: format!("layers.{l}.{suffix}"),
                    shape,
                    role,
                })
            };
            push("attn_k", vec![d, d], TensorRole::Projection);
            push("attn_norm", vec![d], TensorRole::Gain);
            push("attn_o", vec![d, d], TensorRole::ResidualOutput);
            push("attn_q", vec![d, d], TensorRole::Projection);
            push("attn_v", vec![d, d], TensorRole::Projection);
            push("ffn_down", vec![f, d], TensorRole::ResidualOutput);
            push("ffn_gate", vec![d, f], TensorRole::Projection);
            push("ffn_norm", vec![d], TensorRole::Gain);
            push("ffn_up", vec![d, f], TensorRole::Projection);
        }
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        specs
    }

    fn slots(&self) -> Vec<(String, &Vec<T>)> {
        let mut v: Vec<(String, &Vec<T>)> = vec![
            ("embedding".into(), &self.embedding),
            ("final_norm".into(), &self.final_norm),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            v.push((p("attn_k"), &layer.wk));
            v.push((p("attn_norm"), &layer.attn_norm));
            v.push((p("attn_o"), &layer.wo));
            v.push((p("attn_q"), &layer.wq));
            v.push((p("attn_v"), &layer.wv));
            v.push((p("ffn_down"), &layer.w_down));
            v.push((p("ffn_gate"), &layer.w_gate));
            v.push((p("ffn_norm"), &layer.ffn_norm));
            v.push((p("ffn_up"), &layer.w_up));
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Tensors paired with their specs, in canonical order.
    pub fn named(&self) -> Vec<(TensorSpec, &[T])> {
        Self::specs(&self.config)
            .into_iter()
            .zip(self.slots())
            .map(|(spec, (name, data))| {
                debug_assert_eq!(spec.name, name);
                (spec, data.as_slice())
            })
            .collect()
    }

    pub fn named_mut(&mut self) -> Vec<(TensorSpec, &mut [T])> {
        let specs = Self::specs(&self.config);
        let mut v: Vec<(String, &mut Vec<T>)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("final_norm".into(), &mut self.final_norm),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            v.push((p("attn_k"), &mut layer.wk));
            v.push((p("attn_norm"), &mut layer.attn_norm));
            v.push((p("attn_o"), &mut layer.wo));
            v.push((p("attn_q"), &mut layer.wq));
            v.push((p("attn_v"), &mut layer.wv));
            v.push((p("ffn_down"), &mut layer.w_down));
            v.push((p("ffn_gate"), &mut layer.w_gate));
            v.push((p("ffn_norm"), &mut layer.ffn_norm));
            v.push((p("ffn_up"), &mut layer.w_up));
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        specs
            .into_iter()
            .zip(v)
            .map(|(spec, (name, data))| {
                debug_assert_eq!(spec.name, name);
                (spec, data.as_mut_slice())
            })
            .collect()
    }

    pub fn numel(&self) -> u64 {
        self.named().iter().map(|(_, d)| d.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().expect("finite"))).collect::<Vec<U>>();
        Parameters {
            config: self.config,
            embedding: conv(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: conv(&l.attn_norm),
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    ffn_norm: conv(&l.ffn_norm),
                    w_gate: conv(&l.w_gate),
                    w_up: conv(&l.w_up),
                    w_down: conv(&l.w_down),
                })
                .collect(),
            final_norm: conv(&self.final_norm),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn specs_sorted_and_match_count() {
        let cfg = ModelConfig::new(3, 8, 2, 11, 16);
        let specs = Parameters::<f32>::specs(&cfg);
        let names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let total: u64 = specs.iter().map(|s| s.numel() as u64).sum();
        assert_eq!(total, cfg.param_count());
        let p = Parameters::<f32>::zeros(cfg).unwrap();
        assert_eq!(p.numel(), cfg.param_count());
        for (spec, data) in p.named() {
            assert_eq!(spec.numel(), data.len(), "{}", spec.name);
        }
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let cfg = ModelConfig::desk(30);
        let a = Parameters::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = Parameters::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.final_norm.iter().all(|&g| g == 1.0));
        let std = |v: &[f32]| (v.iter().map(|x| (x * x) as f64).sum::<f64>() / v.len() as f64).sqrt();
        let q = std(&a.layers[0].wq);
        let o = std(&a.layers[0].wo);
        assert!((q - 0.02).abs() < 0.002, "{q}");
        assert!((o - 0.02 / 8f64.sqrt()).abs() < 0.001, "{o}");
    }
}
