use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Head, LayerId, ModelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Dense layer, `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::uniform(&[out, inp], 1.0 / (inp as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out, inp]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }
}

/// One LSTM layer. Gate blocks are stacked in the order input, forget, cell, output; `w_ih` is
/// `[4H, in]`, `w_hh` is `[4H, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl Lstm {
    fn init(hidden: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let w_ih = Tensor::uniform(&[4 * hidden, inp], 1.0 / (inp as f64).sqrt(), rng);
        let w_hh = Tensor::uniform(&[4 * hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data[hidden..2 * hidden].fill(1.0);
        Lstm { w_ih, w_hh, bias }
    }

    fn zeros(hidden: usize, inp: usize) -> Self {
        Lstm {
            w_ih: Tensor::zeros(&[4 * hidden, inp]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.shape[1]
    }
}

/// All learnable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub projection: Linear,
    pub lstm: Vec<Lstm>,
    pub dense: Linear,
    pub output: Linear,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut lstm = Vec::with_capacity(cfg.lstm_layers);
        for l in 0..cfg.lstm_layers {
            let inp = if l == 0 { cfg.projection_dim } else { cfg.lstm_hidden };
            lstm.push(Lstm::zeros(cfg.lstm_hidden, inp));
        }
        ModelParams {
            projection: Linear::zeros(cfg.projection_dim, cfg.input_dim),
            lstm,
            dense: Linear::zeros(cfg.dense_hidden, cfg.lstm_hidden),
            output: Linear::zeros(cfg.output_dim(), cfg.dense_hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Tensors in declaration (checkpoint) order with their owning layer and name.
    pub fn tensors(&self) -> Vec<(LayerId, String, &Tensor)> {
        let mut v = vec![
            (LayerId::Projection, "projection.weight".to_string(), &self.projection.weight),
            (LayerId::Projection, "projection.bias".to_string(), &self.projection.bias),
        ];
        for (i, l) in self.lstm.iter().enumerate() {
            v.push((LayerId::Lstm(i), format!("lstm{i}.w_ih"), &l.w_ih));
            v.push((LayerId::Lstm(i), format!("lstm{i}.w_hh"), &l.w_hh));
            v.push((LayerId::Lstm(i), format!("lstm{i}.bias"), &l.bias));
        }
        v.push((LayerId::Dense, "dense.weight".to_string(), &self.dense.weight));
        v.push((LayerId::Dense, "dense.bias".to_string(), &self.dense.bias));
        v.push((LayerId::Output, "output.weight".to_string(), &self.output.weight));
        v.push((LayerId::Output, "output.bias".to_string(), &self.output.bias));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(LayerId, String, &mut Tensor)> {
        let ModelParams {
            projection,
            lstm,
            dense,
            output,
        } = self;
        let mut v = vec![
            (LayerId::Projection, "projection.weight".to_string(), &mut projection.weight),
            (LayerId::Projection, "projection.bias".to_string(), &mut projection.bias),
        ];
        for (i, l) in lstm.iter_mut().enumerate() {
            let Lstm { w_ih, w_hh, bias } = l;
            v.push((LayerId::Lstm(i), format!("lstm{i}.w_ih"), w_ih));
            v.push((LayerId::Lstm(i), format!("lstm{i}.w_hh"), w_hh));
            v.push((LayerId::Lstm(i), format!("lstm{i}.bias"), bias));
        }
        v.push((LayerId::Dense, "dense.weight".to_string(), &mut dense.weight));
        v.push((LayerId::Dense, "dense.bias".to_string(), &mut dense.bias));
        v.push((LayerId::Output, "output.weight".to_string(), &mut output.weight));
        v.push((LayerId::Output, "output.bias".to_string(), &mut output.bias));
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::zeros(cfg);
        let mine = self.tensors();
        let theirs = expected.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "{} tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((_, name, a), (_, _, b)) in mine.iter().zip(&theirs) {
            if a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, config implies {:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// Uniform fan-in initialization with zero biases and unit LSTM forget bias. When the projection
/// is square it starts as a slightly perturbed identity.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projection = Linear::init(cfg.projection_dim, cfg.input_dim, &mut rng);
    if cfg.projection_dim == cfg.input_dim {
        let n = cfg.input_dim;
        for (i, w) in projection.weight.data.iter_mut().enumerate() {
            *w *= 0.01;
            if i / n == i % n {
                *w += 1.0;
            }
        }
    }
    let mut lstm = Vec::with_capacity(cfg.lstm_layers);
    for l in 0..cfg.lstm_layers {
        let inp = if l == 0 { cfg.projection_dim } else { cfg.lstm_hidden };
        lstm.push(Lstm::init(cfg.lstm_hidden, inp, &mut rng));
    }
    let dense = Linear::init(cfg.dense_hidden, cfg.lstm_hidden, &mut rng);
    let output = Linear::init(cfg.output_dim(), cfg.dense_hidden, &mut rng);
    Ok(ModelParams {
        projection,
        lstm,
        dense,
        output,
    })
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }
}

/// Copies every layer of a trained model except the output layer, which is freshly initialized
/// for `cls_cfg`'s head.
pub fn transfer_from_regression(source: &Model, cls_cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cls_cfg.validate()?;
    let trunk = |c: &ModelConfig| {
        (
            c.input_dim,
            c.projection_dim,
            c.lstm_hidden,
            c.lstm_layers,
            c.dense_hidden,
        )
    };
    if trunk(&source.config) != trunk(cls_cfg) {
        return Err(Error::invalid(format!(
            "source trunk {:?} differs from target {:?}",
            trunk(&source.config),
            trunk(cls_cfg)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let output = Linear::init(cls_cfg.output_dim(), cls_cfg.dense_hidden, &mut rng);
    let params = ModelParams {
        projection: source.params.projection.clone(),
        lstm: source.params.lstm.clone(),
        dense: source.params.dense.clone(),
        output,
    };
    Model::new(cls_cfg.clone(), params).map_err(|e| Error::invalid(format!("transfer: {e}")))
}

impl ModelConfig {
    pub(crate) fn is_classification(&self) -> bool {
        self.head == Head::Classification
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            lstm_hidden: 8,
            dense_hidden: 8,
            ..ModelConfig::regression(16)
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small(), 7).unwrap();
        let b = init_params(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&small(), 8).unwrap());
    }

    #[test]
    fn init_shapes_and_biases() {
        let cfg = small();
        let p = init_params(&cfg, 1).unwrap();
        p.check_shapes(&cfg).unwrap();
        assert_eq!(p.projection.weight.shape, vec![16, 16]);
        assert_eq!(p.lstm[0].w_ih.shape, vec![32, 16]);
        assert_eq!(p.lstm[1].w_ih.shape, vec![32, 8]);
        assert_eq!(p.lstm[1].w_hh.shape, vec![32, 8]);
        assert_eq!(p.output.weight.shape, vec![1, 8]);
        for l in &p.lstm {
            assert!(l.bias.data[8..16].iter().all(|&b| b == 1.0));
            assert!(l.bias.data[..8].iter().all(|&b| b == 0.0));
            assert!(l.bias.data[16..].iter().all(|&b| b == 0.0));
            let bound = 1.0 / (l.in_dim() as f64).sqrt();
            assert!(l.w_ih.data.iter().all(|w| w.abs() <= bound));
        }
        // near-identity projection
        for i in 0..16 {
            for j in 0..16 {
                let w = p.projection.weight.data[i * 16 + j];
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((w - target).abs() <= 0.01 / 4.0 + 1e-15);
            }
        }
    }

    #[test]
    fn transfer_copies_trunk_only() {
        let reg = Model::init(small(), 3).unwrap();
        let before = reg.clone();
        let cls_cfg = small().with_head(Head::Classification);
        let cls = transfer_from_regression(&reg, &cls_cfg, 11).unwrap();
        assert_eq!(cls.params.projection, reg.params.projection);
        assert_eq!(cls.params.lstm, reg.params.lstm);
        assert_eq!(cls.params.dense, reg.params.dense);
        assert_eq!(cls.params.output.weight.shape, vec![33, 8]);
        assert_eq!(reg, before);
    }

    #[test]
    fn transfer_output_is_128_to_33_by_default() {
        let reg = Model::init(ModelConfig::regression(4), 0).unwrap();
        let cls = transfer_from_regression(&reg, &ModelConfig::classification(4), 0).unwrap();
        assert_eq!(cls.params.output.weight.shape, vec![33, 128]);
    }

    #[test]
    fn transfer_rejects_mismatched_trunk() {
        let reg = Model::init(small(), 3).unwrap();
        let mut cfg = small().with_head(Head::Classification);
        cfg.lstm_hidden = 9;
        assert!(transfer_from_regression(&reg, &cfg, 0).is_err());
    }
}
