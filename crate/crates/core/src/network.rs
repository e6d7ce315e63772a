//! The small convolutional classifier, split at the augmentation layer.
//!
//! `forward = head ∘ features`. `features` runs the conv+ReLU blocks up to the
//! augmentation layer and returns `s` with shape `[N, C, H, W]`; `head` runs
//! the remaining conv+ReLU blocks, global average pooling and a linear layer,
//! and returns unscaled logits.
//!
//! Parameter order (also the checkpoint blob order): for each block before
//! the split, kernel `[C_out, C_in, 3, 3]` then bias `[C_out]`; the same for
//! each block after the split; then the linear weight `[C, K]` and bias `[K]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden_channels: usize,
    #[serde(default = "default_one")]
    pub conv_blocks_before_r: usize,
    #[serde(default = "default_one")]
    pub conv_blocks_after_r: usize,
    pub num_classes: usize,
    #[serde(default = "default_side")]
    pub image_side: usize,
}

fn default_hidden() -> usize {
    8
}
fn default_one() -> usize {
    1
}
fn default_side() -> usize {
    16
}

impl NetworkConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        NetworkConfig {
            in_channels,
            hidden_channels: default_hidden(),
            conv_blocks_before_r: 1,
            conv_blocks_after_r: 1,
            num_classes,
            image_side: default_side(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("hidden_channels", self.hidden_channels),
            ("conv_blocks_before_r", self.conv_blocks_before_r),
            ("conv_blocks_after_r", self.conv_blocks_after_r),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.image_side < 2 {
            return Err(Error::Config(
                "image_side must be >= 2 so instance statistics exist".into(),
            ));
        }
        Ok(())
    }

    fn blocks(&self) -> usize {
        self.conv_blocks_before_r + self.conv_blocks_after_r
    }

    /// Shapes of every parameter tensor, in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let c = self.hidden_channels;
        let mut shapes = Vec::new();
        for b in 0..self.blocks() {
            let cin = if b == 0 { self.in_channels } else { c };
            shapes.push(vec![c, cin, 3, 3]);
            shapes.push(vec![c]);
        }
        shapes.push(vec![c, self.num_classes]);
        shapes.push(vec![self.num_classes]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Shape of one hidden representation `s`.
    pub fn hidden_shape(&self) -> [usize; 3] {
        [self.hidden_channels, self.image_side, self.image_side]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_side, self.image_side]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor>,
}

impl Network {
    /// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases,
    /// deterministic per seed.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data).expect("shape matches")
            })
            .collect();
        Ok(Network { config, params })
    }

    /// Build from explicit parameters, checking them against `config`.
    pub fn from_parameters(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape(
                "Network::from_parameters",
                "parameters do not match the network configuration",
            ));
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Record every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Record the parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    fn conv_block(tape: &mut Tape, x: Var, k: Var, b: Var) -> Result<Var> {
        let y = tape.conv2d(x, k)?;
        let y = tape.add_bias(y, b)?;
        Ok(tape.relu(y))
    }

    /// Hidden representation at the augmentation layer.
    pub fn features(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let [cin, h, w] = self.config.input_shape();
        let sx = tape.value(x).shape();
        if sx.len() != 4 || sx[1..] != [cin, h, w] {
            return Err(Error::shape(
                "features",
                format!("input {:?}, expected [N, {cin}, {h}, {w}]", sx),
            ));
        }
        let mut s = x;
        for b in 0..self.config.conv_blocks_before_r {
            s = Self::conv_block(tape, s, params[2 * b], params[2 * b + 1])?;
        }
        Ok(s)
    }

    /// Unscaled logits from a hidden representation.
    pub fn head(&self, tape: &mut Tape, params: &[Var], s: Var) -> Result<Var> {
        let [c, h, w] = self.config.hidden_shape();
        let ss = tape.value(s).shape();
        if ss.len() != 4 || ss[1..] != [c, h, w] {
            return Err(Error::shape(
                "head",
                format!("hidden {:?}, expected [N, {c}, {h}, {w}]", ss),
            ));
        }
        let mut t = s;
        let first = self.config.conv_blocks_before_r;
        for b in first..self.config.blocks() {
            t = Self::conv_block(tape, t, params[2 * b], params[2 * b + 1])?;
        }
        let pooled = tape.global_avg_pool(t)?;
        let nb = self.config.blocks();
        let logits = tape.matmul(pooled, params[2 * nb])?;
        tape.add_bias(logits, params[2 * nb + 1])
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let s = self.features(tape, params, x)?;
        self.head(tape, params, s)
    }

    /// Logits for a batch without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Hidden representations for a batch without recording gradients.
    pub fn feature_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let s = self.features(&mut tape, &params, xv)?;
        Ok(tape.value(s).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            in_channels: 2,
            hidden_channels: 4,
            conv_blocks_before_r: 1,
            conv_blocks_after_r: 1,
            num_classes: 3,
            image_side: 6,
        }
    }

    fn random_input(n: usize, cfg: &NetworkConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let [c, h, w] = cfg.input_shape();
        let data = (0..n * c * h * w).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        let mut bad = small();
        bad.num_classes = 1;
        assert!(bad.validate().is_err());
        let mut bad = small();
        bad.hidden_channels = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_count_is_pure_function_of_config() {
        let cfg = small();
        let a = Network::init(cfg.clone(), 1).unwrap();
        let b = Network::init(cfg.clone(), 2).unwrap();
        let count = |n: &Network| n.parameters().iter().map(Tensor::numel).sum::<usize>();
        assert_eq!(count(&a), cfg.parameter_count());
        assert_eq!(count(&b), cfg.parameter_count());
        // 2*4*9 + 4 + 4*4*9 + 4 + 4*3 + 3
        assert_eq!(cfg.parameter_count(), 72 + 4 + 144 + 4 + 12 + 3);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Network::init(small(), 7).unwrap();
        let b = Network::init(small(), 7).unwrap();
        let c = Network::init(small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_std_near_kaiming() {
        let cfg = NetworkConfig::new(3, 10);
        let net = Network::init(cfg, 0).unwrap();
        for p in net.parameters().iter().filter(|p| p.rank() > 1) {
            let fan_in: usize = if p.rank() == 4 { p.shape()[1..].iter().product() } else { p.shape()[0] };
            let n = p.numel() as f64;
            let mean = p.data().iter().sum::<f64>() / n;
            let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let target = (2.0 / fan_in as f64).sqrt();
            assert!(
                (var.sqrt() / target - 1.0).abs() < 0.2,
                "std {} vs {}",
                var.sqrt(),
                target
            );
        }
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let cfg = small();
        let net = Network::init(cfg.clone(), 3).unwrap();
        let [c, h, w] = cfg.input_shape();
        let s = net.feature_values(&Tensor::zeros(&[1, c, h, w])).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_hidden_gives_zero_logits() {
        let cfg = small();
        let net = Network::init(cfg.clone(), 3).unwrap();
        let [c, h, w] = cfg.hidden_shape();
        let mut tape = Tape::new();
        let p = net.bind_frozen(&mut tape);
        let s = tape.constant(Tensor::zeros(&[2, c, h, w]));
        let out = net.head(&mut tape, &p, s).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, cfg.num_classes]);
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_inputs_identical_features() {
        let cfg = small();
        let net = Network::init(cfg.clone(), 4).unwrap();
        let one = random_input(1, &cfg, 9);
        let two = Tensor::stack(&[
            one.clone().reshape(cfg.input_shape().to_vec()).unwrap(),
            one.clone().reshape(cfg.input_shape().to_vec()).unwrap(),
        ])
        .unwrap();
        let s = net.feature_values(&two).unwrap();
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn forward_equals_head_of_features_bit_exactly() {
        let cfg = small();
        let net = Network::init(cfg.clone(), 5).unwrap();
        let x = random_input(3, &cfg, 11);
        let full = net.logits(&x).unwrap();
        let s = net.feature_values(&x).unwrap();
        let mut tape = Tape::new();
        let p = net.bind_frozen(&mut tape);
        let sv = tape.constant(s);
        let out = net.head(&mut tape, &p, sv).unwrap();
        assert_eq!(tape.value(out), &full);
    }

    #[test]
    fn head_is_batch_permutation_equivariant() {
        let cfg = small();
        let net = Network::init(cfg.clone(), 6).unwrap();
        let x = random_input(3, &cfg, 12);
        let s = net.feature_values(&x).unwrap();
        let rows: Vec<Tensor> = (0..3)
            .map(|i| Tensor::new(cfg.hidden_shape().to_vec(), s.row(i).to_vec()).unwrap())
            .collect();
        let permuted = Tensor::stack(&[rows[2].clone(), rows[0].clone(), rows[1].clone()]).unwrap();
        let head_of = |t: &Tensor| {
            let mut tape = Tape::new();
            let p = net.bind_frozen(&mut tape);
            let v = tape.constant(t.clone());
            let o = net.head(&mut tape, &p, v).unwrap();
            tape.value(o).clone()
        };
        let a = head_of(&s);
        let b = head_of(&permuted);
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(2));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = small();
        let net = Network::init(cfg.clone(), 6).unwrap();
        assert!(matches!(
            net.logits(&Tensor::zeros(&[1, 3, 6, 6])),
            Err(Error::Shape { .. })
        ));
        let wrong = vec![Tensor::zeros(&[1])];
        assert!(Network::from_parameters(cfg, wrong).is_err());
    }
}
