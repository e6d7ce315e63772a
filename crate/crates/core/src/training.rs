//! ERM and TALLY training loops.
//!
//! Training is a step machine: [`Trainer::step`] performs one optimizer step
//! and, on the last step of an epoch, the epoch-end work (prototype commit,
//! validation loss, log line). Everything the next step depends on lives in
//! [`TrainState`], which is what checkpoints capture.
//!
//! Epochs before `warm_start_epochs` are plain ERM on empirically sampled
//! batches. From then on each step draws `batch_size` pairs with the
//! configured sampler and trains the post-split layers on augmented hidden
//! representations labelled with the first element of each pair. Prototype
//! sums are collected from every forward pass; the first commit happens at
//! the end of epoch `warm_start_epochs - 1`, and augmentation in epoch `t`
//! always reads the bank committed at the end of epoch `t - 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_pairs, decompose_values, sample_beta, AugmentOptions, MixCoefficients, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::par;
use crate::prototypes::{PrototypeBank, DEFAULT_GAMMA};
use crate::sampling::{draw_pair, draw_single, draw_warmstart_batch, GroupIndex, SamplerStrategy};
use crate::synthdata::Dataset;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stream id of the training RNG (network init uses its own seed stream).
const TRAIN_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
}

/// Which prototype interpolations are active after warm start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeUse {
    /// Both: `lambda_c ~ Beta(alpha_c)`, `lambda_d ~ Beta(alpha_d)`.
    Full,
    /// Neither: `lambda_c = lambda_d = 1`.
    None,
    /// Class prototypes only: `lambda_d = 1`.
    ClassOnly,
    /// Domain statistics only: `lambda_c = 1`.
    DomainOnly,
}

/// How the per-epoch prototype estimates are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeEstimation {
    /// Running means over the decompositions of the epoch's training batches.
    Streaming,
    /// A separate pass over the whole training set at epoch end.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Examples per ERM step; pairs per augmented step.
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warm_start_epochs: usize,
    /// Prototype momentum.
    pub gamma: f64,
    pub alpha_c: f64,
    pub alpha_d: f64,
    pub loss: LossKind,
    /// Pair sampler after warm start.
    pub sampler: SamplerStrategy,
    /// Example sampler for ERM steps (warm start and plain ERM).
    pub erm_sampler: SamplerStrategy,
    pub prototypes: PrototypeUse,
    pub prototype_estimation: PrototypeEstimation,
    pub detach_nuisance: bool,
    /// Probability that a pair keeps its original representation instead of
    /// the augmented one.
    pub mix_original: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 32,
            epochs: 15,
            steps_per_epoch: 50,
            warm_start_epochs: 7,
            gamma: DEFAULT_GAMMA,
            alpha_c: 0.5,
            alpha_d: 0.5,
            loss: LossKind::CrossEntropy,
            sampler: SamplerStrategy::Selective,
            erm_sampler: SamplerStrategy::Empirical,
            prototypes: PrototypeUse::Full,
            prototype_estimation: PrototypeEstimation::Streaming,
            detach_nuisance: false,
            mix_original: 0.0,
            eps: DEFAULT_EPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch_size and steps_per_epoch must be >= 1".into()));
        }
        if self.warm_start_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warm start ({}) exceeds total epochs ({})",
                self.warm_start_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("prototype momentum must be in [0, 1)".into()));
        }
        if !(self.alpha_c > 0.0) || !(self.alpha_d > 0.0) {
            return Err(Error::Config("alpha_c and alpha_d must be > 0".into()));
        }
        if let LossKind::Focal { gamma } = self.loss {
            if !(gamma >= 0.0) {
                return Err(Error::Config("focal gamma must be >= 0".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_original) {
            return Err(Error::Config("mix_original must be in [0, 1]".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }

    /// The same configuration with augmentation disabled (warm start covers
    /// every epoch).
    pub fn as_erm(&self) -> TrainConfig {
        TrainConfig {
            warm_start_epochs: self.epochs,
            ..self.clone()
        }
    }

    fn augments(&self) -> bool {
        self.warm_start_epochs < self.epochs
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub sampler: String,
    pub augmented: bool,
    pub seed: u64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub network: Network,
    pub bank: PrototypeBank,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub epoch_loss_sum: f64,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(network_config: NetworkConfig, num_domains: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::init(network_config.clone(), config.seed)?;
        let [c, h, w] = network_config.hidden_shape();
        let bank = PrototypeBank::new(network_config.num_classes, num_domains, c, h * w, config.gamma, true)?;
        let velocity = network.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(TrainState {
            config,
            network,
            bank,
            velocity,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            rng,
            epoch_loss_sum: 0.0,
            log: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }
}

/// Drives a [`TrainState`] over a training set.
pub struct Trainer<'a> {
    train: &'a Dataset,
    val: Option<&'a Dataset>,
    index: GroupIndex,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, val: Option<&'a Dataset>, network_config: NetworkConfig, config: TrainConfig) -> Result<Self> {
        if network_config.num_classes != train.num_classes
            || network_config.input_shape() != train.example_shape()
        {
            return Err(Error::Config(
                "network configuration does not match the dataset".into(),
            ));
        }
        let state = TrainState::new(network_config, train.num_domains, config)?;
        Self::resume(train, val, state)
    }

    /// Continue from a saved state.
    pub fn resume(train: &'a Dataset, val: Option<&'a Dataset>, state: TrainState) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        state.config.validate()?;
        let index = GroupIndex::build(&train.labels(), &train.domains(), train.num_classes, train.num_domains)?;
        if state.config.augments() {
            index.check(state.config.sampler)?;
        }
        Ok(Trainer {
            train,
            val,
            index,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn augmenting_epoch(&self) -> bool {
        self.state.epoch >= self.state.config.warm_start_epochs
    }

    /// Whether prototype sums matter: some commit will still happen.
    fn collects_prototypes(&self) -> bool {
        let cfg = &self.state.config;
        cfg.augments() && cfg.prototype_estimation == PrototypeEstimation::Streaming
    }

    /// Run one optimizer step (plus epoch-end work if it closes an epoch).
    /// Returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        if self.state.is_finished() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let loss = if self.augmenting_epoch() {
            if self.state.step_in_epoch == 0 {
                self.ensure_bank_ready()?;
            }
            self.augmented_step()?
        } else {
            self.erm_step()?
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {loss} at epoch {} step {}",
                self.state.epoch, self.state.step_in_epoch
            )));
        }
        self.state.epoch_loss_sum += loss;
        self.state.step_in_epoch += 1;
        self.state.global_step += 1;
        if self.state.step_in_epoch == self.state.config.steps_per_epoch {
            self.end_epoch()?;
        }
        Ok(loss)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.state.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    fn loss(&self, tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        match self.state.config.loss {
            LossKind::CrossEntropy => tape.softmax_cross_entropy(logits, labels),
            LossKind::Focal { gamma } => tape.focal_loss(logits, labels, gamma),
        }
    }

    fn erm_step(&mut self) -> Result<f64> {
        let cfg = &self.state.config;
        let idx = match cfg.erm_sampler {
            SamplerStrategy::Empirical => draw_warmstart_batch(&self.index, cfg.batch_size, &mut self.state.rng)?,
            other => (0..cfg.batch_size)
                .map(|_| draw_single(&self.index, other, &mut self.state.rng))
                .collect::<Result<Vec<_>>>()?,
        };
        let labels: Vec<usize> = idx.iter().map(|i| self.train.examples[*i].y).collect();
        let mut tape = Tape::new();
        let params = self.state.network.bind(&mut tape);
        let x = tape.constant(self.train.batch(&idx));
        let s = self.state.network.features(&mut tape, &params, x)?;
        let logits = self.state.network.head(&mut tape, &params, s)?;
        let loss = self.loss(&mut tape, logits, &labels)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()?;
        self.apply_update(&tape, &params);
        if self.collects_prototypes() {
            let (z, mu, sigma) = decompose_values(tape.value(s), self.state.config.eps)?;
            let domains: Vec<usize> = idx.iter().map(|i| self.train.examples[*i].d).collect();
            self.state.bank.accumulate_batch(&z, &mu, &sigma, &labels, &domains)?;
        }
        Ok(value)
    }

    fn draw_coefficients(&mut self) -> Result<MixCoefficients> {
        let cfg = &self.state.config;
        let (use_c, use_d) = match cfg.prototypes {
            PrototypeUse::Full => (true, true),
            PrototypeUse::None => (false, false),
            PrototypeUse::ClassOnly => (true, false),
            PrototypeUse::DomainOnly => (false, true),
        };
        let (alpha_c, alpha_d) = (cfg.alpha_c, cfg.alpha_d);
        let lambda_c = if use_c { sample_beta(alpha_c, &mut self.state.rng)? } else { 1.0 };
        let lambda_d = if use_d { sample_beta(alpha_d, &mut self.state.rng)? } else { 1.0 };
        Ok(MixCoefficients { lambda_c, lambda_d })
    }

    fn augmented_step(&mut self) -> Result<f64> {
        let batch = self.state.config.batch_size;
        let mut pairs = Vec::with_capacity(batch);
        let mut coeffs = Vec::with_capacity(batch);
        for _ in 0..batch {
            pairs.push(draw_pair(&self.index, self.state.config.sampler, &mut self.state.rng)?);
            coeffs.push(self.draw_coefficients()?);
        }
        let mix = self.state.config.mix_original;
        let keep_original: Vec<bool> = if mix > 0.0 {
            (0..batch).map(|_| self.state.rng.random_bool(mix)).collect()
        } else {
            vec![false; batch]
        };
        let ex = |i: usize| &self.train.examples[i];
        let (idx_i, idx_j): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let y_i: Vec<usize> = idx_i.iter().map(|i| ex(*i).y).collect();
        let d_i: Vec<usize> = idx_i.iter().map(|i| ex(*i).d).collect();
        let y_j: Vec<usize> = idx_j.iter().map(|j| ex(*j).y).collect();
        let d_j: Vec<usize> = idx_j.iter().map(|j| ex(*j).d).collect();

        let mut tape = Tape::new();
        let params = self.state.network.bind(&mut tape);
        let x_i = tape.constant(self.train.batch(&idx_i));
        let x_j = tape.constant(self.train.batch(&idx_j));
        let s_i = self.state.network.features(&mut tape, &params, x_i)?;
        let s_j = self.state.network.features(&mut tape, &params, x_j)?;
        let opts = AugmentOptions {
            eps: self.state.config.eps,
            detach_nuisance: self.state.config.detach_nuisance,
        };
        let aug = augment_pairs(&mut tape, s_i, &y_i, s_j, &d_j, &self.state.bank, &coeffs, &opts)?;
        let input = if keep_original.iter().any(|k| *k) {
            let take_aug: Vec<f64> = keep_original.iter().map(|k| if *k { 0.0 } else { 1.0 }).collect();
            let take_orig: Vec<f64> = take_aug.iter().map(|a| 1.0 - a).collect();
            let a = tape.row_scale(aug.s, take_aug)?;
            let o = tape.row_scale(s_i, take_orig)?;
            tape.add(a, o)?
        } else {
            aug.s
        };
        let logits = self.state.network.head(&mut tape, &params, input)?;
        let loss = self.loss(&mut tape, logits, &aug.labels)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()?;
        self.apply_update(&tape, &params);

        if self.collects_prototypes() {
            for (dec, ys, ds) in [(aug.dec_i, &y_i, &d_i), (aug.dec_j, &y_j, &d_j)] {
                self.state.bank.accumulate_batch(
                    tape.value(dec.z),
                    tape.value(dec.mu),
                    tape.value(dec.sigma),
                    ys,
                    ds,
                )?;
            }
        }
        Ok(value)
    }

    /// SGD with momentum and L2 weight decay:
    /// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
    fn apply_update(&mut self, tape: &Tape, params: &[Var]) {
        let cfg = &self.state.config;
        let (lr, mom, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let net_params = self.state.network.parameters_mut();
        for ((p, v), var) in net_params.iter_mut().zip(self.state.velocity.iter_mut()).zip(params) {
            let grad = tape.grad(*var);
            let g = grad.as_ref().map(Tensor::data);
            let pd = p.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                vd[k] = mom * vd[k] + gk + wd * pd[k];
                pd[k] -= lr * vd[k];
            }
        }
    }

    /// Classes and present domains whose bank entries augmentation may read.
    fn bank_ready(&self) -> bool {
        let bank = &self.state.bank;
        (0..bank.num_classes()).all(|c| bank.is_class_initialized(c))
            && self.index.present_domains().iter().all(|d| bank.is_domain_initialized(*d))
    }

    fn ensure_bank_ready(&mut self) -> Result<()> {
        if self.state.config.prototypes == PrototypeUse::None || self.bank_ready() {
            return Ok(());
        }
        // No commit has covered every entry yet (e.g. no warm start): seed the
        // missing entries from a full pass with the current network.
        let mut fresh = self.state.bank.clone();
        fresh.clear_accumulators();
        estimate_full_pass(&self.state.network, self.train, &mut fresh, self.state.config.eps)?;
        let estimates = fresh;
        self.state.bank.adopt_missing(&estimates)?;
        Ok(())
    }

    fn end_epoch(&mut self) -> Result<()> {
        let cfg = self.state.config.clone();
        let closing = self.state.epoch;
        if cfg.augments() {
            if closing + 1 >= cfg.warm_start_epochs {
                if cfg.prototype_estimation == PrototypeEstimation::Full {
                    self.state.bank.clear_accumulators();
                    estimate_full_pass(&self.state.network, self.train, &mut self.state.bank, cfg.eps)?;
                }
                self.state.bank.commit_epoch();
            } else {
                self.state.bank.clear_accumulators();
            }
        }
        let val_loss = match self.val {
            Some(v) if !v.is_empty() => Some(mean_cross_entropy(&self.state.network, v)?),
            _ => None,
        };
        self.state.log.push(EpochLog {
            epoch: closing,
            train_loss: self.state.epoch_loss_sum / cfg.steps_per_epoch as f64,
            val_loss,
            lr: cfg.learning_rate,
            sampler: if closing >= cfg.warm_start_epochs {
                cfg.sampler.name().to_string()
            } else {
                cfg.erm_sampler.name().to_string()
            },
            augmented: closing >= cfg.warm_start_epochs,
            seed: cfg.seed,
        });
        self.state.epoch += 1;
        self.state.step_in_epoch = 0;
        self.state.epoch_loss_sum = 0.0;
        Ok(())
    }
}

/// Chunk size for no-grad passes over a dataset.
const EVAL_CHUNK: usize = 128;

/// Hidden representations of every example, computed chunk-parallel and
/// returned in dataset order.
pub fn feature_chunks(network: &Network, data: &Dataset) -> Result<Vec<(Vec<usize>, Tensor)>> {
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    par::map_slice(&chunks, |idx| network.feature_values(&data.batch(idx)).map(|s| (idx.clone(), s)))
        .into_iter()
        .collect()
}

/// Logits of every example in dataset order, `[N, K]`.
pub fn dataset_logits(network: &Network, data: &Dataset) -> Result<Tensor> {
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = par::map_slice(&chunks, |idx| network.logits(&data.batch(idx)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let k = network.config().num_classes;
    let data_out: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len(), k], data_out)
}

/// Accumulate the decomposition of every training example into `bank`.
pub fn estimate_full_pass(network: &Network, data: &Dataset, bank: &mut PrototypeBank, eps: f64) -> Result<()> {
    for (idx, s) in feature_chunks(network, data)? {
        let (z, mu, sigma) = decompose_values(&s, eps)?;
        let ys: Vec<usize> = idx.iter().map(|i| data.examples[*i].y).collect();
        let ds: Vec<usize> = idx.iter().map(|i| data.examples[*i].d).collect();
        bank.accumulate_batch(&z, &mu, &sigma, &ys, &ds)?;
    }
    Ok(())
}

/// Mean cross-entropy of `network` over a dataset.
pub fn mean_cross_entropy(network: &Network, data: &Dataset) -> Result<f64> {
    let logits = dataset_logits(network, data)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.softmax_cross_entropy(l, &data.labels())?;
    tape.value(loss).item()
}

/// Plain ERM: every epoch is a warm-start epoch.
pub fn train_erm(train: &Dataset, val: Option<&Dataset>, network_config: NetworkConfig, config: &TrainConfig) -> Result<TrainState> {
    let mut trainer = Trainer::new(train, val, network_config, config.as_erm())?;
    trainer.run()?;
    Ok(trainer.into_state())
}

/// Warm start followed by training on augmented representations.
pub fn train_tally(train: &Dataset, val: Option<&Dataset>, network_config: NetworkConfig, config: &TrainConfig) -> Result<TrainState> {
    let mut trainer = Trainer::new(train, val, network_config, config.clone())?;
    trainer.run()?;
    Ok(trainer.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec};

    fn tiny_data() -> (Dataset, Dataset) {
        let spec = DatasetSpec {
            head_count: 12,
            image_side: 6,
            channels: 2,
            imbalance_ratio: 4.0,
            val_per_cell: 1,
            test_per_cell: 1,
            noise_std: 0.3,
            ..DatasetSpec::new(3, 2)
        };
        let s = generate(&spec).unwrap();
        (s.train, s.val)
    }

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            hidden_channels: 3,
            image_side: 6,
            ..NetworkConfig::new(2, 3)
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 3,
            steps_per_epoch: 3,
            warm_start_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        assert!(TrainConfig { warm_start_epochs: 4, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { loss: LossKind::Focal { gamma: -1.0 }, ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (train, val) = tiny_data();
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny_cfg() };
        let init = Network::init(tiny_net(), cfg.seed).unwrap();
        let state = train_tally(&train, Some(&val), tiny_net(), &cfg).unwrap();
        assert_eq!(state.network, init);
    }

    #[test]
    fn log_has_one_line_per_epoch() {
        let (train, val) = tiny_data();
        let state = train_tally(&train, Some(&val), tiny_net(), &tiny_cfg()).unwrap();
        assert_eq!(state.log.len(), 3);
        assert!(!state.log[0].augmented);
        assert!(state.log[1].augmented);
        assert_eq!(state.log[1].sampler, "selective");
        assert!(state.log.iter().all(|l| l.val_loss.is_some()));
        assert_eq!(state.bank.commits(), 3);
    }

    #[test]
    fn no_warm_start_seeds_bank_from_full_pass() {
        let (train, _) = tiny_data();
        let cfg = TrainConfig { warm_start_epochs: 0, ..tiny_cfg() };
        let state = train_tally(&train, None, tiny_net(), &cfg).unwrap();
        assert!(state.is_finished());
    }

    #[test]
    fn ablation_arms_and_options_run() {
        let (train, _) = tiny_data();
        for prototypes in [PrototypeUse::None, PrototypeUse::ClassOnly, PrototypeUse::DomainOnly] {
            let cfg = TrainConfig { prototypes, ..tiny_cfg() };
            train_tally(&train, None, tiny_net(), &cfg).unwrap();
        }
        let cfg = TrainConfig {
            detach_nuisance: true,
            mix_original: 0.5,
            prototype_estimation: PrototypeEstimation::Full,
            loss: LossKind::Focal { gamma: 2.0 },
            sampler: SamplerStrategy::Algorithm1Uniform,
            erm_sampler: SamplerStrategy::GroupBalanced,
            ..tiny_cfg()
        };
        train_tally(&train, None, tiny_net(), &cfg).unwrap();
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let (train, _) = tiny_data();
        let net = NetworkConfig { num_classes: 5, ..tiny_net() };
        assert!(matches!(Trainer::new(&train, None, net, tiny_cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (train, _) = tiny_data();
        let cfg = TrainConfig { learning_rate: 1e200, momentum: 0.0, ..tiny_cfg() };
        let err = train_erm(&train, None, tiny_net(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}
