//! Deep Q-network baseline that learns directly from frames.
//!
//! Two front ends share the dense head `dense (hidden) -> dense (4 Q values)`:
//! `conv-pool` is conv 5x5 -> sigmoid -> 2x2 max pool with sigmoid hidden
//! units; `patch` embeds each 5x5 tile with one shared dense layer (a
//! stride-5 convolution) and uses ReLU throughout. One online and one target
//! copy, uniform replay.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::frames_to_tensor;
use crate::env::{Action, Frame};
use crate::error::{Error, Result};
use crate::nn::{
    maxpool2, maxpool2_backward, read_params, relu_backward, relu_inplace, sigmoid_backward, sigmoid_inplace, tiles,
    write_params, Adam, Conv2d, Dense, InputGrad, LayerParams, Real, Tensor,
};
use crate::qlearning::argmax_random;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    ConvPool,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TdLoss {
    Squared,
    /// Squared below 1, linear above.
    Huber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub architecture: Architecture,
    pub features: usize,
    /// Convolution kernel for `conv-pool`, tile side for `patch`.
    pub kernel: usize,
    pub hidden: usize,
    pub optimizer: Optimizer,
    pub loss: TdLoss,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Online steps between target copies.
    pub sync_every: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Epochs over which epsilon falls linearly from start to end.
    pub anneal_epochs: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Transitions stored before the first update.
    pub learning_starts: usize,
    /// Environment steps per gradient step.
    pub train_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            architecture: Architecture::Patch,
            features: 8,
            kernel: 5,
            hidden: 64,
            optimizer: Optimizer::Adam,
            loss: TdLoss::Huber,
            replay_capacity: 10_000,
            batch_size: 32,
            sync_every: 250,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            anneal_epochs: 200,
            learning_rate: 0.001,
            gamma: 0.9,
            learning_starts: 500,
            train_every: 1,
        }
    }
}

impl DqnConfig {
    /// The simplified network from the original comparison: sigmoid
    /// conv-pool front end, plain SGD on the squared TD error.
    pub fn conv_pool() -> Self {
        DqnConfig {
            architecture: Architecture::ConvPool,
            optimizer: Optimizer::Sgd,
            loss: TdLoss::Squared,
            learning_rate: 0.01,
            ..DqnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dqn.features", self.features),
            ("dqn.kernel", self.kernel),
            ("dqn.hidden", self.hidden),
            ("dqn.replay_capacity", self.replay_capacity),
            ("dqn.batch_size", self.batch_size),
            ("dqn.sync_every", self.sync_every),
            ("dqn.train_every", self.train_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.architecture == Architecture::ConvPool && self.kernel % 2 == 0 {
            return Err(Error::Config("dqn.kernel must be odd for conv-pool".into()));
        }
        if self.batch_size > self.replay_capacity {
            return Err(Error::Config("dqn.batch_size exceeds dqn.replay_capacity".into()));
        }
        for (name, e) in [("dqn.epsilon_start", self.epsilon_start), ("dqn.epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("dqn.gamma must lie in [0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("dqn.learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Exploration rate during training epoch `epoch` (0-based).
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 || epoch >= self.anneal_epochs {
            return self.epsilon_end;
        }
        let t = epoch as f64 / self.anneal_epochs as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

enum Front<T> {
    ConvPool(Conv2d<T>),
    Patch(Dense<T>, usize),
}

impl<T: Real> Front<T> {
    fn params(&self) -> &LayerParams<T> {
        match self {
            Front::ConvPool(c) => &c.params,
            Front::Patch(d, _) => &d.params,
        }
    }

    fn params_mut(&mut self) -> &mut LayerParams<T> {
        match self {
            Front::ConvPool(c) => &mut c.params,
            Front::Patch(d, _) => &mut d.params,
        }
    }
}

struct Cache<T> {
    front_out: Tensor<T>,
    /// Pool argmax and pooled shape, `conv-pool` only.
    pool: Option<(Vec<u32>, Vec<usize>)>,
    hidden: Tensor<T>,
}

/// One parameter set of the Q network.
pub struct QNet<T = f32> {
    front: Front<T>,
    hidden: Dense<T>,
    out: Dense<T>,
    width: usize,
    height: usize,
    cache: Option<Cache<T>>,
}

impl<T: Real> Clone for QNet<T> {
    fn clone(&self) -> Self {
        let [f, h, o] = self.layers();
        QNet::from_layers(f.clone(), h.clone(), o.clone(), self.width, self.height).expect("shapes already valid")
    }
}

impl<T: Real> QNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &DqnConfig, width: usize, height: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let (front, cells) = match cfg.architecture {
            Architecture::ConvPool => {
                if width % 2 != 0 || height % 2 != 0 {
                    return Err(Error::InvalidArgument(format!("frame {width}x{height} must have even sides")));
                }
                (Front::ConvPool(Conv2d::new(1, cfg.features, k, rng)), (width / 2) * (height / 2))
            }
            Architecture::Patch => {
                if width % k != 0 || height % k != 0 {
                    return Err(Error::InvalidArgument(format!("frame {width}x{height} does not split into {k}x{k} tiles")));
                }
                (Front::Patch(Dense::new(k * k, cfg.features, rng), k), (width / k) * (height / k))
            }
        };
        let hidden = Dense::new(cfg.features * cells, cfg.hidden, rng);
        let out = Dense::new(cfg.hidden, Action::COUNT, rng);
        Ok(QNet {
            front,
            hidden,
            out,
            width,
            height,
            cache: None,
        })
    }

    /// Rebuilds a network from its layers; a rank-4 first weight means
    /// `conv-pool`, rank 2 means `patch`.
    pub fn from_layers(
        front: LayerParams<T>,
        hidden: LayerParams<T>,
        out: LayerParams<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let hidden = Dense::from_params(hidden)?;
        let out = Dense::from_params(out)?;
        let (front, front_ok) = if front.weight.shape().len() == 4 {
            let conv = Conv2d::from_params(front)?;
            let ok = conv.in_channels() == 1
                && width % 2 == 0
                && height % 2 == 0
                && hidden.inputs() == conv.out_channels() * (width / 2) * (height / 2);
            (Front::ConvPool(conv), ok)
        } else {
            let dense = Dense::from_params(front)?;
            let k = (dense.inputs() as f64).sqrt().round() as usize;
            let ok = k > 0
                && k * k == dense.inputs()
                && width % k == 0
                && height % k == 0
                && hidden.inputs() == dense.outputs() * (width / k) * (height / k);
            (Front::Patch(dense, k), ok)
        };
        if !(front_ok && out.inputs() == hidden.outputs() && out.outputs() == Action::COUNT) {
            return Err(Error::format("q network", "layer shapes do not chain"));
        }
        Ok(QNet {
            front,
            hidden,
            out,
            width,
            height,
            cache: None,
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self.front {
            Front::ConvPool(_) => Architecture::ConvPool,
            Front::Patch(..) => Architecture::Patch,
        }
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn layers(&self) -> [&LayerParams<T>; 3] {
        [self.front.params(), &self.hidden.params, &self.out.params]
    }

    pub fn layers_mut(&mut self) -> [&mut LayerParams<T>; 3] {
        [self.front.params_mut(), &mut self.hidden.params, &mut self.out.params]
    }

    pub fn cast<U: Real>(&self) -> QNet<U> {
        let [f, h, o] = self.layers();
        QNet::from_layers(f.cast(), h.cast(), o.cast(), self.width, self.height).expect("shapes already valid")
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_rank(4)?;
        let s = x.shape();
        if s[1] != 1 || s[2] != self.height || s[3] != self.width {
            return Err(Error::ShapeMismatch {
                expected: vec![s[0], 1, self.height, self.width],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    fn activate(&self, t: &mut Tensor<T>) {
        match self.front {
            Front::ConvPool(_) => sigmoid_inplace(t),
            Front::Patch(..) => relu_inplace(t),
        }
    }

    fn activate_backward(&self, y: &Tensor<T>, g: &mut Tensor<T>) -> Result<()> {
        match self.front {
            Front::ConvPool(_) => sigmoid_backward(y, g),
            Front::Patch(..) => relu_backward(y, g),
        }
    }

    /// Front end and the flattened features fed to the hidden layer.
    fn run_front(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Option<(Vec<u32>, Vec<usize>)>, Tensor<T>)> {
        let n = x.shape()[0];
        let mut a = match &mut self.front {
            Front::ConvPool(c) if train => c.forward(x)?,
            Front::ConvPool(c) => c.infer(x)?,
            Front::Patch(d, k) if train => d.forward(&tiles(x, *k)?)?,
            Front::Patch(d, k) => d.infer(&tiles(x, *k)?)?,
        };
        self.activate(&mut a);
        match self.front {
            Front::ConvPool(_) => {
                let (p, idx) = maxpool2(&a)?;
                let shape = p.shape().to_vec();
                let flat = p.reshape(&[n, self.hidden.inputs()])?;
                Ok((a, Some((idx, shape)), flat))
            }
            Front::Patch(..) => {
                let flat = a.clone().reshape(&[n, self.hidden.inputs()])?;
                Ok((a, None, flat))
            }
        }
    }

    /// Q values `[N, 4]` for a batch `[N, 1, H, W]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let n = x.shape()[0];
        let mut a = match &self.front {
            Front::ConvPool(c) => c.infer(x)?,
            Front::Patch(d, k) => d.infer(&tiles(x, *k)?)?,
        };
        self.activate(&mut a);
        let flat = match self.front {
            Front::ConvPool(_) => maxpool2(&a)?.0.reshape(&[n, self.hidden.inputs()])?,
            Front::Patch(..) => a.reshape(&[n, self.hidden.inputs()])?,
        };
        let mut h = self.hidden.infer(&flat)?;
        self.activate(&mut h);
        self.out.infer(&h)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (front_out, pool, flat) = self.run_front(x, true)?;
        let mut h = self.hidden.forward(&flat)?;
        self.activate(&mut h);
        let q = self.out.forward(&h)?;
        self.cache = Some(Cache {
            front_out,
            pool,
            hidden: h,
        });
        Ok(q)
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the Q
    /// values of the last `forward`.
    pub fn backward(&mut self, gq: &Tensor<T>) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let mut gh = self.out.backward(gq, InputGrad::Full)?.expect("input gradient requested");
        self.activate_backward(&cache.hidden, &mut gh)?;
        let gflat = self.hidden.backward(&gh, InputGrad::Full)?.expect("input gradient requested");
        let mut ga = match &cache.pool {
            Some((idx, shape)) => maxpool2_backward(&gflat.reshape(shape)?, idx, cache.front_out.shape())?,
            None => gflat.reshape(cache.front_out.shape())?,
        };
        self.activate_backward(&cache.front_out, &mut ga)?;
        match &mut self.front {
            Front::ConvPool(c) => c.backward(&ga, InputGrad::Skip)?,
            Front::Patch(d, _) => d.backward(&ga, InputGrad::Skip)?,
        };
        Ok(())
    }

    pub fn sgd_step(&mut self, lr: T) {
        for layer in self.layers_mut() {
            layer.sgd_step(lr);
        }
    }

    pub fn zero_grad(&mut self) {
        for layer in self.layers_mut() {
            layer.zero_grad();
        }
    }
}

impl QNet<f32> {
    pub fn q_values(&self, frame: &Frame) -> Result<[f32; Action::COUNT]> {
        let q = self.infer(&self.frame_tensor(&[frame])?)?;
        let mut out = [0.0; Action::COUNT];
        out.copy_from_slice(q.data());
        Ok(out)
    }

    fn frame_tensor(&self, frames: &[&Frame]) -> Result<Tensor<f32>> {
        for f in frames {
            if (f.width, f.height) != (self.width, self.height) {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.height, self.width],
                    actual: vec![f.height, f.width],
                });
            }
        }
        Ok(frames_to_tensor(frames))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(&mut file, &self.layers())?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut layers = read_params(&mut file)?;
        if layers.len() != 3 {
            return Err(Error::format("q network file", format!("expected 3 layers, found {}", layers.len())));
        }
        let out = layers.pop().unwrap();
        let hidden = layers.pop().unwrap();
        let conv = layers.pop().unwrap();
        QNet::from_layers(conv, hidden, out, width, height)
    }
}

/// Online network plus the frozen copy used for bootstrap targets.
#[derive(Clone)]
pub struct QNetwork {
    pub online: QNet<f32>,
    pub target: QNet<f32>,
    adam: Option<Adam<f32>>,
    updates: usize,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(cfg: &DqnConfig, width: usize, height: usize, rng: &mut R) -> Result<Self> {
        Ok(QNetwork::from_online(QNet::new(cfg, width, height, rng)?, cfg.optimizer))
    }

    /// Fresh optimizer state around existing weights.
    pub fn from_online(online: QNet<f32>, optimizer: Optimizer) -> Self {
        let adam = (optimizer == Optimizer::Adam).then(|| Adam::new(&online.layers()));
        QNetwork {
            target: online.clone(),
            online,
            adam,
            updates: 0,
        }
    }

    /// Gradient steps taken so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    fn apply_gradients(&mut self, lr: f64) {
        match &mut self.adam {
            Some(adam) => adam.step(&mut self.online.layers_mut(), lr),
            None => self.online.sgd_step(lr as f32),
        }
        self.updates += 1;
    }
}

/// Epsilon-greedy over the online network's outputs; ties broken uniformly.
pub fn act<R: Rng + ?Sized>(net: &QNetwork, frame: &Frame, epsilon: f64, rng: &mut R) -> Result<Action> {
    let q = net.online.q_values(frame)?;
    if epsilon > 0.0 && rng.gen_bool(epsilon.min(1.0)) {
        return Ok(Action::from_index(rng.gen_range(0..Action::COUNT)));
    }
    let values: Vec<f64> = q.iter().map(|&v| f64::from(v)).collect();
    Ok(Action::from_index(argmax_random(&values, rng)))
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub frame: Arc<Frame>,
    pub action: Action,
    pub reward: f32,
    pub next: Arc<Frame>,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer; the oldest entry is overwritten when full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < n || self.items.is_empty() {
            return Err(Error::UnderfullBuffer {
                have: self.items.len(),
                need: n.max(1),
            });
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.items.len())).collect())
    }
}

/// One gradient step on the mean TD loss of a uniform minibatch. Returns
/// the batch loss before the step.
pub fn train_step<R: Rng + ?Sized>(net: &mut QNetwork, buffer: &ReplayBuffer, cfg: &DqnConfig, rng: &mut R) -> Result<f64> {
    let idx = buffer.sample_indices(cfg.batch_size, rng)?;
    let batch: Vec<&Transition> = idx.iter().map(|&i| &buffer.items[i]).collect();
    let states: Vec<&Frame> = batch.iter().map(|t| t.frame.as_ref()).collect();
    let nexts: Vec<&Frame> = batch.iter().map(|t| t.next.as_ref()).collect();

    let next_q = net.target.infer(&net.target.frame_tensor(&nexts)?)?;
    let q = net.online.forward(&net.online.frame_tensor(&states)?)?;

    let n = batch.len() as f64;
    let mut grad = Tensor::zeros(&[batch.len(), Action::COUNT]);
    let mut loss = 0.0f64;
    for (b, t) in batch.iter().enumerate() {
        let row = &next_q.data()[b * Action::COUNT..][..Action::COUNT];
        let best = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let y = if t.terminal {
            f64::from(t.reward)
        } else {
            f64::from(t.reward) + cfg.gamma * f64::from(best)
        };
        let a = t.action.index();
        let d = f64::from(q.data()[b * Action::COUNT + a]) - y;
        let (l, g) = match cfg.loss {
            TdLoss::Squared => (d * d, 2.0 * d),
            TdLoss::Huber if d.abs() <= 1.0 => (0.5 * d * d, d),
            TdLoss::Huber => (d.abs() - 0.5, d.signum()),
        };
        loss += l;
        grad.data_mut()[b * Action::COUNT + a] = (g / n) as f32;
    }
    net.online.backward(&grad)?;
    net.apply_gradients(cfg.learning_rate);
    Ok(loss / n)
}
