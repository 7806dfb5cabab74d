use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{EvalNetwork, NetworkConfig};
use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Model};
use crate::optim::{cosine_lr, Sgd};
use crate::params::{ParamGroup, ParamStore, StoreSnapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 70, batch_size: 16, lr0: 0.007, momentum: 0.9, weight_decay: 3e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a freshly initialized network; initialization draws from stream 0 of `seed`.
pub fn build_network(config: NetworkConfig, seed: u64) -> Result<(EvalNetwork, ParamStore)> {
    let mut store = ParamStore::new();
    let net = EvalNetwork::new(config, &mut store, &mut rng_for(seed, 0))?;
    Ok((net, store))
}

/// Trains every weight in `store` with cross-entropy, SGD with momentum and a per-epoch cosine
/// schedule. On a non-finite loss the store keeps the last finite-loss state and a numeric
/// error is returned.
pub fn train_model(
    model: &dyn Model,
    store: &mut ParamStore,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if indices.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let ids = store.ids(ParamGroup::Weights);
    store.set_requires_grad(ParamGroup::Weights, true);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut rng = rng_for(cfg.seed, epoch as u64 + 1);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in shuffled_batches(indices, cfg.batch_size, &mut rng) {
            let (x, labels) = data.batch(&batch)?;
            store.zero_grad();
            let mut ctx = Ctx::new(store, true);
            let input = ctx.tape.constant(x);
            let logits = model.forward(&mut ctx, input)?;
            let loss = ctx.tape.cross_entropy(logits, &labels)?;
            let value = ctx.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss became {value} in epoch {epoch}")));
            }
            let k = model.num_classes();
            for (row, &label) in ctx.value(logits).data().chunks(k).zip(&labels) {
                let pred = (0..k).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                correct += usize::from(pred == label);
            }
            ctx.backward(loss)?;
            opt.step(store, &ids, lr)?;
            loss_sum += value * batch.len() as f64;
        }
        let n = indices.len() as f64;
        history.push(EpochStats { epoch, loss: loss_sum / n, accuracy: correct as f64 / n, lr });
    }
    Ok(history)
}

pub const MODEL_CHECKPOINT_FORMAT: &str = "emonas-model-checkpoint";
pub const MODEL_CHECKPOINT_VERSION: u32 = 1;

/// A trained evaluation network: its configuration, all tensors and the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub params: StoreSnapshot,
    pub history: Vec<EpochStats>,
}

impl ModelCheckpoint {
    pub fn new(network: NetworkConfig, train: TrainConfig, store: &ParamStore, history: Vec<EpochStats>) -> Self {
        Self {
            format: MODEL_CHECKPOINT_FORMAT.into(),
            version: MODEL_CHECKPOINT_VERSION,
            network,
            train,
            params: store.snapshot(),
            history,
        }
    }

    /// Rebuilds the network and loads the stored tensors into a fresh store.
    pub fn restore(&self) -> Result<(EvalNetwork, ParamStore)> {
        let (net, mut store) = build_network(self.network.clone(), self.train.seed)?;
        store.restore(&self.params)?;
        Ok((net, store))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format != MODEL_CHECKPOINT_FORMAT || ckpt.version != MODEL_CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
