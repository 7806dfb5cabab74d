//! Bilevel search: alternate architecture steps on validation batches with weight steps on
//! training batches, then derive the discrete genotype.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Model};
use crate::optim::{cosine_lr, GradientDescent, Sgd};
use crate::params::{ParamGroup, ParamId, ParamStore, StoreSnapshot};
use crate::search_space::{Genotype, SuperNet, SuperNetConfig};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    /// Half-width of the uniform noise added to the zero α initialization.
    pub alpha_noise: f64,
    pub n_cells: usize,
    pub n_nodes: usize,
    pub init_channels: usize,
    pub seed: u64,
    /// Use the unrolled (second-order) architecture gradient instead of the first-order one.
    pub second_order: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr0: 0.007,
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_noise: 1e-3,
            n_cells: 5,
            n_nodes: 7,
            init_channels: 16,
            seed: 0,
            second_order: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        // a zero architecture rate freezes α and leaves plain weight training
        let rates_ok = self.lr0.is_finite() && self.lr0 > 0.0 && self.alpha_lr.is_finite() && self.alpha_lr >= 0.0;
        if self.epochs == 0 || self.batch_size == 0 || !rates_ok {
            return Err(Error::Config(format!(
                "search needs epochs >= 1, batch_size >= 1, lr0 > 0 and alpha_lr >= 0: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.alpha_noise < 0.0 {
            return Err(Error::Config(format!("invalid momentum/decay/noise in {self:?}")));
        }
        Ok(())
    }
}

/// One NDJSON record of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub genotype_snapshot: Genotype,
}

/// Everything needed to continue a search bit-for-bit.
pub struct SearchState {
    pub config: SearchConfig,
    pub net: SuperNet,
    pub store: ParamStore,
    pub epoch: usize,
    pub w_opt: Sgd,
    pub alpha_opt: GradientDescent,
}

pub const CHECKPOINT_FORMAT: &str = "emonas-search-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-epoch batch order is drawn from stream `epoch + 1` of the seed; stream 0 initializes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: SearchConfig,
    pub in_channels: usize,
    pub num_classes: usize,
    pub epoch: usize,
    pub rng: RngState,
    pub params: StoreSnapshot,
    pub w_opt: Sgd,
    pub alpha_opt: GradientDescent,
}

impl SearchCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
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

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SearchState {
    pub fn new(config: SearchConfig, in_channels: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = epoch_rng(config.seed, 0);
        let net_cfg = SuperNetConfig {
            n_cells: config.n_cells,
            n_nodes: config.n_nodes,
            channels: config.init_channels,
            in_channels,
            num_classes,
        };
        let net = SuperNet::new(net_cfg, &mut store, &mut rng, config.alpha_noise)?;
        let w_opt = Sgd::new(config.momentum, config.weight_decay);
        let alpha_opt = GradientDescent { lr: config.alpha_lr };
        Ok(Self { config, net, store, epoch: 0, w_opt, alpha_opt })
    }

    pub fn checkpoint(&self) -> SearchCheckpoint {
        SearchCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            in_channels: self.net.config.in_channels,
            num_classes: self.net.config.num_classes,
            epoch: self.epoch,
            rng: RngState { seed: self.config.seed, next_stream: self.epoch as u64 + 1 },
            params: self.store.snapshot(),
            w_opt: self.w_opt.clone(),
            alpha_opt: self.alpha_opt.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &SearchCheckpoint) -> Result<Self> {
        let mut state = Self::new(ckpt.config.clone(), ckpt.in_channels, ckpt.num_classes)?;
        state.store.restore(&ckpt.params)?;
        state.epoch = ckpt.epoch;
        state.w_opt = ckpt.w_opt.clone();
        state.alpha_opt = ckpt.alpha_opt.clone();
        Ok(state)
    }

    pub fn genotype(&self) -> Genotype {
        self.net.genotype(&self.store)
    }

    /// Checks that every parameter belongs to exactly one optimizer.
    pub fn audit_disjoint(&self) -> Result<()> {
        audit_disjoint(&self.store)
    }
}

pub fn audit_disjoint(store: &ParamStore) -> Result<()> {
    let w = store.ids(ParamGroup::Weights);
    let a = store.ids(ParamGroup::Architecture);
    if w.len() + a.len() != store.len() || w.iter().any(|id| a.contains(id)) {
        return Err(Error::Config("weight and architecture parameter sets overlap".into()));
    }
    Ok(())
}

/// Zeroes gradients, enables them only for `group` (or all groups when `None`), and
/// backpropagates the loss built by `f`. Returns the loss value.
fn loss_and_grad(
    store: &mut ParamStore,
    group: Option<ParamGroup>,
    f: &mut dyn FnMut(&mut Ctx) -> Result<Var>,
) -> Result<f64> {
    store.zero_grad();
    store.set_requires_grad(ParamGroup::Weights, group != Some(ParamGroup::Architecture));
    store.set_requires_grad(ParamGroup::Architecture, group != Some(ParamGroup::Weights));
    let mut ctx = Ctx::new(store, true);
    let loss = f(&mut ctx)?;
    let value = ctx.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value}")));
    }
    ctx.backward(loss)?;
    Ok(value)
}

fn values(store: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| store.get(id).value.clone()).collect()
}

fn set_values(store: &mut ParamStore, ids: &[ParamId], vals: &[Tensor]) {
    for (&id, v) in ids.iter().zip(vals) {
        store.get_mut(id).value = v.clone();
    }
}

fn grads(store: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| store.get(id).grad.clone()).collect()
}

/// Optimizers and step sizes for one alternating update.
pub struct BilevelOptimizers<'a> {
    pub w_opt: &'a mut Sgd,
    pub alpha_opt: &'a GradientDescent,
    pub lr: f64,
    pub second_order: bool,
}

/// One alternating update: an architecture step on `val_loss`, then a weight step on
/// `train_loss` with the architecture frozen. Returns `(train_loss, val_loss)` as evaluated
/// before the respective step.
pub fn bilevel_step(
    store: &mut ParamStore,
    opts: BilevelOptimizers,
    val_loss: &mut dyn FnMut(&mut Ctx) -> Result<Var>,
    train_loss: &mut dyn FnMut(&mut Ctx) -> Result<Var>,
) -> Result<(f64, f64)> {
    let w_ids = store.ids(ParamGroup::Weights);
    let a_ids = store.ids(ParamGroup::Architecture);

    let w_before = values(store, &w_ids);
    let val = if opts.second_order {
        unrolled_arch_grad(store, &w_ids, &a_ids, opts.lr, opts.w_opt.weight_decay, val_loss, train_loss)?
    } else {
        loss_and_grad(store, Some(ParamGroup::Architecture), val_loss)?
    };
    opts.alpha_opt.step(store, &a_ids)?;
    if values(store, &w_ids) != w_before {
        return Err(Error::Config("architecture step modified network weights".into()));
    }

    let a_before = values(store, &a_ids);
    let train = loss_and_grad(store, Some(ParamGroup::Weights), train_loss)?;
    opts.w_opt.step(store, &w_ids, opts.lr)?;
    if values(store, &a_ids) != a_before {
        return Err(Error::Config("weight step modified architecture parameters".into()));
    }

    store.set_requires_grad(ParamGroup::Weights, true);
    store.set_requires_grad(ParamGroup::Architecture, true);
    Ok((train, val))
}

/// Architecture gradient through one virtual SGD step `w' = w − ξ(∇w λ_train + λ·w)`, with the
/// mixed second derivative approximated by central differences around `w`.
fn unrolled_arch_grad(
    store: &mut ParamStore,
    w_ids: &[ParamId],
    a_ids: &[ParamId],
    xi: f64,
    weight_decay: f64,
    val_loss: &mut dyn FnMut(&mut Ctx) -> Result<Var>,
    train_loss: &mut dyn FnMut(&mut Ctx) -> Result<Var>,
) -> Result<f64> {
    let w0 = values(store, w_ids);
    loss_and_grad(store, Some(ParamGroup::Weights), train_loss)?;
    for &id in w_ids {
        let p = store.get_mut(id);
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= xi * (g + weight_decay * *v);
        }
    }
    let val = loss_and_grad(store, None, val_loss)?;
    let mut arch_grad = grads(store, a_ids);
    let dw = grads(store, w_ids);
    let norm = dw.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        let eps = 0.01 / norm;
        let mut probe = |sign: f64, store: &mut ParamStore| -> Result<Vec<Tensor>> {
            for ((&id, w), d) in w_ids.iter().zip(&w0).zip(&dw) {
                let p = store.get_mut(id);
                for ((v, &w), &d) in p.value.data_mut().iter_mut().zip(w.data()).zip(d.data()) {
                    *v = w + sign * eps * d;
                }
            }
            loss_and_grad(store, Some(ParamGroup::Architecture), train_loss)?;
            Ok(grads(store, a_ids))
        };
        let plus = probe(1.0, store)?;
        let minus = probe(-1.0, store)?;
        for ((g, p), m) in arch_grad.iter_mut().zip(&plus).zip(&minus) {
            for ((g, p), m) in g.data_mut().iter_mut().zip(p.data()).zip(m.data()) {
                *g -= xi * (p - m) / (2.0 * eps);
            }
        }
    }
    set_values(store, w_ids, &w0);
    for (&id, g) in a_ids.iter().zip(arch_grad) {
        store.get_mut(id).grad = g;
    }
    Ok(val)
}

fn batch_loss<'n>(net: &'n SuperNet, x: Tensor, labels: Vec<usize>) -> impl FnMut(&mut Ctx) -> Result<Var> + 'n {
    move |ctx: &mut Ctx| {
        let input = ctx.tape.constant(x.clone());
        let logits = net.forward(ctx, input)?;
        ctx.tape.cross_entropy(logits, &labels)
    }
}

/// Runs one epoch of paired architecture/weight steps and advances the epoch counter.
pub fn bilevel_epoch(state: &mut SearchState, data: &Dataset, train: &[usize], val: &[usize]) -> Result<EpochRecord> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!(
            "bilevel epoch needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let cfg = state.config.clone();
    let lr = cosine_lr(state.epoch, cfg.epochs.max(state.epoch + 1), cfg.lr0)?;
    let mut rng = epoch_rng(cfg.seed, state.epoch as u64 + 1);
    let train_batches = shuffled_batches(train, cfg.batch_size, &mut rng);
    let val_batches = shuffled_batches(val, cfg.batch_size, &mut rng);
    let (mut train_sum, mut val_sum) = (0.0, 0.0);
    let steps = train_batches.len().min(val_batches.len());
    for (tb, vb) in train_batches.iter().zip(&val_batches) {
        let (tx, tl) = data.batch(tb)?;
        let (vx, vl) = data.batch(vb)?;
        let mut val_fn = batch_loss(&state.net, vx, vl);
        let mut train_fn = batch_loss(&state.net, tx, tl);
        let opts = BilevelOptimizers {
            w_opt: &mut state.w_opt,
            alpha_opt: &state.alpha_opt,
            lr,
            second_order: cfg.second_order,
        };
        let (t, v) = bilevel_step(&mut state.store, opts, &mut val_fn, &mut train_fn)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {}: {msg}", state.epoch)),
                other => other,
            })?;
        train_sum += t;
        val_sum += v;
    }
    state.audit_disjoint()?;
    let record = EpochRecord {
        epoch: state.epoch,
        train_loss: train_sum / steps as f64,
        val_loss: val_sum / steps as f64,
        lr,
        genotype_snapshot: state.genotype(),
    };
    state.epoch += 1;
    Ok(record)
}

/// Mean cross-entropy over `indices` using batch statistics, without touching `store`.
pub fn split_loss(net: &SuperNet, store: &ParamStore, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    let mut scratch = store.clone();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let mut ctx = Ctx::new(&mut scratch, true);
        let loss = batch_loss(net, x, labels)(&mut ctx)?;
        total += ctx.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / indices.len().max(1) as f64)
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub log: Vec<EpochRecord>,
    /// Validation-split loss before the first step and after the last epoch.
    pub val_loss_init: f64,
    pub val_loss_final: f64,
    pub state: SearchState,
}

/// Runs the configured number of epochs on a weight split and an architecture split.
///
/// With `out_dir`, appends each epoch to `search_log.ndjson`, rewrites `checkpoint.json`
/// after every epoch and writes the final `genotype.json`.
pub fn run_search(
    config: SearchConfig,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    out_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    let (channels, _, _) = data
        .input_shape()
        .ok_or_else(|| Error::Dataset("search dataset is empty".into()))?;
    let state = SearchState::new(config, channels, data.num_classes())?;
    continue_search(state, data, train, val, out_dir)
}

/// Continues `state` (fresh or restored from a checkpoint) up to its configured epoch count.
pub fn continue_search(
    mut state: SearchState,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    out_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    let bs = state.config.batch_size;
    let val_loss_init = split_loss(&state.net, &state.store, data, val, bs)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("search_log.ndjson");
            let file = if state.epoch == 0 {
                File::create(&path)
            } else {
                fs::OpenOptions::new().append(true).create(true).open(&path)
            };
            Some((file.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    while state.epoch < state.config.epochs {
        let record = bilevel_epoch(&mut state, data, train, val)?;
        if let (Some((file, path)), Some(dir)) = (log_file.as_mut(), out_dir) {
            writeln!(file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&*path, e))?;
            state.checkpoint().save(&dir.join("checkpoint.json"))?;
        }
        log.push(record);
    }
    let val_loss_final = split_loss(&state.net, &state.store, data, val, bs)?;
    let genotype = state.genotype();
    if let Some(dir) = out_dir {
        genotype.save(&dir.join("genotype.json"))?;
    }
    Ok(SearchOutcome { genotype, log, val_loss_init, val_loss_final, state })
}
