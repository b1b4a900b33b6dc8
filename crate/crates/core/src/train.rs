//! Training procedures: standard training, adversarial training on crafted
//! examples only, the mixed clean/adversarial objective, loss-margin
//! adaptation, and the dynamic perturbation-adaptive method with its
//! synchronization loss — plus the Adam optimizer and early stopping.

use crate::attack::{
    iterative_attack, iterative_attack_with_eps, rescale_batch, AdvBatch, AttackSpec,
};
use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    classifier_branch, declare_param_nodes, one_hot, predict_labels, predict_proba, ArchSpec,
    BranchTaps, Classifier, ModelParams, PROB_FLOOR,
};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Stream tags for deriving independent random streams.
mod tag {
    pub const SHUFFLE: u64 = 1;
    pub const ATTACK: u64 = 2;
    pub const REATTACK: u64 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Std,
    At,
    Sat,
    Amat,
    Dpaat,
    /// Perturbation adaptation only (ablation arm D-A).
    DpaatAOnly,
    /// Synchronization loss only (ablation arm D-B).
    DpaatBOnly,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "std" => Method::Std,
            "at" => Method::At,
            "sat" => Method::Sat,
            "amat" => Method::Amat,
            "dpaat" => Method::Dpaat,
            "dpaat_a" | "dpaat_a_only" => Method::DpaatAOnly,
            "dpaat_b" | "dpaat_b_only" => Method::DpaatBOnly,
            _ => return Err(Error::Contract(format!("unknown training method '{s}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Std => "STD",
            Method::At => "AT",
            Method::Sat => "SAT",
            Method::Amat => "AMAT",
            Method::Dpaat => "DPAAT",
            Method::DpaatAOnly => "DPAAT-A",
            Method::DpaatBOnly => "DPAAT-B",
        }
    }

    fn uses_attack(&self) -> bool {
        !matches!(self, Method::Std)
    }

    fn uses_clean_branch(&self) -> bool {
        !matches!(self, Method::At)
    }

    fn uses_sync(&self) -> bool {
        matches!(self, Method::Dpaat | Method::DpaatBOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncVariant {
    /// The published formula, evaluated verbatim (maximal when the two
    /// distributions agree).
    PaperLiteral,
    /// ln 2 minus the literal value: zero when the distributions agree.
    /// This matches the stated intent and is the default.
    Jsd,
}

/// How adapted budgets turn into new adversarial examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regenerate {
    /// Rescale the existing perturbation direction (cheap, default).
    Rescale,
    /// Re-run the full iterative attack at the per-example budget.
    Reattack,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    /// Mixing weight of the adversarial loss in the joint objective.
    pub alpha: Real,
    /// Weight of the synchronization loss.
    pub beta: Real,
    /// Loss-margin threshold; measured from data when absent.
    pub xi: Option<Real>,
    /// Budget increment applied below the loss margin.
    pub delta_eps: Real,
    pub sync_variant: SyncVariant,
    pub lr: Real,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs during which only dense layers receive updates.
    pub warmup_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub attack: AttackSpec,
    /// Floor on adapted per-example budgets.
    pub eps_min: Real,
    /// Cap on the adaptation length.
    pub gamma_cap: Real,
    pub regenerate: Regenerate,
}

impl TrainConfig {
    /// Protocol defaults: Adam at 3e-4, batch 32, alpha 0.5, 7-step L2 PGD
    /// with budget 0.3 and step 0.15, patience 5.
    pub fn new(method: Method) -> Self {
        let attack = AttackSpec::pgd(crate::attack::Norm::L2, 0.3, 0.15, 7);
        let eps = attack.epsilon;
        TrainConfig {
            method,
            alpha: 0.5,
            beta: 1.0,
            xi: None,
            delta_eps: 0.1 * eps,
            sync_variant: SyncVariant::Jsd,
            lr: 0.0003,
            batch_size: 32,
            epochs: 50,
            warmup_epochs: 0,
            patience: 5,
            seed: 1,
            attack,
            eps_min: 0.05 * eps,
            gamma_cap: 2.0 * eps,
            regenerate: Regenerate::Rescale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Contract(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Contract(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if self.eps_min > self.attack.epsilon {
            return Err(Error::Contract(format!(
                "eps_min {} exceeds attack epsilon {}",
                self.eps_min, self.attack.epsilon
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Contract(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Contract(
                "batch_size, epochs and patience must be positive".into(),
            ));
        }
        self.attack.validate()
    }
}

/// Per-batch adaptation state: loss deltas, their mean, the adaptation
/// lengths and the adapted budgets.
#[derive(Debug, Clone)]
pub struct BatchLossStats {
    pub delta_l: Vec<Real>,
    pub delta_l_avg: Real,
    pub gamma: Vec<Real>,
    pub eps_adapted: Vec<Real>,
    pub fragile: Vec<bool>,
}

/// Per-example adversarial-minus-clean loss deltas and their batch mean.
/// `gamma` and `eps_adapted` stay empty until [`adapt_epsilon`] fills them.
pub fn batch_loss_stats(clean: &[Real], adv: &[Real]) -> Result<BatchLossStats> {
    if clean.is_empty() || clean.len() != adv.len() {
        return Err(Error::Contract(format!(
            "need equal nonempty loss vectors, got {} and {}",
            clean.len(),
            adv.len()
        )));
    }
    let delta_l: Vec<Real> = adv.iter().zip(clean).map(|(&a, &c)| a - c).collect();
    let delta_l_avg = delta_l.iter().sum::<Real>() / delta_l.len() as Real;
    let fragile = delta_l.iter().map(|&d| d > delta_l_avg).collect();
    Ok(BatchLossStats {
        delta_l,
        delta_l_avg,
        gamma: Vec::new(),
        eps_adapted: Vec::new(),
        fragile,
    })
}

/// Floor for the adaptation-length denominator; the batch mean can be near
/// zero or negative early in training.
pub const DELTA_AVG_FLOOR: Real = 1e-8;

/// Per-example budget adaptation: fragile examples (delta above the mean)
/// shrink by the adaptation length, stable ones grow, with a cap on the
/// length and a floor on the final budget.
pub fn adapt_epsilon<'a>(
    stats: &'a mut BatchLossStats,
    delta_norms: &[Real],
    base_eps: Real,
    eps_min: Real,
    gamma_cap: Real,
) -> Result<&'a [Real]> {
    if delta_norms.len() != stats.delta_l.len() {
        return Err(Error::Contract(format!(
            "{} norms for {} loss deltas",
            delta_norms.len(),
            stats.delta_l.len()
        )));
    }
    let denom = stats.delta_l_avg.max(DELTA_AVG_FLOOR);
    stats.gamma.clear();
    stats.eps_adapted.clear();
    for (i, &dl) in stats.delta_l.iter().enumerate() {
        let gamma = (base_eps * (dl - stats.delta_l_avg).abs() / denom).min(gamma_cap);
        let eps = if dl > stats.delta_l_avg {
            delta_norms[i] - gamma
        } else {
            delta_norms[i] + gamma
        };
        stats.gamma.push(gamma);
        stats.eps_adapted.push(eps.max(eps_min));
    }
    Ok(&stats.eps_adapted)
}

/// Loss-margin budget rule: grow by `delta_eps` below the threshold,
/// otherwise average the base budget with the measured perturbation norm.
pub fn amat_epsilon(
    adv_loss: &[Real],
    delta_norms: &[Real],
    base_eps: Real,
    xi: Real,
    delta_eps: Real,
) -> Vec<Real> {
    adv_loss
        .iter()
        .zip(delta_norms)
        .map(|(&l, &n)| {
            if l < xi {
                base_eps + delta_eps
            } else {
                0.5 * (base_eps + n)
            }
        })
        .collect()
}

/// Per-example synchronization loss between clean and adversarial
/// probability rows. Elements are floored at `PROB_FLOOR` before logs;
/// rows must sum to 1 within 1e-5.
pub fn sync_loss(y_ori: &Tensor, y_adv: &Tensor, variant: SyncVariant) -> Result<Vec<Real>> {
    if y_ori.shape() != y_adv.shape() || y_ori.rank() != 2 {
        return Err(Error::Shape(format!(
            "probability tensors {:?} vs {:?}",
            y_ori.shape(),
            y_adv.shape()
        )));
    }
    let cols = y_ori.shape()[1];
    let ln2 = (2.0 as Real).ln();
    let mut out = Vec::with_capacity(y_ori.shape()[0]);
    for (p_row, q_row) in y_ori
        .data()
        .chunks_exact(cols)
        .zip(y_adv.data().chunks_exact(cols))
    {
        for (name, row) in [("first", p_row), ("second", q_row)] {
            let s: Real = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "{name} operand row sums to {s}, not a probability vector"
                )));
            }
        }
        let mut acc = 0.0;
        for (&p0, &q0) in p_row.iter().zip(q_row) {
            let p = p0.max(PROB_FLOOR);
            let q = q0.max(PROB_FLOOR);
            let s = p + q;
            acc += p * (p / s).ln() + q * (q / s).ln();
        }
        let literal = -0.5 * acc;
        out.push(match variant {
            SyncVariant::PaperLiteral => literal,
            SyncVariant::Jsd => (ln2 - literal).max(0.0),
        });
    }
    Ok(out)
}

/// Combine loss components per training method.
pub fn total_loss(
    method: Method,
    clean: Option<Real>,
    adv: Option<Real>,
    sync: Option<Real>,
    alpha: Real,
    beta: Real,
) -> Result<Real> {
    let need = |v: Option<Real>, what: &str| {
        v.ok_or_else(|| Error::Contract(format!("{} requires the {what} loss", method.name())))
    };
    Ok(match method {
        Method::Std => need(clean, "clean")?,
        Method::At => need(adv, "adversarial")?,
        Method::Sat | Method::DpaatAOnly => {
            alpha * need(adv, "adversarial")? + (1.0 - alpha) * need(clean, "clean")?
        }
        Method::Amat => 0.5 * (need(adv, "adversarial")? + need(clean, "clean")?),
        Method::Dpaat | Method::DpaatBOnly => {
            alpha * need(adv, "adversarial")?
                + (1.0 - alpha) * need(clean, "clean")?
                + beta * need(sync, "synchronization")?
        }
    })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPS: Real = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: Real,
) -> Result<()> {
    if grads.len() != params.entries.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.entries.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (name, tensor)) in params.entries.iter_mut().enumerate() {
        if grads[i].shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "gradient for '{name}' has shape {:?}, parameter is {:?}",
                grads[i].shape(),
                tensor.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = tensor.data_mut();
        for c in 0..p.len() {
            let g = grads[i].data()[c];
            m[c] = ADAM_BETA1 * m[c] + (1.0 - ADAM_BETA1) * g;
            v[c] = ADAM_BETA2 * v[c] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[c] / bc1;
            let vhat = v[c] / bc2;
            p[c] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Early stopping: stop once the best value has not improved for `patience`
/// consecutive epochs. Epochs are numbered from 1; ties keep the first best.
pub fn early_stop(history: &[Real], patience: usize) -> (bool, usize) {
    if history.is_empty() {
        return (false, 0);
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    let stop = history.len() - (best + 1) >= patience;
    (stop, best + 1)
}

// ---------------------------------------------------------------------------
// Epoch telemetry
// ---------------------------------------------------------------------------

/// Per-epoch telemetry. Loss components not part of the epoch's objective
/// are reported as 0.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub clean_loss: Real,
    pub adv_loss: Real,
    pub sync_loss: Real,
    pub fragile_frac: Real,
    pub val_gacc: Real,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub reports: Vec<EpochReport>,
    /// 1-based epoch whose validation accuracy was best (0 without validation).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

// ---------------------------------------------------------------------------
// Training graph
// ---------------------------------------------------------------------------

struct TrainGraph {
    graph: Graph,
    clean: Option<BranchTaps>,
    adv: Option<BranchTaps>,
    sync_mean: Option<NodeId>,
    /// Number of image inputs bound before the one-hot input.
    image_inputs: usize,
}

/// Clamp a probability node at `PROB_FLOOR` using relu composition.
fn clamp_probs(g: &mut Graph, probs: NodeId) -> Result<NodeId> {
    let neg = g.scalar_const(-PROB_FLOOR);
    let pos = g.scalar_const(PROB_FLOOR);
    let shifted = g.add(probs, neg)?;
    let lifted = g.relu(shifted);
    g.add(lifted, pos)
}

fn build_train_graph(
    arch: &ArchSpec,
    batch: usize,
    method: Method,
    alpha: Real,
    beta: Real,
    variant: SyncVariant,
) -> Result<TrainGraph> {
    let [c, h, w] = arch.input_shape;
    let mut g = Graph::new();
    let x_clean = if method.uses_clean_branch() {
        Some(g.input("x", vec![batch, c, h, w]))
    } else {
        None
    };
    let x_adv = if method.uses_attack() {
        Some(g.input("x_adv", vec![batch, c, h, w]))
    } else {
        None
    };
    let onehot = g.input("onehot", vec![batch, arch.classes]);
    let params = declare_param_nodes(&mut g, arch);

    let clean = match x_clean {
        Some(x) => Some(classifier_branch(&mut g, arch, batch, x, onehot, &params)?),
        None => None,
    };
    let adv = match x_adv {
        Some(x) => Some(classifier_branch(&mut g, arch, batch, x, onehot, &params)?),
        None => None,
    };

    let mut sync_mean = None;
    if method.uses_sync() {
        let (cb, ab) = (clean.as_ref().unwrap(), adv.as_ref().unwrap());
        let p = clamp_probs(&mut g, cb.probs)?;
        let q = clamp_probs(&mut g, ab.probs)?;
        let s = g.add(p, q)?;
        let lp = g.log(p);
        let lq = g.log(q);
        let ls = g.log(s);
        let neg1 = g.scalar_const(-1.0);
        let nls = g.mul(ls, neg1)?;
        let dp = g.add(lp, nls)?;
        let dq = g.add(lq, nls)?;
        let tp = g.mul(p, dp)?;
        let tq = g.mul(q, dq)?;
        let tsum = g.add(tp, tq)?;
        let ones = g.constant(Tensor::full(&[arch.classes, 1], 1.0));
        let rows = g.matmul(tsum, ones, false, false)?;
        let rows = g.reshape(rows, vec![batch])?;
        let neg_half = g.scalar_const(-0.5);
        let literal = g.mul(rows, neg_half)?;
        let vec_node = match variant {
            SyncVariant::PaperLiteral => literal,
            SyncVariant::Jsd => {
                let neg = g.mul(literal, neg1)?;
                let ln2 = g.scalar_const((2.0 as Real).ln());
                let shifted = g.add(neg, ln2)?;
                g.relu(shifted) // guards the 0 bound against rounding
            }
        };
        sync_mean = Some(g.mean(vec_node));
    }

    let total = match method {
        Method::Std => clean.as_ref().unwrap().ce_mean,
        Method::At => adv.as_ref().unwrap().ce_mean,
        Method::Sat | Method::DpaatAOnly | Method::Amat => {
            let aw = if method == Method::Amat { 0.5 } else { alpha };
            let ca = g.scalar_const(aw);
            let cc = g.scalar_const(1.0 - aw);
            let wa = g.mul(adv.as_ref().unwrap().ce_mean, ca)?;
            let wc = g.mul(clean.as_ref().unwrap().ce_mean, cc)?;
            g.add(wa, wc)?
        }
        Method::Dpaat | Method::DpaatBOnly => {
            let ca = g.scalar_const(alpha);
            let cc = g.scalar_const(1.0 - alpha);
            let cb = g.scalar_const(beta);
            let wa = g.mul(adv.as_ref().unwrap().ce_mean, ca)?;
            let wc = g.mul(clean.as_ref().unwrap().ce_mean, cc)?;
            let base = g.add(wa, wc)?;
            let ws = g.mul(sync_mean.unwrap(), cb)?;
            g.add(base, ws)?
        }
    };
    g.set_output(total);

    let image_inputs = x_clean.is_some() as usize + x_adv.is_some() as usize;
    Ok(TrainGraph {
        graph: g,
        clean,
        adv,
        sync_mean,
        image_inputs,
    })
}

impl TrainGraph {
    fn bindings(&self, x: &Tensor, x_adv: Option<&Tensor>, hot: Tensor) -> Vec<Tensor> {
        let mut v = Vec::with_capacity(self.image_inputs + 1);
        if self.clean.is_some() {
            v.push(x.clone());
        }
        if self.adv.is_some() {
            v.push(x_adv.expect("adv branch requires x_adv").clone());
        }
        v.push(hot);
        v
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub config: TrainConfig,
    arch: ArchSpec,
    opt: Option<OptimizerState>,
    attack_calls: usize,
    xi: Option<Real>,
    root: Rng,
}

struct BatchOutcome {
    clean_loss: Option<Real>,
    adv_loss: Option<Real>,
    sync_loss: Option<Real>,
    fragile_frac: Option<Real>,
}

impl Trainer {
    pub fn new(arch: ArchSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        Ok(Trainer {
            xi: config.xi,
            config,
            arch,
            opt: None,
            attack_calls: 0,
            root,
        })
    }

    pub fn attack_calls(&self) -> usize {
        self.attack_calls
    }

    /// Threshold in force for the loss-margin rule, if measured yet.
    pub fn xi(&self) -> Option<Real> {
        self.xi
    }

    /// Run one epoch over shuffled mini-batches, updating `params` in place.
    pub fn train_epoch(
        &mut self,
        params: &mut ModelParams,
        train: &Dataset,
        val: Option<&Dataset>,
        epoch: usize,
    ) -> Result<EpochReport> {
        self.epoch_inner(params, train, val, epoch, false)
    }

    fn ensure_xi(&mut self, params: &ModelParams, train: &Dataset, epoch: usize) -> Result<Real> {
        if let Some(xi) = self.xi {
            return Ok(xi);
        }
        // Median per-example clean loss on the first batch of the first
        // processed epoch, measured before that epoch's updates.
        let order = self
            .root
            .fork(&[tag::SHUFFLE, epoch as u64])
            .permutation(train.len());
        let take = self.config.batch_size.min(train.len());
        let batch = train.select(&order[..take], train.split_tag);
        let probs = predict_proba(&self.arch, params, &batch.images)?;
        let (losses, _) = crate::model::cross_entropy(&probs, &batch.labels)?;
        let mut sorted = losses;
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("losses are finite"));
        let n = sorted.len();
        let xi = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        self.xi = Some(xi);
        Ok(xi)
    }

    fn epoch_inner(
        &mut self,
        params: &mut ModelParams,
        train: &Dataset,
        val: Option<&Dataset>,
        epoch: usize,
        warmup: bool,
    ) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let start = std::time::Instant::now();
        if self.opt.is_none() {
            self.opt = Some(OptimizerState::new(params));
        }
        if self.config.method == Method::Amat {
            self.ensure_xi(params, train, epoch)?;
        }

        let cfg = self.config.clone();
        let order = self
            .root
            .fork(&[tag::SHUFFLE, epoch as u64])
            .permutation(train.len());

        let mut sums = (0.0, 0.0, 0.0, 0.0); // clean, adv, sync, fragile
        let mut batches = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.select(chunk, train.split_tag);
            let outcome = self.run_batch(params, &batch, epoch, batch_idx, warmup)?;
            sums.0 += outcome.clean_loss.unwrap_or(0.0);
            sums.1 += outcome.adv_loss.unwrap_or(0.0);
            sums.2 += outcome.sync_loss.unwrap_or(0.0);
            sums.3 += outcome.fragile_frac.unwrap_or(0.0);
            batches += 1.0;
        }

        let val_gacc = match val {
            Some(v) if !v.is_empty() => {
                let pred = predict_labels(&self.arch, params, &v.images)?;
                let hit = pred.iter().zip(&v.labels).filter(|(a, b)| a == b).count();
                hit as Real / v.len() as Real
            }
            _ => 0.0,
        };

        Ok(EpochReport {
            epoch,
            clean_loss: sums.0 / batches,
            adv_loss: sums.1 / batches,
            sync_loss: sums.2 / batches,
            fragile_frac: sums.3 / batches,
            val_gacc,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn craft(
        &mut self,
        params: &ModelParams,
        x: &Tensor,
        y: &[usize],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<AdvBatch> {
        self.attack_calls += 1;
        let target = Classifier {
            arch: &self.arch,
            params,
        };
        let stream = self
            .root
            .fork(&[tag::ATTACK, epoch as u64, batch_idx as u64]);
        iterative_attack(&target, x, y, &self.config.attack, &stream)
    }

    fn run_batch(
        &mut self,
        params: &mut ModelParams,
        batch: &Dataset,
        epoch: usize,
        batch_idx: usize,
        warmup: bool,
    ) -> Result<BatchOutcome> {
        let cfg = self.config.clone();
        let m = batch.len();
        let x = &batch.images;
        let y = &batch.labels;
        let mut graph = build_train_graph(
            &self.arch,
            m,
            cfg.method,
            cfg.alpha,
            cfg.beta,
            cfg.sync_variant,
        )?;
        let hot = one_hot(y, self.arch.classes)?;

        // Step 1: craft at the fixed budget.
        let crafted = if cfg.method.uses_attack() {
            Some(self.craft(params, x, y, epoch, batch_idx)?)
        } else {
            None
        };

        // Step 2: adapt per-example budgets and regenerate.
        let (x_adv, fragile_frac) = match (&crafted, cfg.method) {
            (Some(adv), Method::Dpaat | Method::DpaatAOnly) => {
                graph.graph.forward(
                    &graph.bindings(x, Some(&adv.x_adv), hot.clone()),
                    &params.tensors(),
                )?;
                let clean_l = graph
                    .graph
                    .value(graph.clean.as_ref().unwrap().ce_vec)?
                    .data()
                    .to_vec();
                let adv_l = graph
                    .graph
                    .value(graph.adv.as_ref().unwrap().ce_vec)?
                    .data()
                    .to_vec();
                let mut stats = batch_loss_stats(&clean_l, &adv_l)?;
                adapt_epsilon(
                    &mut stats,
                    &adv.delta_norms,
                    cfg.attack.epsilon,
                    cfg.eps_min,
                    cfg.gamma_cap,
                )?;
                let fragile = stats.fragile.iter().filter(|&&f| f).count() as Real / m as Real;
                let new_adv =
                    self.regenerate(params, x, y, adv, &stats.eps_adapted, epoch, batch_idx)?;
                (Some(new_adv), Some(fragile))
            }
            (Some(adv), Method::Amat) => {
                graph.graph.forward(
                    &graph.bindings(x, Some(&adv.x_adv), hot.clone()),
                    &params.tensors(),
                )?;
                let adv_l = graph
                    .graph
                    .value(graph.adv.as_ref().unwrap().ce_vec)?
                    .data()
                    .to_vec();
                let xi = self.xi.expect("xi measured at epoch start");
                let eps = amat_epsilon(
                    &adv_l,
                    &adv.delta_norms,
                    cfg.attack.epsilon,
                    xi,
                    cfg.delta_eps,
                );
                let new_adv = self.regenerate(params, x, y, adv, &eps, epoch, batch_idx)?;
                (Some(new_adv), None)
            }
            (Some(adv), _) => (Some(adv.x_adv.clone()), None),
            (None, _) => (None, None),
        };

        // Step 3: objective forward/backward on the final examples.
        graph
            .graph
            .forward(&graph.bindings(x, x_adv.as_ref(), hot), &params.tensors())?;
        let read = |g: &Graph, n: Option<NodeId>| -> Result<Option<Real>> {
            n.map(|id| g.value(id).and_then(|t| t.item())).transpose()
        };
        let clean_loss = read(&graph.graph, graph.clean.as_ref().map(|b| b.ce_mean))?;
        let adv_loss = read(&graph.graph, graph.adv.as_ref().map(|b| b.ce_mean))?;
        let sync_loss = read(&graph.graph, graph.sync_mean)?;

        let mut grads = graph.graph.backward(&Tensor::scalar(1.0))?;

        // Step 4: optimize (dense layers only during warmup).
        if warmup {
            let dense = self.arch.dense_param_names();
            for (i, (name, _)) in params.entries.iter().enumerate() {
                if !dense.iter().any(|d| d == name) {
                    grads.params[i] = Tensor::zeros(grads.params[i].shape());
                }
            }
        }
        let opt = self.opt.as_mut().expect("optimizer initialized");
        adam_step(params, &grads.params, opt, cfg.lr)?;

        Ok(BatchOutcome {
            clean_loss,
            adv_loss,
            sync_loss,
            fragile_frac,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn regenerate(
        &mut self,
        params: &ModelParams,
        x: &Tensor,
        y: &[usize],
        adv: &AdvBatch,
        eps: &[Real],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<Tensor> {
        match self.config.regenerate {
            Regenerate::Rescale => {
                let (t, _) = rescale_batch(
                    x,
                    adv,
                    self.config.attack.norm,
                    eps,
                    self.config.attack.clamp,
                )?;
                Ok(t)
            }
            Regenerate::Reattack => {
                self.attack_calls += 1;
                let target = Classifier {
                    arch: &self.arch,
                    params,
                };
                let stream = self
                    .root
                    .fork(&[tag::REATTACK, epoch as u64, batch_idx as u64]);
                let out =
                    iterative_attack_with_eps(&target, x, y, &self.config.attack, eps, &stream)?;
                Ok(out.x_adv)
            }
        }
    }

    /// Full training loop: optional dense-only warmup epochs, then the main
    /// phase, stopping once validation accuracy has not improved for
    /// `patience` epochs. The parameters at stopping time are returned;
    /// `best_epoch` reports where validation peaked.
    pub fn fit(
        &mut self,
        params: ModelParams,
        train: &Dataset,
        val: Option<&Dataset>,
    ) -> Result<FitResult> {
        let mut params = params;
        let cfg = self.config.clone();
        let mut reports = Vec::new();
        let mut history: Vec<Real> = Vec::new();
        let mut best_epoch = 0;
        let mut stopped_early = false;

        let total = cfg.warmup_epochs + cfg.epochs;
        for epoch in 1..=total {
            let warm = epoch <= cfg.warmup_epochs;
            let report = self.epoch_inner(&mut params, train, val, epoch, warm)?;
            let gacc = report.val_gacc;
            reports.push(report);
            if warm {
                continue;
            }
            if val.is_some() {
                history.push(gacc);
                let (stop, best) = early_stop(&history, cfg.patience);
                best_epoch = cfg.warmup_epochs + best;
                if stop {
                    stopped_early = true;
                    break;
                }
            }
        }

        Ok(FitResult {
            params,
            reports,
            best_epoch,
            stopped_early,
        })
    }
}
