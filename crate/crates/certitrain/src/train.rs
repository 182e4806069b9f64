//! The training loop: warm-up, radius ramp-up, threshold decay, joint steps.
//!
//! Training runs in two phases. Warm-up first fits the clean objective, then
//! the single-step adversarial objective at the full radius, giving the main
//! loop a sensible starting point. The main loop then ramps the certification
//! radius from 0 to its target over `ramp_steps` while descending the
//! weighted combination of adversarial and interval-bound gradients; the
//! per-step weights come from the moment state of the PREVIOUS step's
//! gradients, so each step's weights are fixed before its batch is touched.
//!
//! Everything is a pure function of (config, dataset, seed): batch order,
//! attack noise, and initialization all draw from derived streams, and two
//! runs with equal inputs produce bit-identical parameters and logs.

use serde::{Deserialize, Serialize};

use crate::attack::{fgsm_random_init, fosc_batch};
use crate::bounds::abstract_loss_at;
use crate::data::{batches, BatchIter, Dataset};
use crate::error::{CertError, Result};
use crate::joint::{
    baseline_weights, combine_gradients, compute_weights, MomentState, WeightTriple,
};
use crate::net::{ce_loss_grads, Network};
use crate::rng::{derive_rng, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Joint,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Baseline => "baseline",
        }
    }
}

/// Training hyperparameters, all schedule fields in optimizer steps.
/// Configuration files may express them in epochs; the config loader
/// converts before constructing this.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eps_train: f64,
    /// Clean warm-up steps.
    pub t_nat: u64,
    /// Single-step adversarial warm-up steps (at the full radius).
    pub t_adv: u64,
    /// Steps over which the radius ramps linearly from 0 to eps_train.
    pub ramp_steps: u64,
    /// Steps over which the FOSC threshold decays linearly to 0 after the ramp.
    pub fosc_decay_steps: u64,
    pub c_max: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Main-loop steps (excludes warm-up).
    pub total_steps: u64,
    pub batch_size: usize,
    /// Piecewise-constant breakpoints (step, lr). Steps are on the global
    /// counter, which includes warm-up; the first breakpoint must sit at 0.
    pub lr_schedule: Vec<(u64, f64)>,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_mode() -> Mode {
    Mode::Joint
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_train >= 0.0) {
            return Err(CertError::Config(format!(
                "eps_train must be >= 0, got {}",
                self.eps_train
            )));
        }
        if self.ramp_steps == 0 || self.fosc_decay_steps == 0 {
            return Err(CertError::Config(
                "ramp_steps and fosc_decay_steps must be at least 1".into(),
            ));
        }
        if !(self.c_max >= 0.0) {
            return Err(CertError::Config(format!("c_max must be >= 0, got {}", self.c_max)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CertError::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(CertError::Config("batch_size must be at least 1".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(CertError::Config("lr_schedule needs at least one breakpoint".into()));
        }
        if self.lr_schedule[0].0 != 0 {
            return Err(CertError::Config(
                "the first lr breakpoint must sit at step 0".into(),
            ));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(CertError::Config(format!(
                    "lr breakpoints must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for &(step, lr) in &self.lr_schedule {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CertError::Config(format!(
                    "lr at breakpoint {step} must be positive and finite, got {lr}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step schedule values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub t: u64,
    pub eps_t: f64,
    pub c_t: f64,
    pub lr_t: f64,
}

/// Linear radius ramp: 0 until t_start, eps_train from t_start + ramp_steps
/// on, linear in between.
pub fn eps_schedule(t: u64, eps_train: f64, t_start: u64, ramp_steps: u64) -> f64 {
    assert!(ramp_steps >= 1, "ramp_steps must be at least 1");
    let progress = (t.saturating_sub(t_start)) as f64 / ramp_steps as f64;
    eps_train * progress.clamp(0.0, 1.0)
}

/// FOSC threshold: c_max through the ramp, then a linear decay to 0 over
/// `decay_steps`, clipped to [0, c_max].
pub fn fosc_threshold(t: u64, c_max: f64, ramp_steps: u64, decay_steps: u64) -> f64 {
    assert!(decay_steps >= 1, "decay_steps must be at least 1");
    let progressed = t as f64 - ramp_steps as f64;
    (c_max - progressed * c_max / decay_steps as f64).clamp(0.0, c_max)
}

/// Piecewise-constant lookup over validated breakpoints.
pub fn lr_at(schedule: &[(u64, f64)], global_step: u64) -> f64 {
    let mut lr = schedule[0].1;
    for &(step, value) in schedule {
        if global_step >= step {
            lr = value;
        } else {
            break;
        }
    }
    lr
}

pub fn schedule_at(cfg: &TrainConfig, t: u64, global_step: u64) -> ScheduleState {
    ScheduleState {
        t,
        eps_t: eps_schedule(t, cfg.eps_train, 0, cfg.ramp_steps),
        c_t: fosc_threshold(t, cfg.c_max, cfg.ramp_steps, cfg.fosc_decay_steps),
        lr_t: lr_at(&cfg.lr_schedule, global_step),
    }
}

/// One metrics row per main-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: &'static str,
    pub eps_t: f64,
    pub c_t: f64,
    pub fosc: f64,
    pub loss_adv: f64,
    pub loss_ibp: f64,
    pub kappa_adv: f64,
    pub kappa_ibp: f64,
    pub kappa_reg: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str =
    "step,phase,eps_t,c_t,fosc,loss_adv,loss_ibp,kappa_adv,kappa_ibp,kappa_reg,lr";

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.phase,
            r.eps_t,
            r.c_t,
            r.fosc,
            r.loss_adv,
            r.loss_ibp,
            r.kappa_adv,
            r.kappa_ibp,
            r.kappa_reg,
            r.lr
        ));
    }
    out
}

pub fn write_metrics_csv(records: &[StepRecord], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, metrics_csv(records))?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainResult {
    pub net: Network,
    pub moments: MomentState,
    pub records: Vec<StepRecord>,
}

/// Endless shuffled batches: epoch e uses the (seed, e) permutation, and the
/// epoch counter keeps running from warm-up into the main loop.
struct EpochStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    iter: BatchIter<'a>,
}

impl<'a> EpochStream<'a> {
    fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let iter = batches(data, batch_size, seed, 0)?;
        Ok(EpochStream { data, batch_size, seed, epoch: 0, iter })
    }

    fn next_batch(&mut self) -> crate::data::Batch {
        if let Some(b) = self.iter.next() {
            return b;
        }
        self.epoch += 1;
        self.iter = batches(self.data, self.batch_size, self.seed, self.epoch)
            .expect("stream construction verified the dataset is non-empty");
        self.iter.next().expect("a non-empty dataset yields at least one batch")
    }
}

fn ensure_finite(value: f64, quantity: &'static str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CertError::NonFinite { quantity, step })
    }
}

/// Mean CE loss and mean parameter gradient over `points`.
fn batch_ce(net: &Network, points: &[(Tensor, usize)]) -> Result<(f64, Vec<f64>)> {
    let scale = 1.0 / points.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for (x, y) in points {
        let (l, g, _) = ce_loss_grads(net, x, *y)?;
        loss += scale * l;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += scale * gi;
        }
    }
    Ok((loss, grad))
}

/// Clean descent for `t_nat` steps, then single-step adversarial descent at
/// the full training radius for `t_adv` steps. Advances `global_step`.
fn run_warmup(
    net: &mut Network,
    cfg: &TrainConfig,
    stream_batches: &mut EpochStream<'_>,
    global_step: &mut u64,
) -> Result<()> {
    for _ in 0..cfg.t_nat {
        let batch = stream_batches.next_batch();
        let points: Vec<(Tensor, usize)> =
            (0..batch.len()).map(|i| batch.example(i)).collect();
        let (loss, grad) = batch_ce(net, &points)?;
        ensure_finite(loss, "warm-up clean loss", *global_step)?;
        net.apply_update(&grad, lr_at(&cfg.lr_schedule, *global_step))?;
        *global_step += 1;
    }
    for _ in 0..cfg.t_adv {
        let batch = stream_batches.next_batch();
        let mut points = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (x, y) = batch.example(i);
            let mut rng = derive_rng(cfg.seed, &[stream::ATTACK, *global_step, i as u64]);
            let x_adv = fgsm_random_init(net, &x, y, cfg.eps_train, &mut rng)?;
            points.push((x_adv, y));
        }
        let (loss, grad) = batch_ce(net, &points)?;
        ensure_finite(loss, "warm-up adversarial loss", *global_step)?;
        net.apply_update(&grad, lr_at(&cfg.lr_schedule, *global_step))?;
        *global_step += 1;
    }
    Ok(())
}

/// Warm-up only, on a fresh batch stream. `train` runs the same procedure
/// before its main loop.
pub fn warmup(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.t_nat == 0 && cfg.t_adv == 0 {
        return Ok(());
    }
    let mut stream_batches = EpochStream::new(data, cfg.batch_size, cfg.seed)?;
    let mut global_step = 0;
    run_warmup(net, cfg, &mut stream_batches, &mut global_step)
}

pub fn train(mut net: Network, cfg: &TrainConfig, data: &Dataset) -> Result<TrainResult> {
    cfg.validate()?;
    if data.item_shape() != net.input_shape() {
        return Err(CertError::ShapeMismatch {
            context: "dataset items vs network input",
            expected: net.input_shape().to_vec(),
            got: data.item_shape(),
        });
    }
    let mut stream_batches = EpochStream::new(data, cfg.batch_size, cfg.seed)?;
    let mut global_step = 0u64;
    run_warmup(&mut net, cfg, &mut stream_batches, &mut global_step)?;

    let mut moments = MomentState::new(net.num_params(), cfg.beta1, cfg.beta2)?;
    let mut prev_grads: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut records = Vec::with_capacity(cfg.total_steps as usize);

    for t in 0..cfg.total_steps {
        let sched = schedule_at(cfg, t, global_step);
        let batch = stream_batches.next_batch();

        let mut xs = Vec::with_capacity(batch.len());
        let mut x_advs = Vec::with_capacity(batch.len());
        let mut ys = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (x, y) = batch.example(i);
            let mut rng = derive_rng(cfg.seed, &[stream::ATTACK, global_step, i as u64]);
            let x_adv = fgsm_random_init(&net, &x, y, sched.eps_t, &mut rng)?;
            xs.push(x);
            x_advs.push(x_adv);
            ys.push(y);
        }

        let adv_points: Vec<(Tensor, usize)> =
            x_advs.iter().cloned().zip(ys.iter().copied()).collect();
        let (loss_adv, g_adv) = batch_ce(&net, &adv_points)?;
        ensure_finite(loss_adv, "adversarial loss", global_step)?;

        let scale = 1.0 / batch.len() as f64;
        let mut loss_ibp = 0.0;
        let mut g_ibp = vec![0.0; net.num_params()];
        for (x, &y) in xs.iter().zip(&ys) {
            let (l, g, _) = abstract_loss_at(&net, x, sched.eps_t, y)?;
            loss_ibp += scale * l;
            for (acc, gi) in g_ibp.iter_mut().zip(&g) {
                *acc += scale * gi;
            }
        }
        ensure_finite(loss_ibp, "abstract loss", global_step)?;

        let fosc = fosc_batch(&net, &xs, &x_advs, &ys, sched.eps_t)?;

        let weights: WeightTriple = match cfg.mode {
            Mode::Baseline => baseline_weights(),
            Mode::Joint => {
                if let Some((pa, pi)) = prev_grads.take() {
                    moments.update_moments(&pa, &pi)?;
                }
                compute_weights(&moments, fosc, sched.c_t)
            }
        };
        let g_final = combine_gradients(&weights, &g_adv, &g_ibp, loss_ibp)?;
        net.apply_update(&g_final, sched.lr_t)?;
        prev_grads = Some((g_adv, g_ibp));

        records.push(StepRecord {
            step: t,
            phase: cfg.mode.as_str(),
            eps_t: sched.eps_t,
            c_t: sched.c_t,
            fosc,
            loss_adv,
            loss_ibp,
            kappa_adv: weights.kappa_adv,
            kappa_ibp: weights.kappa_ibp,
            kappa_reg: weights.kappa_reg,
            lr: sched.lr_t,
        });
        global_step += 1;
    }

    Ok(TrainResult { net, moments, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{is_verified, margin_lower_bounds};
    use crate::data::synthetic_blobs;
    use crate::net::{init_network, LayerSpec};

    fn blob_net(seed: u64) -> Network {
        init_network(
            vec![
                LayerSpec::Affine { out_dim: 16 },
                LayerSpec::Relu,
                LayerSpec::Affine { out_dim: 16 },
                LayerSpec::Relu,
                LayerSpec::Affine { out_dim: 2 },
            ],
            vec![2],
            seed,
        )
        .unwrap()
    }

    fn blob_config(seed: u64, mode: Mode) -> TrainConfig {
        TrainConfig {
            eps_train: 0.05,
            t_nat: 100,
            t_adv: 200,
            ramp_steps: 700,
            fosc_decay_steps: 700,
            c_max: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            total_steps: 1700,
            batch_size: 64,
            lr_schedule: vec![(0, 0.1), (1500, 0.025)],
            seed,
            mode,
        }
    }

    fn mean_clean_loss(net: &Network, data: &Dataset) -> f64 {
        let mut total = 0.0;
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            total += ce_loss_grads(net, &x, y).unwrap().0;
        }
        total / data.len() as f64
    }

    fn verified_fraction(net: &Network, data: &Dataset, eps: f64) -> f64 {
        let mut ok = 0usize;
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            let (mb, _) = margin_lower_bounds(net, &x, eps, y).unwrap();
            if is_verified(&mb) {
                ok += 1;
            }
        }
        ok as f64 / data.len() as f64
    }

    #[test]
    fn eps_ramp_hits_its_anchor_points() {
        assert_eq!(eps_schedule(0, 0.3, 0, 100), 0.0);
        assert_eq!(eps_schedule(5, 0.3, 5, 100), 0.0);
        assert_eq!(eps_schedule(3, 0.3, 5, 100), 0.0);
        assert!((eps_schedule(55, 0.3, 5, 100) - 0.15).abs() < 1e-15);
        assert_eq!(eps_schedule(105, 0.3, 5, 100), 0.3);
        assert_eq!(eps_schedule(400, 0.3, 5, 100), 0.3);
        let mut last = -1.0;
        for t in 0..300 {
            let e = eps_schedule(t, 0.3, 5, 100);
            assert!(e >= last && (0.0..=0.3).contains(&e));
            last = e;
        }
    }

    #[test]
    fn fosc_threshold_hits_its_anchor_points() {
        assert_eq!(fosc_threshold(50, 1e-4, 50, 50), 1e-4);
        assert_eq!(fosc_threshold(10, 1e-4, 50, 50), 1e-4);
        assert!((fosc_threshold(75, 1e-4, 50, 50) - 5e-5).abs() < 1e-19);
        assert_eq!(fosc_threshold(100, 1e-4, 50, 50), 0.0);
        assert_eq!(fosc_threshold(240, 1e-4, 50, 50), 0.0);
        let mut last = f64::INFINITY;
        for t in 50..160 {
            let c = fosc_threshold(t, 1e-4, 50, 50);
            assert!(c <= last && (0.0..=1e-4).contains(&c));
            last = c;
        }
    }

    #[test]
    fn lr_lookup_is_piecewise_constant() {
        let sched = vec![(0u64, 0.1), (10, 0.025), (20, 0.01)];
        assert_eq!(lr_at(&sched, 0), 0.1);
        assert_eq!(lr_at(&sched, 9), 0.1);
        assert_eq!(lr_at(&sched, 10), 0.025);
        assert_eq!(lr_at(&sched, 19), 0.025);
        assert_eq!(lr_at(&sched, 500), 0.01);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = blob_config(1, Mode::Joint);
        assert!(good.validate().is_ok());
        let mut c = good.clone();
        c.eps_train = -0.1;
        assert!(c.validate().is_err());
        c = good.clone();
        c.ramp_steps = 0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        c = good.clone();
        c.lr_schedule = vec![(5, 0.1)];
        assert!(c.validate().is_err());
        c = good.clone();
        c.lr_schedule = vec![(0, 0.1), (10, 0.2), (10, 0.3)];
        assert!(c.validate().is_err());
        c = good.clone();
        c.lr_schedule = vec![(0, -0.1)];
        assert!(c.validate().is_err());
        c = good;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_warmup_leaves_parameters_untouched() {
        let data = synthetic_blobs(16, 2, 0.5, 3);
        let mut net = blob_net(3);
        let theta_before = net.theta.clone();
        let mut cfg = blob_config(3, Mode::Joint);
        cfg.t_nat = 0;
        cfg.t_adv = 0;
        warmup(&mut net, &data, &cfg).unwrap();
        assert_eq!(net.theta, theta_before);
    }

    #[test]
    fn clean_warmup_reduces_clean_loss_on_most_seeds() {
        let mut wins = 0;
        for seed in 0..5u64 {
            let data = synthetic_blobs(64, 2, 0.5, 100 + seed);
            let mut net = blob_net(seed);
            let mut cfg = blob_config(seed, Mode::Joint);
            cfg.t_nat = 60;
            cfg.t_adv = 0;
            let before = mean_clean_loss(&net, &data);
            warmup(&mut net, &data, &cfg).unwrap();
            let after = mean_clean_loss(&net, &data);
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 3, "clean warm-up reduced the loss on only {wins}/5 seeds");
    }

    #[test]
    fn zero_steps_returns_warmup_result_with_empty_log() {
        let data = synthetic_blobs(32, 2, 0.5, 4);
        let mut cfg = blob_config(4, Mode::Joint);
        cfg.t_nat = 20;
        cfg.t_adv = 20;
        cfg.total_steps = 0;
        let result = train(blob_net(4), &cfg, &data).unwrap();
        assert!(result.records.is_empty());
        assert_eq!(result.moments.t, 0);
        let mut reference = blob_net(4);
        warmup(&mut reference, &data, &cfg).unwrap();
        assert_eq!(result.net.theta, reference.theta);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = synthetic_blobs(32, 2, 0.5, 5);
        let mut cfg = blob_config(5, Mode::Joint);
        cfg.t_nat = 10;
        cfg.t_adv = 10;
        cfg.total_steps = 40;
        cfg.ramp_steps = 20;
        cfg.fosc_decay_steps = 10;
        let a = train(blob_net(5), &cfg, &data).unwrap();
        let b = train(blob_net(5), &cfg, &data).unwrap();
        assert_eq!(a.net.theta, b.net.theta);
        assert_eq!(a.moments, b.moments);
        assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
        assert_eq!(a.records.len(), 40);
    }

    #[test]
    fn adversarial_loss_never_exceeds_abstract_loss() {
        let data = synthetic_blobs(32, 2, 0.5, 6);
        let mut cfg = blob_config(6, Mode::Joint);
        cfg.t_nat = 10;
        cfg.t_adv = 10;
        cfg.total_steps = 80;
        cfg.ramp_steps = 40;
        cfg.fosc_decay_steps = 20;
        let result = train(blob_net(6), &cfg, &data).unwrap();
        for r in &result.records {
            assert!(
                r.loss_adv <= r.loss_ibp + 1e-6,
                "step {}: adversarial {} vs abstract {}",
                r.step,
                r.loss_adv,
                r.loss_ibp
            );
        }
    }

    #[test]
    fn baseline_mode_keeps_fixed_weights_and_idle_moments() {
        let data = synthetic_blobs(32, 2, 0.5, 7);
        let mut cfg = blob_config(7, Mode::Baseline);
        cfg.t_nat = 5;
        cfg.t_adv = 5;
        cfg.total_steps = 30;
        cfg.ramp_steps = 15;
        cfg.fosc_decay_steps = 10;
        let result = train(blob_net(7), &cfg, &data).unwrap();
        assert_eq!(result.moments.t, 0);
        for r in &result.records {
            assert_eq!(r.phase, "baseline");
            assert_eq!((r.kappa_adv, r.kappa_ibp, r.kappa_reg), (1.0, 1.0, 0.0));
        }
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let data = synthetic_blobs(16, 2, 0.5, 8);
        let mut cfg = blob_config(8, Mode::Joint);
        cfg.t_nat = 0;
        cfg.t_adv = 0;
        cfg.total_steps = 30;
        cfg.ramp_steps = 10;
        cfg.fosc_decay_steps = 10;
        cfg.lr_schedule = vec![(0, 1e200)];
        let err = train(blob_net(8), &cfg, &data).unwrap_err();
        assert!(matches!(err, CertError::NonFinite { .. }), "got {err:?}");
    }

    #[test]
    fn shape_mismatch_is_rejected_up_front() {
        let data = synthetic_blobs(16, 3, 0.5, 9);
        let cfg = blob_config(9, Mode::Joint);
        assert!(matches!(
            train(blob_net(9), &cfg, &data),
            Err(CertError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn metrics_csv_shape_and_header() {
        let data = synthetic_blobs(16, 2, 0.5, 10);
        let mut cfg = blob_config(10, Mode::Joint);
        cfg.t_nat = 2;
        cfg.t_adv = 2;
        cfg.total_steps = 6;
        cfg.ramp_steps = 3;
        cfg.fosc_decay_steps = 3;
        let result = train(blob_net(10), &cfg, &data).unwrap();
        let csv = metrics_csv(&result.records);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 7);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 11);
        }
        assert!(lines[1].starts_with("0,joint,"));
    }

    /// End of main loop beats end of ramp on the certified objective's
    /// smoothed loss, and the trained net verifies most of the dataset.
    #[test]
    fn blob_training_descends_the_certified_objective() {
        let mut descent_wins = 0;
        let mut verified = Vec::new();
        for seed in 0..5u64 {
            let data = synthetic_blobs(128, 2, 0.5, 200 + seed);
            let cfg = blob_config(seed, Mode::Joint);
            let result = train(blob_net(seed), &cfg, &data).unwrap();
            let alpha = 2.0 / 101.0;
            let mut ema = result.records[0].loss_ibp;
            let mut ema_series = Vec::with_capacity(result.records.len());
            for r in &result.records {
                ema = alpha * r.loss_ibp + (1.0 - alpha) * ema;
                ema_series.push(ema);
            }
            let at_ramp_end = ema_series[cfg.ramp_steps as usize];
            let tail_start = ema_series.len() - ema_series.len() / 10;
            let tail_mean: f64 = ema_series[tail_start..].iter().sum::<f64>()
                / (ema_series.len() - tail_start) as f64;
            if tail_mean < at_ramp_end {
                descent_wins += 1;
            }
            verified.push(verified_fraction(&result.net, &data, cfg.eps_train));
        }
        assert!(
            descent_wins >= 4,
            "smoothed certified loss fell after ramp on only {descent_wins}/5 seeds"
        );
        let median = {
            let mut v = verified.clone();
            v.sort_by(f64::total_cmp);
            v[2]
        };
        assert!(
            median >= 0.85,
            "median verified fraction {median} (per-seed: {verified:?})"
        );
    }
}
