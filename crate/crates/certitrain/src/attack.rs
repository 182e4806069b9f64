//! Adversarial example generation and the FOSC stationarity measure.
//!
//! FGSM with random initialization is the training-time attack; PGD with a
//! random start and best-loss tracking is the evaluation attack. FOSC
//! measures how close an adversarial point is to a first-order stationary
//! point of the inner maximization over the eps-ball: 0 means the point is a
//! first-order maximizer, large values mean the attack under-solved the
//! inner problem.

use rand::Rng;

use crate::error::{CertError, Result};
use crate::net::{ce_loss_grads, cross_entropy, Network};
use crate::tensor::{dot, l1_norm, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub eps: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub fgsm_step_factor: f64,
}

impl AttackConfig {
    /// Evaluation defaults: 200-step PGD at step size eps/4, FGSM step 1.25 eps.
    pub fn new(eps: f64) -> Self {
        AttackConfig {
            eps,
            pgd_steps: 200,
            pgd_step_size: eps / 4.0,
            fgsm_step_factor: 1.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) {
            return Err(CertError::InvalidArgument(format!(
                "attack eps must be >= 0, got {}",
                self.eps
            )));
        }
        if self.pgd_steps < 1 {
            return Err(CertError::InvalidArgument("pgd_steps must be >= 1".into()));
        }
        if self.eps > 0.0 && (self.pgd_step_size <= 0.0 || self.fgsm_step_factor <= 0.0) {
            return Err(CertError::InvalidArgument("attack step sizes must be > 0".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FGSM from a uniformly drawn start: delta ~ U[-eps, eps]^d, one signed
/// gradient step of size 1.25*eps evaluated at x+delta, then clip to the
/// ball and the pixel domain.
pub fn fgsm_random_init(
    net: &Network,
    x: &Tensor,
    y: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(CertError::InvalidArgument(format!(
            "fgsm eps must be >= 0, got {eps}"
        )));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let delta: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-eps..=eps)).collect();
    let start = Tensor::new(
        x.shape.clone(),
        x.data.iter().zip(&delta).map(|(a, d)| a + d).collect(),
    )?;
    let (_, _, grad_x) = ce_loss_grads(net, &start, y)?;
    let alpha = 1.25 * eps;
    let data = x
        .data
        .iter()
        .zip(&delta)
        .zip(&grad_x.data)
        .map(|((xi, d), g)| {
            let step = (d + alpha * sign(*g)).clamp(-eps, eps);
            (xi + step).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

fn project(x: &Tensor, point: &[f64], eps: f64) -> Vec<f64> {
    x.data
        .iter()
        .zip(point)
        .map(|(xi, p)| p.clamp((xi - eps).max(0.0), (xi + eps).min(1.0)))
        .collect()
}

/// PGD from an explicit start point. The returned point is the best-loss
/// candidate among the clean x, the projected start, and every iterate.
pub fn pgd_from(
    net: &Network,
    x: &Tensor,
    y: usize,
    start: &Tensor,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor> {
    if steps < 1 {
        return Err(CertError::InvalidArgument("pgd steps must be >= 1".into()));
    }
    let (logits, _) = net.forward(x)?;
    let mut best = x.clone();
    let mut best_loss = cross_entropy(&logits, y)?.0;
    let mut cur = Tensor::new(x.shape.clone(), project(x, &start.data, eps))?;
    for _ in 0..steps {
        let (loss, _, grad_x) = ce_loss_grads(net, &cur, y)?;
        if loss > best_loss {
            best_loss = loss;
            best = cur.clone();
        }
        let stepped: Vec<f64> = cur
            .data
            .iter()
            .zip(&grad_x.data)
            .map(|(c, g)| c + step_size * sign(*g))
            .collect();
        cur = Tensor::new(x.shape.clone(), project(x, &stepped, eps))?;
    }
    let (logits, _) = net.forward(&cur)?;
    if cross_entropy(&logits, y)?.0 > best_loss {
        best = cur;
    }
    Ok(best)
}

/// PGD with a uniform random start in the ball.
pub fn pgd(
    net: &Network,
    x: &Tensor,
    y: usize,
    eps: f64,
    steps: usize,
    step_size: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let start = if eps == 0.0 {
        x.clone()
    } else {
        Tensor::new(
            x.shape.clone(),
            x.data.iter().map(|v| v + rng.gen_range(-eps..=eps)).collect(),
        )?
    };
    pgd_from(net, x, y, &start, eps, steps, step_size)
}

/// First-order stationarity of x_adv for the inner maximization over
/// S(x, eps): eps*|g|_1 - <x_adv - x, g> with g = grad_x CE(f(x_adv), y).
/// Zero iff x_adv maximizes the linearized loss over the ball.
pub fn fosc(net: &Network, x: &Tensor, x_adv: &Tensor, y: usize, eps: f64) -> Result<f64> {
    if x.shape != x_adv.shape {
        return Err(CertError::ShapeMismatch {
            context: "fosc points",
            expected: x.shape.clone(),
            got: x_adv.shape.clone(),
        });
    }
    let inf_norm = x
        .data
        .iter()
        .zip(&x_adv.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if inf_norm > eps + 1e-9 {
        return Err(CertError::BallViolation {
            norm: inf_norm,
            eps,
        });
    }
    let (_, _, g) = ce_loss_grads(net, x_adv, y)?;
    let diff: Vec<f64> = x_adv.data.iter().zip(&x.data).map(|(a, b)| a - b).collect();
    Ok(eps * l1_norm(&g.data) - dot(&diff, &g.data))
}

/// Arithmetic mean of per-example FOSC values.
pub fn fosc_batch(
    net: &Network,
    xs: &[Tensor],
    x_advs: &[Tensor],
    ys: &[usize],
    eps: f64,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(CertError::EmptyBatch("fosc_batch"));
    }
    if xs.len() != x_advs.len() || xs.len() != ys.len() {
        return Err(CertError::ShapeMismatch {
            context: "fosc_batch lengths",
            expected: vec![xs.len()],
            got: vec![x_advs.len(), ys.len()],
        });
    }
    let mut total = 0.0;
    for i in 0..xs.len() {
        total += fosc(net, &xs[i], &x_advs[i], ys[i], eps)?;
    }
    Ok(total / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, LayerSpec, Network};
    use crate::rng::{derive_rng, sample_standard_normal};
    use rand::Rng;

    fn rand_interior_input(n: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(0.25..0.75)).collect()).unwrap()
    }

    /// Two blob classes at x0 = 0.3 / 0.7, trained with a short clean
    /// gradient descent loop; gives the attack tests a net with real
    /// gradients and decision structure.
    fn trained_blob_net(seed: u64) -> (Network, Vec<(Tensor, usize)>) {
        let mut rng = derive_rng(seed, &[99]);
        let mut points = Vec::new();
        for i in 0..80 {
            let class = i % 2;
            let cx = if class == 0 { 0.3 } else { 0.7 };
            let px = (cx + 0.05 * sample_standard_normal(&mut rng)).clamp(0.0, 1.0);
            let py = (0.5 + 0.05 * sample_standard_normal(&mut rng)).clamp(0.0, 1.0);
            points.push((Tensor::new(vec![2], vec![px, py]).unwrap(), class));
        }
        let mut net = init_network(
            vec![
                LayerSpec::Affine { out_dim: 8 },
                LayerSpec::Relu,
                LayerSpec::Affine { out_dim: 2 },
            ],
            vec![2],
            seed,
        )
        .unwrap();
        for _ in 0..300 {
            let mut grad = vec![0.0; net.num_params()];
            for (x, y) in &points {
                let (_, gt, _) = ce_loss_grads(&net, x, *y).unwrap();
                for (a, b) in grad.iter_mut().zip(&gt) {
                    *a += b / points.len() as f64;
                }
            }
            net.apply_update(&grad, 0.5).unwrap();
        }
        (net, points)
    }

    #[test]
    fn fgsm_eps_zero_is_identity() {
        let (net, points) = trained_blob_net(1);
        let mut rng = derive_rng(2, &[0]);
        let (x, y) = &points[0];
        let adv = fgsm_random_init(&net, x, *y, 0.0, &mut rng).unwrap();
        assert_eq!(adv.data, x.data);
    }

    #[test]
    fn fgsm_zero_gradient_returns_clipped_noise_point() {
        // All-zero parameters give a zero input gradient, so the attack
        // reduces to x + delta. Replaying the same stream recovers delta.
        let net = Network::new(
            vec![LayerSpec::Affine { out_dim: 3 }],
            vec![4],
        )
        .unwrap();
        let x = Tensor::new(vec![4], vec![0.4, 0.5, 0.6, 0.3]).unwrap();
        let eps = 0.05;
        let mut rng = derive_rng(7, &[1]);
        let adv = fgsm_random_init(&net, &x, 0, eps, &mut rng).unwrap();
        let mut replay = derive_rng(7, &[1]);
        for (i, xi) in x.data.iter().enumerate() {
            let d: f64 = replay.gen_range(-eps..=eps);
            assert_eq!(adv.data[i], (xi + d).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn fgsm_raises_loss_on_most_points() {
        let (net, points) = trained_blob_net(3);
        let mut rng = derive_rng(4, &[0]);
        let eps = 0.08;
        let mut raised = 0;
        for (x, y) in &points {
            let adv = fgsm_random_init(&net, x, *y, eps, &mut rng).unwrap();
            let base = ce_loss_grads(&net, x, *y).unwrap().0;
            let attacked = ce_loss_grads(&net, &adv, *y).unwrap().0;
            if attacked >= base {
                raised += 1;
            }
        }
        assert!(
            raised as f64 >= 0.7 * points.len() as f64,
            "only {raised}/{} raised",
            points.len()
        );
    }

    #[test]
    fn generated_points_stay_in_ball_and_domain() {
        let mut rng = derive_rng(5, &[0]);
        for seed in 0..10 {
            let net = init_network(
                vec![
                    LayerSpec::Affine { out_dim: 6 },
                    LayerSpec::Relu,
                    LayerSpec::Affine { out_dim: 3 },
                ],
                vec![5],
                seed,
            )
            .unwrap();
            // Mix of interior points and points hugging the domain boundary.
            for case in 0..20 {
                let x = if case % 2 == 0 {
                    rand_interior_input(5, &mut rng)
                } else {
                    Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(0.0..0.05)).collect())
                        .unwrap()
                };
                let y = rng.gen_range(0..3);
                let eps = 0.3;
                for adv in [
                    fgsm_random_init(&net, &x, y, eps, &mut rng).unwrap(),
                    pgd(&net, &x, y, eps, 5, eps / 4.0, &mut rng).unwrap(),
                ] {
                    for (a, b) in adv.data.iter().zip(&x.data) {
                        assert!((a - b).abs() <= eps + 1e-12);
                        assert!(*a >= 0.0 && *a <= 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn attacks_are_deterministic_per_seed() {
        let (net, points) = trained_blob_net(6);
        let (x, y) = &points[3];
        let a = fgsm_random_init(&net, x, *y, 0.1, &mut derive_rng(9, &[2])).unwrap();
        let b = fgsm_random_init(&net, x, *y, 0.1, &mut derive_rng(9, &[2])).unwrap();
        assert_eq!(a.data, b.data);
        let p = pgd(&net, x, *y, 0.1, 10, 0.025, &mut derive_rng(9, &[3])).unwrap();
        let q = pgd(&net, x, *y, 0.1, 10, 0.025, &mut derive_rng(9, &[3])).unwrap();
        assert_eq!(p.data, q.data);
    }

    #[test]
    fn single_step_pgd_from_center_is_fgsm_without_noise() {
        let (net, points) = trained_blob_net(8);
        let eps = 0.05;
        for (x, y) in points.iter().take(20) {
            let adv = pgd_from(&net, x, *y, x, eps, 1, eps).unwrap();
            let (_, _, g) = ce_loss_grads(&net, x, *y).unwrap();
            let manual: Vec<f64> = x
                .data
                .iter()
                .zip(&g.data)
                .map(|(xi, gi)| (xi + eps * sign(*gi)).clamp((xi - eps).max(0.0), (xi + eps).min(1.0)))
                .collect();
            let (logits, _) = net.forward(&Tensor::new(vec![2], manual.clone()).unwrap()).unwrap();
            let manual_loss = cross_entropy(&logits, *y).unwrap().0;
            let base_loss = ce_loss_grads(&net, x, *y).unwrap().0;
            if manual_loss > base_loss {
                assert_eq!(adv.data, manual);
            } else {
                assert_eq!(adv.data, x.data);
            }
        }
    }

    #[test]
    fn pgd_at_least_as_strong_as_fgsm_on_most_points() {
        let (net, points) = trained_blob_net(10);
        let eps = 0.08;
        let mut wins = 0;
        for (i, (x, y)) in points.iter().enumerate() {
            let mut rng_f = derive_rng(11, &[i as u64, 0]);
            let mut rng_p = derive_rng(11, &[i as u64, 1]);
            let f = fgsm_random_init(&net, x, *y, eps, &mut rng_f).unwrap();
            let p = pgd(&net, x, *y, eps, 20, eps / 4.0, &mut rng_p).unwrap();
            let lf = ce_loss_grads(&net, &f, *y).unwrap().0;
            let lp = ce_loss_grads(&net, &p, *y).unwrap().0;
            if lp >= lf - 1e-12 {
                wins += 1;
            }
        }
        assert!(
            wins as f64 >= 0.9 * points.len() as f64,
            "pgd weaker on {} of {}",
            points.len() - wins,
            points.len()
        );
    }

    #[test]
    fn fosc_at_clean_point_is_eps_times_l1() {
        let (net, points) = trained_blob_net(12);
        let (x, y) = &points[1];
        let eps = 0.1;
        let v = fosc(&net, x, x, *y, eps).unwrap();
        let (_, _, g) = ce_loss_grads(&net, x, *y).unwrap();
        let want = eps * l1_norm(&g.data);
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn fosc_of_fixed_point_maximizer_is_zero() {
        let (net, points) = trained_blob_net(13);
        let eps = 0.04;
        let mut found = false;
        for (x, y) in points.iter().take(30) {
            if x.data.iter().any(|v| *v < eps || *v > 1.0 - eps) {
                continue;
            }
            // Iterate x_adv = x + eps*sign(g(x_adv)) to a fixed point.
            let mut adv = x.clone();
            let mut stable = false;
            for _ in 0..50 {
                let (_, _, g) = ce_loss_grads(&net, &adv, *y).unwrap();
                if g.data.iter().any(|v| *v == 0.0) {
                    break;
                }
                let next: Vec<f64> =
                    x.data.iter().zip(&g.data).map(|(xi, gi)| xi + eps * sign(*gi)).collect();
                if next == adv.data {
                    stable = true;
                    break;
                }
                adv = Tensor::new(x.shape.clone(), next).unwrap();
            }
            if !stable {
                continue;
            }
            let v = fosc(&net, x, &adv, *y, eps).unwrap();
            assert!(v.abs() <= 1e-9, "fosc {v} at fixed point");
            found = true;
        }
        assert!(found, "no sign-stable maximizer found");
    }

    #[test]
    fn fosc_matches_corner_enumeration() {
        let mut rng = derive_rng(14, &[0]);
        for seed in 0..20 {
            let d = rng.gen_range(2..=10);
            let net = init_network(
                vec![
                    LayerSpec::Affine { out_dim: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Affine { out_dim: 3 },
                ],
                vec![d],
                seed,
            )
            .unwrap();
            let x = rand_interior_input(d, &mut rng);
            let eps = rng.gen_range(0.01..0.2);
            let adv = Tensor::new(
                vec![d],
                x.data.iter().map(|v| v + rng.gen_range(-eps..=eps)).collect(),
            )
            .unwrap();
            let y = rng.gen_range(0..3);
            let v = fosc(&net, &x, &adv, y, eps).unwrap();
            let (_, _, g) = ce_loss_grads(&net, &adv, y).unwrap();
            let mut best = f64::NEG_INFINITY;
            for corner in 0..(1usize << d) {
                let mut acc = 0.0;
                for i in 0..d {
                    let xp = if corner >> i & 1 == 1 { x.data[i] + eps } else { x.data[i] - eps };
                    acc += (xp - adv.data[i]) * g.data[i];
                }
                best = best.max(acc);
            }
            assert!((v - best).abs() <= 1e-12, "fosc {v} corners {best}");
        }
    }

    #[test]
    fn fosc_is_nonnegative_for_ball_points() {
        let mut rng = derive_rng(15, &[0]);
        let (net, points) = trained_blob_net(16);
        for (i, (x, y)) in points.iter().enumerate() {
            let eps = [0.01, 0.05, 0.15][i % 3];
            let adv = Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .map(|v| (v + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            let v = fosc(&net, x, &adv, *y, eps).unwrap();
            assert!(v >= -1e-9, "fosc {v}");
        }
    }

    #[test]
    fn fosc_rejects_points_outside_ball() {
        let (net, points) = trained_blob_net(17);
        let (x, y) = &points[0];
        let mut far = x.clone();
        far.data[0] = (far.data[0] + 0.5).min(1.0);
        assert!(matches!(
            fosc(&net, x, &far, *y, 0.1),
            Err(CertError::BallViolation { .. })
        ));
    }

    #[test]
    fn fosc_batch_examples() {
        let (net, points) = trained_blob_net(18);
        let eps = 0.07;
        let mut rng = derive_rng(19, &[0]);
        let xs: Vec<Tensor> = points.iter().take(6).map(|(x, _)| x.clone()).collect();
        let ys: Vec<usize> = points.iter().take(6).map(|(_, y)| *y).collect();
        let advs: Vec<Tensor> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| fgsm_random_init(&net, x, *y, eps, &mut rng).unwrap())
            .collect();

        let single = fosc_batch(&net, &xs[..1], &advs[..1], &ys[..1], eps).unwrap();
        assert!((single - fosc(&net, &xs[0], &advs[0], ys[0], eps).unwrap()).abs() < 1e-15);

        let a = fosc(&net, &xs[0], &advs[0], ys[0], eps).unwrap();
        let b = fosc(&net, &xs[1], &advs[1], ys[1], eps).unwrap();
        let pair = fosc_batch(&net, &xs[..2], &advs[..2], &ys[..2], eps).unwrap();
        assert!((pair - (a + b) / 2.0).abs() < 1e-15);

        let full = fosc_batch(&net, &xs, &advs, &ys, eps).unwrap();
        let mut oracle = 0.0;
        for i in 0..xs.len() {
            oracle += fosc(&net, &xs[i], &advs[i], ys[i], eps).unwrap();
        }
        oracle /= xs.len() as f64;
        assert!((full - oracle).abs() < 1e-12);

        assert!(matches!(
            fosc_batch(&net, &[], &[], &[], eps),
            Err(CertError::EmptyBatch(_))
        ));
    }

    #[test]
    fn attack_config_validation() {
        assert!(AttackConfig::new(0.1).validate().is_ok());
        assert!(AttackConfig { eps: -0.1, ..AttackConfig::new(0.1) }.validate().is_err());
        assert!(AttackConfig { pgd_steps: 0, ..AttackConfig::new(0.1) }.validate().is_err());
    }
}
