//! Error metrics: standard, attack, and certified.
//!
//! The three error rates form a chain, standard <= attack <= certified, and
//! the definitions here make the chain exact rather than merely typical:
//! an example counts against the attack if EITHER the clean input or the
//! attacked input is misclassified (the clean point is always available to
//! an attacker), and an example counts as verified only if it is BOTH
//! clean-correct and has all margin lower bounds strictly positive.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::bounds::{is_verified, margin_lower_bounds};
use crate::data::Dataset;
use crate::error::{CertError, Result};
use crate::net::Network;
use crate::rng::{derive_rng, stream};
use crate::tensor::Tensor;

/// Argmax with ties resolved to the lowest class index.
pub fn predict(net: &Network, x: &Tensor) -> Result<usize> {
    let (logits, _) = net.forward(x)?;
    let mut best = 0;
    for (j, &v) in logits.data.iter().enumerate() {
        if v > logits.data[best] {
            best = j;
        }
    }
    Ok(best)
}

fn check_classes(net: &Network, data: &Dataset) -> Result<()> {
    if net.output_dim() != data.num_classes {
        return Err(CertError::ShapeMismatch {
            context: "network classes vs dataset classes",
            expected: vec![data.num_classes],
            got: vec![net.output_dim()],
        });
    }
    Ok(())
}

/// Fraction of examples whose clean prediction is wrong.
pub fn standard_error(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(CertError::EmptyBatch("standard_error"));
    }
    check_classes(net, data)?;
    let mut wrong = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        if predict(net, &x)? != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Fraction of examples NOT certified at radius eps: clean-misclassified or
/// any margin lower bound <= 0.
pub fn ibp_verified_error(net: &Network, data: &Dataset, eps: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(CertError::EmptyBatch("ibp_verified_error"));
    }
    check_classes(net, data)?;
    let mut unverified = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        let clean_ok = predict(net, &x)? == y;
        let (mb, _) = margin_lower_bounds(net, &x, eps, y)?;
        if !clean_ok || !is_verified(&mb) {
            unverified += 1;
        }
    }
    Ok(unverified as f64 / data.len() as f64)
}

/// Fraction of examples broken by a seeded PGD attack (or already broken
/// clean). Example i draws its own rng stream, so the result is independent
/// of evaluation order.
pub fn pgd_error(
    net: &Network,
    data: &Dataset,
    eps: f64,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(CertError::EmptyBatch("pgd_error"));
    }
    check_classes(net, data)?;
    let mut broken = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        let mut rng = derive_rng(seed, &[stream::EVAL, i as u64]);
        let x_adv = pgd(net, &x, y, eps, steps, step_size, &mut rng)?;
        if predict(net, &x)? != y || predict(net, &x_adv)? != y {
            broken += 1;
        }
    }
    Ok(broken as f64 / data.len() as f64)
}

/// Field order is the report schema; serialization preserves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub standard_error: f64,
    pub verified_error: f64,
    pub pgd_error: f64,
    pub eps: f64,
    pub pgd_steps: usize,
    pub n_examples: usize,
    pub model_id: String,
}

pub fn evaluate(
    net: &Network,
    data: &Dataset,
    eps: f64,
    attack: &AttackConfig,
    seed: u64,
    model_id: &str,
) -> Result<EvalReport> {
    let standard = standard_error(net, data)?;
    let verified = ibp_verified_error(net, data, eps)?;
    let attacked = pgd_error(net, data, eps, attack.pgd_steps, attack.pgd_step_size, seed)?;
    debug_assert!(standard <= attacked && attacked <= verified);
    Ok(EvalReport {
        standard_error: standard,
        verified_error: verified,
        pgd_error: attacked,
        eps,
        pgd_steps: attack.pgd_steps,
        n_examples: data.len(),
        model_id: model_id.to_string(),
    })
}

/// One row per example of the certification sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRecord {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub min_margin_lower: f64,
    pub verified: bool,
}

pub fn verify_records(net: &Network, data: &Dataset, eps: f64) -> Result<Vec<VerifyRecord>> {
    check_classes(net, data)?;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        let prediction = predict(net, &x)?;
        let (mb, _) = margin_lower_bounds(net, &x, eps, y)?;
        let min_margin = mb.lower.iter().copied().fold(f64::INFINITY, f64::min);
        out.push(VerifyRecord {
            index: i,
            label: y,
            prediction,
            min_margin_lower: min_margin,
            verified: prediction == y && is_verified(&mb),
        });
    }
    Ok(out)
}

pub const VERIFY_HEADER: &str = "index,label,prediction,min_margin_lower,verified";

pub fn verify_csv(records: &[VerifyRecord]) -> String {
    let mut out = String::from(VERIFY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index,
            r.label,
            r.prediction,
            r.min_margin_lower,
            u8::from(r.verified)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::net::{ce_loss_grads, init_network, LayerSpec};
    use rand::Rng;

    fn ten_class_point_dataset() -> Dataset {
        let data: Vec<f64> = (0..10).flat_map(|i| [i as f64 / 10.0, 0.5]).collect();
        Dataset::new(
            Tensor::new(vec![10, 2], data).unwrap(),
            (0..10).collect(),
            10,
        )
        .unwrap()
    }

    /// Blob net fitted far past separation so the training set is memorized.
    fn trained_blob_net(seed: u64) -> (Network, Dataset) {
        let data = synthetic_blobs(40, 2, 0.5, 300 + seed);
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
            for i in 0..data.len() {
                let (x, y) = data.example(i);
                let (_, g, _) = ce_loss_grads(&net, &x, y).unwrap();
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi / data.len() as f64;
                }
            }
            net.apply_update(&grad, 0.5).unwrap();
        }
        (net, data)
    }

    #[test]
    fn constant_logits_tie_to_class_zero() {
        let mut net = init_network(vec![LayerSpec::Affine { out_dim: 10 }], vec![2], 1).unwrap();
        net.theta.iter_mut().for_each(|w| *w = 0.0);
        let data = ten_class_point_dataset();
        assert_eq!(standard_error(&net, &data).unwrap(), 0.9);
    }

    #[test]
    fn memorizing_net_has_zero_standard_error() {
        let (net, data) = trained_blob_net(0);
        assert_eq!(standard_error(&net, &data).unwrap(), 0.0);
    }

    #[test]
    fn standard_error_matches_per_example_loop() {
        let net = init_network(
            vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu, LayerSpec::Affine { out_dim: 2 }],
            vec![2],
            17,
        )
        .unwrap();
        let data = synthetic_blobs(30, 2, 0.3, 17);
        let mut wrong = 0;
        for i in 0..data.len() {
            let (x, y) = data.example(i);
            let (logits, _) = net.forward(&x).unwrap();
            let mut best = 0;
            for j in 1..logits.data.len() {
                if logits.data[j] > logits.data[best] {
                    best = j;
                }
            }
            if best != y {
                wrong += 1;
            }
        }
        let expected = wrong as f64 / data.len() as f64;
        assert_eq!(standard_error(&net, &data).unwrap(), expected);
    }

    #[test]
    fn zero_radius_verified_error_equals_standard_error() {
        for seed in [3, 4, 5] {
            let (net, data) = trained_blob_net(seed);
            let std_err = standard_error(&net, &data).unwrap();
            let ver_err = ibp_verified_error(&net, &data, 0.0).unwrap();
            assert_eq!(std_err, ver_err, "seed {seed}");
        }
    }

    #[test]
    fn huge_radius_verifies_nothing() {
        for seed in [6, 7, 8] {
            let net = init_network(
                vec![
                    LayerSpec::Affine { out_dim: 12 },
                    LayerSpec::Relu,
                    LayerSpec::Affine { out_dim: 3 },
                ],
                vec![4],
                seed,
            )
            .unwrap();
            let mut rng = crate::rng::derive_rng(seed, &[9]);
            let n = 20;
            let data = Dataset::new(
                Tensor::new(vec![n, 4], (0..4 * n).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap(),
                (0..n).map(|i| i % 3).collect(),
                3,
            )
            .unwrap();
            let err = ibp_verified_error(&net, &data, 10.0).unwrap();
            assert_eq!(err, 1.0, "seed {seed}");
        }
    }

    #[test]
    fn zero_radius_pgd_error_equals_standard_error() {
        let (net, data) = trained_blob_net(9);
        let std_err = standard_error(&net, &data).unwrap();
        let pgd_err = pgd_error(&net, &data, 0.0, 5, 0.0, 1).unwrap();
        assert_eq!(std_err, pgd_err);
    }

    #[test]
    fn longer_attacks_do_not_weaken() {
        let (net, data) = trained_blob_net(10);
        let eps = 0.08;
        let short = pgd_error(&net, &data, eps, 1, eps / 4.0, 2).unwrap();
        let long = pgd_error(&net, &data, eps, 200, eps / 4.0, 2).unwrap();
        assert!(long >= short - 1e-9, "short {short}, long {long}");
    }

    #[test]
    fn pgd_error_is_seed_deterministic() {
        let (net, data) = trained_blob_net(11);
        let a = pgd_error(&net, &data, 0.05, 20, 0.0125, 7).unwrap();
        let b = pgd_error(&net, &data, 0.05, 20, 0.0125, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn error_chain_is_ordered_on_trained_and_random_nets() {
        for seed in 0..6u64 {
            let (net, data) = if seed < 3 {
                trained_blob_net(seed)
            } else {
                let net = init_network(
                    vec![
                        LayerSpec::Affine { out_dim: 6 },
                        LayerSpec::Relu,
                        LayerSpec::Affine { out_dim: 2 },
                    ],
                    vec![2],
                    40 + seed,
                )
                .unwrap();
                (net, synthetic_blobs(25, 2, 0.4, 40 + seed))
            };
            for eps in [0.0, 0.02, 0.08] {
                let s = standard_error(&net, &data).unwrap();
                let p = pgd_error(&net, &data, eps, 30, eps / 4.0, seed).unwrap();
                let v = ibp_verified_error(&net, &data, eps).unwrap();
                assert!(s <= p && p <= v, "seed {seed} eps {eps}: {s} {p} {v}");
            }
        }
    }

    #[test]
    fn report_schema_is_stable() {
        let (net, data) = trained_blob_net(12);
        let attack = AttackConfig::new(0.05);
        let report = evaluate(&net, &data, 0.05, &attack, 3, "blob.json").unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let keys: Vec<&str> = json
            .split('"')
            .skip(1)
            .step_by(2)
            .take_while(|k| *k != "blob.json")
            .filter(|k| !k.is_empty())
            .collect();
        assert_eq!(
            keys,
            vec![
                "standard_error",
                "verified_error",
                "pgd_error",
                "eps",
                "pgd_steps",
                "n_examples",
                "model_id"
            ]
        );
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.standard_error <= report.pgd_error);
        assert!(report.pgd_error <= report.verified_error);
        assert_eq!(report.n_examples, data.len());
    }

    #[test]
    fn verify_rows_match_library_calls() {
        let (net, data) = trained_blob_net(13);
        let eps = 0.04;
        let records = verify_records(&net, &data, eps).unwrap();
        assert_eq!(records.len(), data.len());
        let verified_fraction =
            records.iter().filter(|r| r.verified).count() as f64 / data.len() as f64;
        let from_metric = 1.0 - ibp_verified_error(&net, &data, eps).unwrap();
        assert!((verified_fraction - from_metric).abs() < 1e-12);
        for r in &records {
            let (x, y) = data.example(r.index);
            assert_eq!(r.label, y);
            assert_eq!(r.prediction, predict(&net, &x).unwrap());
            let (mb, _) = margin_lower_bounds(&net, &x, eps, y).unwrap();
            let min = mb.lower.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(r.min_margin_lower, min);
        }
        let csv = verify_csv(&records);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], VERIFY_HEADER);
        assert_eq!(lines.len(), data.len() + 1);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[1].ends_with(",0") || lines[1].ends_with(",1"));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let net = init_network(vec![LayerSpec::Affine { out_dim: 2 }], vec![2], 1).unwrap();
        let empty =
            Dataset::new(Tensor::new(vec![0, 2], vec![]).unwrap(), vec![], 2).unwrap();
        assert!(standard_error(&net, &empty).is_err());
        assert!(ibp_verified_error(&net, &empty, 0.1).is_err());
        assert!(pgd_error(&net, &empty, 0.1, 5, 0.02, 1).is_err());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let net = init_network(vec![LayerSpec::Affine { out_dim: 3 }], vec![2], 1).unwrap();
        let data = synthetic_blobs(5, 2, 0.4, 1);
        assert!(matches!(
            standard_error(&net, &data),
            Err(CertError::ShapeMismatch { .. })
        ));
    }
}
