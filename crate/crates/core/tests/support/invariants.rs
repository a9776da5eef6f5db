use proptest::prelude::*;
use std::fmt::Debug;

use proptest::test_runner::{Config, RngSeed, TestCaseError, TestRunner};
use rand::Rng as _;
use ssa_core::annealing::{
    anti_probability, init_random, init_temperature, probs_at_epoch, schedule_value,
    AnnealSchedule, DecayShape, InitDistribution, RandomAnnealConfig, TemperatureConfig,
    TemperatureVariant,
};
use ssa_core::masking::{
    complement, finalize, realize, sparsity, Granularity, LayerMask, LayerProbs, MaskSet,
    ProbabilitySet,
};
use ssa_core::nn::{mlp, Network};
use ssa_core::pruning::{
    magnitude_mask, make_iterative_schedule, prune_increment, quota, random_mask, PruneSpec,
    Selector,
};
use ssa_core::rng::{stream, Purpose};
use ssa_core::Tensor;

pub fn config() -> Config {
    Config {
        cases: 128,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn shapes_strategy() -> impl Strategy<Value = Vec<(String, Vec<usize>)>> {
    prop::collection::vec((1usize..12, 1usize..12), 1..4).prop_map(|dims| {
        dims.into_iter()
            .enumerate()
            .map(|(i, (r, c))| (format!("layers.{i}.weight"), vec![r, c]))
            .collect()
    })
}

fn random_bits(shapes: &[(String, Vec<usize>)], seed: u64) -> MaskSet {
    let mut rng = stream(seed, Purpose::Mask, 99);
    MaskSet {
        layers: shapes
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                LayerMask::new(
                    name.clone(),
                    shape.clone(),
                    (0..n).map(|_| rng.random_range(0..2u8)).collect(),
                )
                .unwrap()
            })
            .collect(),
    }
}

fn random_weights(shapes: &[(String, Vec<usize>)], seed: u64) -> Vec<Tensor> {
    let mut rng = stream(seed, Purpose::Init, 99);
    shapes
        .iter()
        .map(|(_, shape)| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            t
        })
        .collect()
}

/// Independent oracle: indices of the `k` smallest |w|, ties by flat index.
fn smallest_k(w: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap().then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort();
    out
}

fn zero_positions(bits: &[u8]) -> Vec<usize> {
    bits.iter()
        .enumerate()
        .filter(|(_, &b)| b == 0)
        .map(|(i, _)| i)
        .collect()
}

/// Whether some layer's quota at `level` would remove every entry.
fn severs(shapes: &[(String, Vec<usize>)], level: f64) -> bool {
    shapes.iter().any(|(_, s)| {
        let n = s.iter().product();
        quota(level, n) >= n
    })
}

fn dominated(next: &MaskSet, prev: &MaskSet) -> bool {
    next.layers
        .iter()
        .zip(&prev.layers)
        .all(|(a, b)| a.bits.iter().zip(&b.bits).all(|(x, y)| x <= y))
}

/// Runs `test` over `config().cases` generated instances.
fn check<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: Debug,
{
    TestRunner::new(config())
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

// ---- masking ----

pub fn realize_layer_means_within_three_sigma() -> Result<(), String> {
    check((shapes_strategy(), any::<u64>()), |(shapes, seed)| {
        let mut rng = stream(seed, Purpose::AnnealInit, 0);
        let layers: Vec<LayerProbs> = shapes
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                LayerProbs::new(
                    name.clone(),
                    shape.clone(),
                    (0..n).map(|_| rng.random::<f64>()).collect(),
                )
            })
            .collect();
        let probs = ProbabilitySet::new(layers, MaskSet::ones(&shapes)).unwrap();
        let draws = 1000;
        let mut bern = stream(seed, Purpose::Bernoulli, 0);
        let mut active = vec![0usize; shapes.len()];
        for _ in 0..draws {
            let m = realize(&probs, &mut bern);
            for (a, l) in active.iter_mut().zip(&m.layers) {
                *a += l.active();
            }
        }
        for (l, layer) in probs.layers.iter().enumerate() {
            let n = layer.len() as f64;
            let mean_p = layer.iter().sum::<f64>() / n;
            let var: f64 =
                layer.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n * draws as f64);
            let observed = active[l] as f64 / (n * draws as f64);
            prop_assert!(
                (observed - mean_p).abs() <= 3.0 * var.sqrt() + 1e-12,
                "layer {l}: observed {observed}, expected {mean_p}, sigma {}",
                var.sqrt()
            );
        }

        Ok(())
    })
}

pub fn realize_binary_probabilities_is_deterministic() -> Result<(), String> {
    check((shapes_strategy(), any::<u64>()), |(shapes, seed)| {
        let m = random_bits(&shapes, seed);
        let probs = ProbabilitySet::from_mask(&m);
        let mut rng = stream(seed, Purpose::Bernoulli, 0);
        prop_assert_eq!(realize(&probs, &mut rng), m);

        Ok(())
    })
}

pub fn complement_is_an_involution() -> Result<(), String> {
    check((shapes_strategy(), any::<u64>()), |(shapes, seed)| {
        let m = random_bits(&shapes, seed);
        let c = complement(&m);
        prop_assert_eq!(&complement(&c), &m);
        prop_assert!((sparsity(&m) + sparsity(&c) - 1.0).abs() <= f64::EPSILON);
        for (a, b) in m.layers.iter().zip(&c.layers) {
            prop_assert!(a.bits.iter().zip(&b.bits).all(|(x, y)| x + y == 1));
        }

        Ok(())
    })
}

pub fn biases_are_never_masked() -> Result<(), String> {
    check(
        (any::<u64>(), 4usize..10, 0.0f64..0.6),
        |(seed, hidden, rho)| {
            let mut net = Network::new(
                &[5],
                &mlp(5, &[hidden], 3),
                &mut stream(seed, Purpose::Init, 0),
            )
            .unwrap();
            let shapes = net.weight_shapes();
            let spec = PruneSpec {
                selector: Selector::RandomUnstructured,
                granularity: Granularity::Layerwise,
                target_sparsity: rho,
            };
            let mask = random_mask(&shapes, &spec, &mut stream(seed, Purpose::Mask, 0)).unwrap();
            prop_assert_eq!(
                mask.len(),
                net.weights().iter().map(|w| w.len()).sum::<usize>()
            );
            let biases: Vec<Tensor> = net.biases().into_iter().cloned().collect();
            finalize(&mut net.weights_mut(), &mask).unwrap();
            let after: Vec<Tensor> = net.biases().into_iter().cloned().collect();
            prop_assert_eq!(after, biases);

            Ok(())
        },
    )
}

// ---- pruning ----

pub fn layerwise_quotas_are_exact() -> Result<(), String> {
    check(
        (shapes_strategy(), 0.0f64..0.9, any::<u64>()),
        |(shapes, rho, seed)| {
            let spec = PruneSpec {
                selector: Selector::RandomUnstructured,
                granularity: Granularity::Layerwise,
                target_sparsity: rho,
            };
            let weights = random_weights(&shapes, seed);
            let refs: Vec<&Tensor> = weights.iter().collect();
            let masks = [
                random_mask(&shapes, &spec, &mut stream(seed, Purpose::Mask, 0)),
                magnitude_mask(
                    &shapes,
                    &refs,
                    &PruneSpec {
                        selector: Selector::MagnitudeL1,
                        ..spec
                    },
                ),
            ];
            for m in masks {
                match m {
                    Ok(m) => {
                        for l in &m.layers {
                            prop_assert_eq!(l.zeros(), quota(rho, l.len()));
                        }
                    }
                    Err(_) => prop_assert!(severs(&shapes, rho)),
                }
            }

            Ok(())
        },
    )
}

pub fn global_quota_is_exact() -> Result<(), String> {
    check(
        (shapes_strategy(), 0.0f64..0.6, any::<u64>()),
        |(shapes, rho, seed)| {
            let spec = PruneSpec {
                selector: Selector::RandomUnstructured,
                granularity: Granularity::Global,
                target_sparsity: rho,
            };
            if let Ok(m) = random_mask(&shapes, &spec, &mut stream(seed, Purpose::Mask, 0)) {
                prop_assert_eq!(m.len() - m.active(), quota(rho, m.len()));
                prop_assert!(m.layers.iter().all(|l| l.active() > 0));
            }

            Ok(())
        },
    )
}

pub fn magnitude_mask_prunes_smallest() -> Result<(), String> {
    check(
        (shapes_strategy(), 0.0f64..0.9, any::<u64>()),
        |(shapes, rho, seed)| {
            let weights = random_weights(&shapes, seed);
            let refs: Vec<&Tensor> = weights.iter().collect();
            let spec = PruneSpec {
                selector: Selector::MagnitudeL1,
                granularity: Granularity::Layerwise,
                target_sparsity: rho,
            };
            if let Ok(m) = magnitude_mask(&shapes, &refs, &spec) {
                for (l, w) in m.layers.iter().zip(&weights) {
                    prop_assert_eq!(
                        zero_positions(&l.bits),
                        smallest_k(w.data(), quota(rho, l.len()))
                    );
                }
            }

            Ok(())
        },
    )
}

pub fn iterative_pruning_is_monotone_and_exact() -> Result<(), String> {
    check(
        (
            shapes_strategy(),
            0.0f64..0.9,
            1usize..8,
            any::<bool>(),
            any::<u64>(),
        ),
        |(shapes, rho, phi, magnitude, seed)| {
            let schedule = make_iterative_schedule(rho, phi).unwrap();
            prop_assert_eq!(*schedule.levels().last().unwrap(), rho);
            prop_assert!(schedule.levels().windows(2).all(|w| w[0] <= w[1]));
            let selector = if magnitude {
                Selector::MagnitudeL1
            } else {
                Selector::RandomUnstructured
            };
            let mut rng = stream(seed, Purpose::Mask, 0);
            let mut current = MaskSet::ones(&shapes);
            for (k, &level) in schedule.levels().iter().enumerate() {
                // Weights drift between pruning steps, as they would during tuning.
                let weights = random_weights(&shapes, seed.wrapping_add(k as u64));
                let refs: Vec<&Tensor> = weights.iter().collect();
                let Ok(next) = prune_increment(
                    &current,
                    level,
                    selector,
                    Granularity::Layerwise,
                    &refs,
                    &mut rng,
                ) else {
                    prop_assert!(severs(&shapes, level));
                    return Ok(());
                };
                prop_assert!(dominated(&next, &current));
                for l in &next.layers {
                    prop_assert_eq!(l.zeros(), quota(level, l.len()));
                }
                current = next;
            }

            Ok(())
        },
    )
}

pub fn single_step_iterative_equals_one_shot() -> Result<(), String> {
    check(
        (shapes_strategy(), 0.0f64..0.9, any::<u64>()),
        |(shapes, rho, seed)| {
            let weights = random_weights(&shapes, seed);
            let refs: Vec<&Tensor> = weights.iter().collect();
            let schedule = make_iterative_schedule(rho, 1).unwrap();
            prop_assert_eq!(schedule.levels(), &[rho][..]);
            for selector in [Selector::RandomUnstructured, Selector::MagnitudeL1] {
                let spec = PruneSpec {
                    selector,
                    granularity: Granularity::Layerwise,
                    target_sparsity: rho,
                };
                let one = match selector {
                    Selector::RandomUnstructured => {
                        random_mask(&shapes, &spec, &mut stream(seed, Purpose::Mask, 1))
                    }
                    Selector::MagnitudeL1 => magnitude_mask(&shapes, &refs, &spec),
                };
                let iter = prune_increment(
                    &MaskSet::ones(&shapes),
                    schedule.levels()[0],
                    selector,
                    Granularity::Layerwise,
                    &refs,
                    &mut stream(seed, Purpose::Mask, 1),
                );
                match (one, iter) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(
                        false,
                        "one-shot and single-step iterative disagree on failure"
                    ),
                }
            }

            Ok(())
        },
    )
}

// ---- annealing ----

pub fn schedule_is_monotone_with_exact_endpoints() -> Result<(), String> {
    check(
        (0.0f64..2.0, 0.0f64..2.0, 1usize..50, any::<bool>()),
        |(a, b, steps, cosine)| {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            let shape = if cosine {
                DecayShape::Cosine
            } else {
                DecayShape::Linear
            };
            let s = AnnealSchedule::new(shape, hi, lo, steps).unwrap();
            prop_assert_eq!(schedule_value(&s, 0), hi);
            prop_assert_eq!(schedule_value(&s, steps), lo);
            prop_assert_eq!(schedule_value(&s, steps + 3), lo);
            let values: Vec<f64> = (0..=steps).map(|t| schedule_value(&s, t)).collect();
            prop_assert!(values.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(values.iter().all(|&v| (lo..=hi).contains(&v)));

            Ok(())
        },
    )
}

pub fn annealed_probabilities_are_monotone_and_bounded() -> Result<(), String> {
    check(
        (
            shapes_strategy(),
            any::<u64>(),
            0.0f64..=1.0,
            any::<bool>(),
            any::<bool>(),
            1usize..10,
            any::<bool>(),
            0.0f64..0.95,
        ),
        |(shapes, seed, tau0, full, cosine, phi, random, rho)| {
            let decay = if cosine {
                DecayShape::Cosine
            } else {
                DecayShape::Linear
            };
            let init = if random {
                let cfg = RandomAnnealConfig {
                    distribution: InitDistribution::Uniform,
                    sparsity: rho,
                    decay,
                    epochs: phi,
                };
                match init_random(&shapes, &cfg, &mut stream(seed, Purpose::AnnealInit, 0)) {
                    Ok(init) => init,
                    // Tiny layers can draw every probability below ρ.
                    Err(ssa_core::Error::SeveredLayer { .. }) => return Ok(()),
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            } else {
                let variant = if full {
                    TemperatureVariant::FullScaling
                } else {
                    TemperatureVariant::ReverseDropout
                };
                let cfg = TemperatureConfig {
                    tau0,
                    variant,
                    decay,
                    epochs: phi,
                };
                init_temperature(&random_bits(&shapes, seed), &cfg).unwrap()
            };
            prop_assert_eq!(&probs_at_epoch(&init, decay, phi, 0), &init);
            let mut prev = init.clone();
            for e in 1..=phi + 2 {
                let p = probs_at_epoch(&init, decay, phi, e);
                for ((now, before), term) in
                    p.layers.iter().zip(&prev.layers).zip(&init.terminal.layers)
                {
                    for i in 0..now.len() {
                        let (x, y) = (now.get(i), before.get(i));
                        prop_assert!((0.0..=1.0).contains(&x));
                        if term.bits[i] == 1 {
                            prop_assert!(x >= y, "kept entry decreased {y} -> {x}");
                        } else {
                            prop_assert!(x <= y, "pruned entry increased {y} -> {x}");
                        }
                    }
                }
                if e >= phi {
                    prop_assert!(p.is_binary());
                    prop_assert_eq!(&p, &ProbabilitySet::from_mask(&init.terminal));
                }
                prev = p;
            }

            Ok(())
        },
    )
}

pub fn temperature_entries_follow_the_schedule() -> Result<(), String> {
    check(
        (
            shapes_strategy(),
            any::<u64>(),
            0.0f64..=1.0,
            any::<bool>(),
            1usize..10,
            0usize..12,
        ),
        |(shapes, seed, tau0, full, phi, e)| {
            let variant = if full {
                TemperatureVariant::FullScaling
            } else {
                TemperatureVariant::ReverseDropout
            };
            let cfg = TemperatureConfig {
                tau0,
                variant,
                decay: DecayShape::Cosine,
                epochs: phi,
            };
            let target = random_bits(&shapes, seed);
            let p = probs_at_epoch(&init_temperature(&target, &cfg).unwrap(), cfg.decay, phi, e);
            let tau = schedule_value(
                &AnnealSchedule::new(DecayShape::Cosine, tau0, 0.0, phi).unwrap(),
                e,
            );
            for (l, m) in p.layers.iter().zip(&target.layers) {
                for i in 0..l.len() {
                    let expected = match (m.bits[i], variant) {
                        (0, _) => tau,
                        (_, TemperatureVariant::ReverseDropout) => 1.0,
                        (_, TemperatureVariant::FullScaling) => 1.0 - tau,
                    };
                    prop_assert!(
                        (l.get(i) - expected).abs() <= 1e-15,
                        "{} vs {expected}",
                        l.get(i)
                    );
                }
            }

            Ok(())
        },
    )
}

pub fn anti_probability_is_an_involution() -> Result<(), String> {
    check(
        (
            shapes_strategy(),
            any::<u64>(),
            0.0f64..=1.0,
            1usize..10,
            0usize..12,
        ),
        |(shapes, seed, tau0, phi, e)| {
            let cfg = TemperatureConfig {
                tau0,
                epochs: phi,
                ..TemperatureConfig::default()
            };
            let init = init_temperature(&random_bits(&shapes, seed), &cfg).unwrap();
            let p = probs_at_epoch(&init, cfg.decay, phi, e);
            let anti = anti_probability(&p);
            prop_assert_eq!(&anti_probability(&anti), &p);
            prop_assert_eq!(&anti.terminal, &complement(&p.terminal));
            for (a, b) in p.layers.iter().zip(&anti.layers) {
                for i in 0..a.len() {
                    prop_assert_eq!(a.get(i) + b.get(i), 1.0);
                }
            }
            prop_assert!((p.mean() + anti.mean() - 1.0).abs() <= 1e-12);
            // Annealing the anti-probability lands on the complementary mask.
            let anti_init = anti_probability(&init);
            prop_assert_eq!(probs_at_epoch(&anti_init, cfg.decay, phi, e), anti);

            Ok(())
        },
    )
}

pub fn reverse_dropout_never_drops_kept_entries() -> Result<(), String> {
    check(
        (shapes_strategy(), any::<u64>(), 0.0f64..=1.0, 1usize..6),
        |(shapes, seed, tau0, phi)| {
            let cfg = TemperatureConfig {
                tau0,
                variant: TemperatureVariant::ReverseDropout,
                decay: DecayShape::Cosine,
                epochs: phi,
            };
            let target = random_bits(&shapes, seed);
            let init = init_temperature(&target, &cfg).unwrap();
            let mut rng = stream(seed, Purpose::Bernoulli, 1);
            for e in 0..=phi {
                let p = probs_at_epoch(&init, cfg.decay, phi, e);
                for _ in 0..5 {
                    let m = realize(&p, &mut rng);
                    prop_assert!(target.is_subset_of(&m));
                }
            }

            Ok(())
        },
    )
}

pub fn uniform_random_annealing_starts_half_active() -> Result<(), String> {
    check(
        (0.0f64..0.98, 500usize..3000, any::<u64>()),
        |(rho, n, seed)| {
            let shapes = vec![("w".to_string(), vec![n])];
            let cfg = RandomAnnealConfig {
                distribution: InitDistribution::Uniform,
                sparsity: rho,
                decay: DecayShape::Linear,
                epochs: 5,
            };
            let init =
                init_random(&shapes, &cfg, &mut stream(seed, Purpose::AnnealInit, 0)).unwrap();
            let p0 = probs_at_epoch(&init, cfg.decay, cfg.epochs, 0);
            let m = realize(&p0, &mut stream(seed, Purpose::Bernoulli, 0));
            let frac = m.active() as f64 / n as f64;
            // U(0,1) probabilities followed by a Bernoulli draw: each entry is
            // active with probability 1/2.
            let sigma = (0.25 / n as f64).sqrt();
            prop_assert!((frac - 0.5).abs() <= 3.0 * sigma, "active {frac} (n={n})");
            for (l, t) in init.layers.iter().zip(&init.terminal.layers) {
                for i in 0..l.len() {
                    prop_assert_eq!(t.bits[i] == 1, l.get(i) >= rho);
                }
            }

            Ok(())
        },
    )
}

pub type Check = fn() -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    (
        "realize_layer_means_within_three_sigma",
        realize_layer_means_within_three_sigma,
    ),
    (
        "realize_binary_probabilities_is_deterministic",
        realize_binary_probabilities_is_deterministic,
    ),
    ("complement_is_an_involution", complement_is_an_involution),
    ("biases_are_never_masked", biases_are_never_masked),
    ("layerwise_quotas_are_exact", layerwise_quotas_are_exact),
    ("global_quota_is_exact", global_quota_is_exact),
    (
        "magnitude_mask_prunes_smallest",
        magnitude_mask_prunes_smallest,
    ),
    (
        "iterative_pruning_is_monotone_and_exact",
        iterative_pruning_is_monotone_and_exact,
    ),
    (
        "single_step_iterative_equals_one_shot",
        single_step_iterative_equals_one_shot,
    ),
    (
        "schedule_is_monotone_with_exact_endpoints",
        schedule_is_monotone_with_exact_endpoints,
    ),
    (
        "annealed_probabilities_are_monotone_and_bounded",
        annealed_probabilities_are_monotone_and_bounded,
    ),
    (
        "temperature_entries_follow_the_schedule",
        temperature_entries_follow_the_schedule,
    ),
    (
        "anti_probability_is_an_involution",
        anti_probability_is_an_involution,
    ),
    (
        "reverse_dropout_never_drops_kept_entries",
        reverse_dropout_never_drops_kept_entries,
    ),
    (
        "uniform_random_annealing_starts_half_active",
        uniform_random_annealing_starts_half_active,
    ),
];
