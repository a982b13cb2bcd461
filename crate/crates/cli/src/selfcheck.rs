//! Built-in self-check: gradient, probability-algebra and metric-oracle suites
//! on small deterministic fixtures.

use expltv::features::FeatureSchema;
use expltv::metrics::{self, oracle};
use expltv::model::{Architecture, ExpLtv, LossWeights, Targets, Variant};
use expltv::numerics::GradCheckConfig;
use expltv::synthcohort::{generate, CohortSpec, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Suite = Box<dyn Fn() -> Outcome>;

fn fixture(n: usize, seed: u64) -> std::result::Result<Dataset, String> {
    generate(&CohortSpec {
        n_users: n,
        seed,
        purchase_rate: 0.5,
        whale_rate: 0.15,
        ..CohortSpec::default()
    })
    .map_err(|e| e.to_string())
}

fn gradients(corrupt: bool) -> Outcome {
    let data = fixture(16, 3)?;
    let schema = FeatureSchema::fit(&data).map_err(|e| e.to_string())?;
    let targets = Targets::from_records(&data.records);
    let mut checked = 0;
    for variant in Variant::ALL {
        let arch = Architecture {
            variant,
            ..Architecture::default()
        };
        let mut model = ExpLtv::new(arch, schema.clone(), 1).map_err(|e| e.to_string())?;
        let users = model.encode(&data.records).map_err(|e| e.to_string())?;
        for weights in [
            LossWeights { gwd: 1.0, ziln: 0.0 },
            LossWeights { gwd: 0.0, ziln: 1.0 },
            LossWeights::joint(15.0),
        ] {
            model.params.zero_grad();
            model
                .loss_and_grad(&users, &targets, weights)
                .map_err(|e| e.to_string())?;
            if corrupt {
                let block = &mut model.params.blocks_mut()[0];
                block.grad.as_mut_slice()[0] += 1.0;
            }
            let report = model
                .check_stored_gradients(&users, &targets, weights, &GradCheckConfig::default())
                .map_err(|e| e.to_string())?;
            if !report.passed() {
                return Err(format!(
                    "{variant}: blocks {:?}, max rel error {:.2e}",
                    report.failing_blocks(),
                    report.max_rel_error()
                ));
            }
            checked += report.checked();
        }
    }
    Ok(format!("{checked} coordinates"))
}

fn probability_algebra() -> Outcome {
    let data = fixture(200, 5)?;
    let schema = FeatureSchema::fit(&data).map_err(|e| e.to_string())?;
    let mut passes = 0;
    for variant in Variant::ALL {
        for seed in 0..5 {
            let model = ExpLtv::new(
                Architecture {
                    variant,
                    ..Architecture::default()
                },
                schema.clone(),
                seed,
            )
            .map_err(|e| e.to_string())?;
            let users = model.encode(&data.records).map_err(|e| e.to_string())?;
            let t = model.forward(&users).map_err(|e| e.to_string())?;
            for i in 0..t.len() {
                let y = t.y[i];
                let ok = (y[0] + y[1] - 1.0).abs() <= 1e-9
                    && (t.p_gwptr[i] + t.p_ngwptr[i] - 1.0).abs() <= 1e-9
                    && t.p_ptr[i] > 0.0
                    && t.p_ptr[i] < 1.0
                    && t.ltv[i] >= 0.0
                    && t.ltv[i].is_finite();
                if !ok {
                    return Err(format!("{variant} seed {seed} user {i}"));
                }
                passes += 1;
            }
        }
    }
    Ok(format!("{passes} user predictions"))
}

fn metric_oracles() -> Outcome {
    // tiny instances trip the few-whales warning on nearly every case
    let level = log::max_level();
    log::set_max_level(log::LevelFilter::Error);
    let out = compare_with_oracles();
    log::set_max_level(level);
    out
}

fn compare_with_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let n = rng.gen_range(1..=40);
        let tied = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    f64::from(rng.gen_range(0..6))
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            })
            .collect();
        let truth: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    0.0
                } else {
                    rng.gen_range(0.0f64..8.0).exp()
                }
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let ids: Vec<u64> = (0..n as u64).rev().collect();
        let k = rng.gen_range(0..=n);
        let gini_ok = match (
            metrics::gini_normalized(&scores, &truth).ok(),
            oracle::gini_normalized(&scores, &truth),
        ) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (a, b) => a.is_none() && b.is_none(),
        };
        let ok = gini_ok
            && metrics::auc(&scores, &labels).ok() == oracle::auc(&scores, &labels)
            && metrics::recall_at_k(&scores, &labels, &ids, k).ok() == oracle::recall_at_k(&scores, &labels, &ids, k)
            && metrics::level_curve(&scores, &truth, &labels, &ids, k)
                .ok()
                .map(|c| (c.detected, c.totals))
                == oracle::level_curve(&scores, &truth, &labels, &ids, k);
        if !ok {
            return Err(format!("case {case} disagrees with the oracle"));
        }
    }
    Ok("300 random instances".into())
}

/// Runs every suite, printing one line each. True when all pass.
pub fn run(corrupt_gradient: bool) -> bool {
    let suites: [(&str, Suite); 3] = [
        ("gradient", Box::new(move || gradients(corrupt_gradient))),
        ("probability-algebra", Box::new(probability_algebra)),
        ("metric-oracle", Box::new(metric_oracles)),
    ];
    let mut all = true;
    for (name, suite) in suites {
        match suite() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                all = false;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    all
}
