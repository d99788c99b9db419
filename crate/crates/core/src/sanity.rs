//! Critic training on correlated Gaussian pairs with a closed-form MI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infomax::{derangement, Discriminator, DiscriminatorConfig};
use crate::params::{Mat, ParameterStore};
use crate::training::{optimizer_update, AdamConfig, Moments, WINDOW};

/// MI in nats of a bivariate standard normal with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Band a smoothed estimate must fall in to pass.
pub fn tolerance_band(true_mi: f64) -> (f64, f64) {
    (0.9 * true_mi - 0.05, true_mi + 0.05)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SanityConfig {
    pub rho: f64,
    pub steps: u64,
    pub seed: u64,
    pub batch_size: usize,
    /// Fake pairings per real pair, each from its own derangement.
    pub negatives: usize,
    pub critic: DiscriminatorConfig,
    pub learning_rate: f64,
}

impl SanityConfig {
    pub fn new(rho: f64, steps: u64, seed: u64) -> Self {
        Self {
            rho,
            steps,
            seed,
            batch_size: 256,
            negatives: 4,
            critic: DiscriminatorConfig {
                hidden_units: 64,
                hidden_layers: 2,
            },
            learning_rate: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.is_nan() || self.rho.abs() >= 1.0 {
            return Err(Error::Config(format!("rho must satisfy |rho| < 1, got {}", self.rho)));
        }
        if self.batch_size < 2 || self.negatives == 0 {
            return Err(Error::Config(
                "batch size must be at least 2 and negatives at least 1".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SanityRow {
    pub step: u64,
    /// DV estimate of this step's batch.
    pub raw: f64,
    /// Mean of the last `WINDOW` raw estimates.
    pub smoothed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SanityRun {
    pub true_mi: f64,
    pub rows: Vec<SanityRow>,
}

impl SanityRun {
    pub fn final_estimate(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.smoothed)
    }

    pub fn max_smoothed(&self) -> f64 {
        self.rows.iter().map(|r| r.smoothed).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn within_band(&self) -> bool {
        let (lo, hi) = tolerance_band(self.true_mi);
        let e = self.final_estimate();
        e >= lo && e <= hi
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,dv_estimate,true_mi\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, r.smoothed, self.true_mi));
        }
        s
    }
}

/// Trains a critic on `(x, y)` with `y = rho x + sqrt(1 - rho^2) z`. Fake
/// pairs combine `x_j` with `y_i` for `j` drawn from fresh derangements.
pub fn run(config: &SanityConfig) -> Result<SanityRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParameterStore::new();
    let critic = Discriminator::new(config.critic.clone(), 1, 1, &mut store, &mut rng)?;
    let mut moments = Moments::zeros(&store);
    let b = config.batch_size;
    let k = config.negatives;
    let noise = (1.0 - config.rho * config.rho).sqrt();
    let mut window = std::collections::VecDeque::with_capacity(WINDOW);
    let mut rows = Vec::with_capacity(config.steps as usize);

    for step in 1..=config.steps {
        let x: Vec<f64> = (0..b).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&x| config.rho * x + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut slots = x.clone();
        let mut globals = y.clone();
        for _ in 0..k {
            let perm = derangement(b, &mut rng)?;
            slots.extend(perm.iter().map(|&j| x[j]));
            globals.extend_from_slice(&y);
        }
        let n = b * (k + 1);
        let mut g = Graph::new();
        let s = g.constant(Mat::from_shape_vec((n, 1), slots).expect("sized"));
        let t = g.constant(Mat::from_shape_vec((n, 1), globals).expect("sized"));
        let scores = critic.score_rows(&mut g, &store, s, t)?;
        let joint = g.rows(scores, 0, b);
        let fake = g.rows(scores, b, n);
        let mean_joint = g.mean(joint);
        let lme = g.log_mean_exp(fake);
        let dv = g.sub(mean_joint, lme);
        let loss = g.scale(dv, -1.0);
        let raw = g.scalar_value(dv);
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                term: "DV estimate",
                step,
                value: raw,
            });
        }
        store.zero_grads();
        g.backward(loss).accumulate_into(&mut store);
        optimizer_update(
            &mut store,
            &mut moments,
            config.learning_rate,
            config.learning_rate,
            Some(5.0),
            AdamConfig::default(),
        )?;

        if window.len() == WINDOW {
            window.pop_front();
        }
        window.push_back(raw);
        let smoothed = window.iter().sum::<f64>() / window.len() as f64;
        rows.push(SanityRow { step, raw, smoothed });
    }
    Ok(SanityRun {
        true_mi: gaussian_mi(config.rho),
        rows,
    })
}
