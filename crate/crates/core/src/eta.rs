//! Exogenous stochastic intensity factors `eta`, sampled as whole grid paths.
//!
//! The value on cell `[t_i, t_{i+1})` only uses randomness realized at or
//! before `t_i`, which is the discrete stand-in for predictability. Every
//! sampled path lies in `[L, U]`.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Bounds, TimeGrid};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EtaModel {
    Constant {
        value: f64,
    },
    /// `eta` frozen at one of finitely many levels for the whole path.
    RandomConstant {
        values: Vec<f64>,
        probs: Vec<f64>,
    },
    /// `L + (U - L) 1{E < t}` with `E ~ Exp(rate)`; `L = 1, U = 2, rate = 1`
    /// is the two-construction counterexample.
    SingleJump {
        #[serde(default = "one")]
        rate: f64,
    },
    /// Continuous-time chain on `{low, high}`.
    TwoStateMarkov {
        low: f64,
        high: f64,
        rate_up: f64,
        rate_down: f64,
        #[serde(default)]
        start_high: f64,
    },
    /// Euler Ornstein-Uhlenbeck `Y` mapped through a logistic into `[L, U]`.
    ClampedDiffusion {
        mean_reversion: f64,
        long_run: f64,
        vol: f64,
        #[serde(default)]
        initial: f64,
    },
    /// Deterministic `base + amplitude * sin(2 pi t / period)`, clipped to `[L, U]`.
    DeterministicSinusoid {
        base: f64,
        amplitude: f64,
        period: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// One sampled `eta` path. `jump_time` carries the driving clock of the
/// single-jump model so callers can couple other constructions to it.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub jump_time: Option<f64>,
}

impl EtaPath {
    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_steps()],
            jump_time: None,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.values[self.grid.cell_of(t)]
    }
}

impl EtaModel {
    pub fn validate(&self, bounds: &Bounds) -> Result<()> {
        let check = |v: f64, what: &str| -> Result<()> {
            if bounds.contains(v) {
                Ok(())
            } else {
                Err(Error::InvalidEta(format!(
                    "{what} = {v} outside [{}, {}]",
                    bounds.lower, bounds.upper
                )))
            }
        };
        match self {
            EtaModel::Constant { value } => check(*value, "value"),
            EtaModel::RandomConstant { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::InvalidEta("values/probs length mismatch".into()));
                }
                for &v in values {
                    check(v, "value")?;
                }
                if probs.iter().any(|&p| !(p > 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidEta("probs must be positive and sum to 1".into()));
                }
                Ok(())
            }
            EtaModel::SingleJump { rate } => {
                if !(*rate > 0.0) {
                    return Err(Error::InvalidEta("jump-clock rate must be positive".into()));
                }
                Ok(())
            }
            EtaModel::TwoStateMarkov {
                low,
                high,
                rate_up,
                rate_down,
                start_high,
            } => {
                check(*low, "low")?;
                check(*high, "high")?;
                if !(*rate_up >= 0.0 && *rate_down >= 0.0) || !(0.0..=1.0).contains(start_high) {
                    return Err(Error::InvalidEta("rates must be >= 0 and start_high in [0,1]".into()));
                }
                Ok(())
            }
            EtaModel::ClampedDiffusion {
                mean_reversion,
                vol,
                ..
            } => {
                if !(*mean_reversion >= 0.0 && *vol >= 0.0) {
                    return Err(Error::InvalidEta("mean_reversion and vol must be >= 0".into()));
                }
                Ok(())
            }
            EtaModel::DeterministicSinusoid { period, .. } => {
                if !(*period > 0.0) {
                    return Err(Error::InvalidEta("period must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, bounds: &Bounds, grid: &TimeGrid, stream: RngStream) -> EtaPath {
        let n = grid.n_steps();
        let mut rng = stream.rng();
        let mut jump_time = None;
        let values = match self {
            EtaModel::Constant { value } => vec![*value; n],
            EtaModel::RandomConstant { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = values.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                vec![values[pick]; n]
            }
            EtaModel::SingleJump { rate } => {
                let e: f64 = Exp1.sample(&mut rng);
                let e = e / rate;
                jump_time = Some(e);
                (0..n)
                    .map(|i| {
                        if e < grid.node(i) {
                            bounds.upper
                        } else {
                            bounds.lower
                        }
                    })
                    .collect()
            }
            EtaModel::TwoStateMarkov {
                low,
                high,
                rate_up,
                rate_down,
                start_high,
            } => {
                let mut high_now = rng.random::<f64>() < *start_high;
                let exp = |rng: &mut rand_chacha::ChaCha8Rng, r: f64| -> f64 {
                    if r > 0.0 {
                        let e: f64 = Exp1.sample(rng);
                        e / r
                    } else {
                        f64::INFINITY
                    }
                };
                let mut next_switch = exp(&mut rng, if high_now { *rate_down } else { *rate_up });
                (0..n)
                    .map(|i| {
                        let t = grid.node(i);
                        while next_switch <= t {
                            high_now = !high_now;
                            next_switch += exp(&mut rng, if high_now { *rate_down } else { *rate_up });
                        }
                        if high_now {
                            *high
                        } else {
                            *low
                        }
                    })
                    .collect()
            }
            EtaModel::ClampedDiffusion {
                mean_reversion,
                long_run,
                vol,
                initial,
            } => {
                let h = grid.step();
                let mut y = *initial;
                (0..n)
                    .map(|_| {
                        let v = bounds.lower + (bounds.upper - bounds.lower) / (1.0 + (-y).exp());
                        let z: f64 = StandardNormal.sample(&mut rng);
                        y += mean_reversion * (long_run - y) * h + vol * h.sqrt() * z;
                        v
                    })
                    .collect()
            }
            EtaModel::DeterministicSinusoid {
                base,
                amplitude,
                period,
            } => (0..n)
                .map(|i| {
                    let t = grid.node(i);
                    bounds.clamp(base + amplitude * (2.0 * std::f64::consts::PI * t / period).sin())
                })
                .collect(),
        };
        EtaPath {
            grid: *grid,
            values,
            jump_time,
        }
    }

    /// Exact finite law of the path, when `eta` takes finitely many paths.
    pub fn finite_law(&self, bounds: &Bounds, grid: &TimeGrid) -> Option<Vec<(EtaPath, f64)>> {
        match self {
            EtaModel::Constant { value } => Some(vec![(EtaPath::constant(*grid, *value), 1.0)]),
            EtaModel::RandomConstant { values, probs } => Some(
                values
                    .iter()
                    .zip(probs)
                    .map(|(&v, &p)| (EtaPath::constant(*grid, v), p))
                    .collect(),
            ),
            EtaModel::DeterministicSinusoid { .. } => Some(vec![(
                self.sample(bounds, grid, RngStream::new(0, 0)),
                1.0,
            )]),
            _ => None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            EtaModel::Constant { .. } | EtaModel::DeterministicSinusoid { .. }
        )
    }

    /// The constant value when `eta` is a.s. one number.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            EtaModel::Constant { value } => Some(*value),
            EtaModel::RandomConstant { values, .. } if values.len() == 1 => Some(values[0]),
            _ => None,
        }
    }

    /// Unconditional mean `E[eta_t]` per cell.
    pub fn mean_path(&self, bounds: &Bounds, grid: &TimeGrid, paths: usize, stream: RngStream) -> Vec<f64> {
        if let Some(law) = self.finite_law(bounds, grid) {
            let mut mean = vec![0.0; grid.n_steps()];
            for (p, w) in &law {
                for (m, v) in mean.iter_mut().zip(&p.values) {
                    *m += w * v;
                }
            }
            return mean;
        }
        let sum = (0..paths)
            .into_par_iter()
            .with_min_len(256)
            .fold_chunks(256, || vec![0.0; grid.n_steps()], |mut acc, p| {
                let path = self.sample(bounds, grid, stream.stream(p as u64));
                for (a, v) in acc.iter_mut().zip(&path.values) {
                    *a += v;
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(vec![0.0; grid.n_steps()], |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            });
        sum.into_iter().map(|s| s / paths as f64).collect()
    }
}

/// Result of the mean-Holder diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderEstimate {
    /// `max` over sampled pairs of the estimated `E|eta_t - eta_s| / |t - s|^alpha`.
    pub constant: f64,
    /// Monte Carlo standard error of the ratio at the maximizing pair.
    pub std_error: f64,
    pub s: f64,
    pub t: f64,
}

/// Monte Carlo estimate of the mean-Holder constant `C_T` over `pairs`
/// random node pairs `s < t`, each expectation averaged over `paths` paths.
pub fn holder_constant_estimate(
    model: &EtaModel,
    bounds: &Bounds,
    grid: &TimeGrid,
    alpha: f64,
    pairs: usize,
    paths: usize,
    stream: RngStream,
) -> Result<HolderEstimate> {
    model.validate(bounds)?;
    if pairs < 100 {
        return Err(Error::InsufficientData {
            what: "holder pairs".into(),
            needed: 100,
            have: pairs,
        });
    }
    let mut pair_rng = stream.substream(crate::rng::tags::HOLDER).rng();
    let n = grid.n_steps();
    let picks: Vec<(usize, usize)> = (0..pairs)
        .map(|_| loop {
            let i = pair_rng.random_range(0..n);
            let j = pair_rng.random_range(0..n);
            if i != j {
                break (i.min(j), i.max(j));
            }
        })
        .collect();
    let sampled: Vec<EtaPath> = (0..paths)
        .into_par_iter()
        .map(|p| model.sample(bounds, grid, stream.stream(p as u64)))
        .collect();
    let mut best = HolderEstimate {
        constant: 0.0,
        std_error: 0.0,
        s: grid.node(picks[0].0),
        t: grid.node(picks[0].1),
    };
    for &(i, j) in &picks {
        let lag = (grid.node(j) - grid.node(i)).powf(alpha);
        let diffs: Vec<f64> = sampled
            .iter()
            .map(|p| (p.values[j] - p.values[i]).abs())
            .collect();
        let m = paths as f64;
        let mean = diffs.iter().sum::<f64>() / m;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        let ratio = mean / lag;
        if ratio > best.constant {
            best = HolderEstimate {
                constant: ratio,
                std_error: (var / m).sqrt() / lag,
                s: grid.node(i),
                t: grid.node(j),
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Bounds, TimeGrid) {
        (Bounds::new(1.0, 2.0).unwrap(), TimeGrid::new(1.0, 100).unwrap())
    }

    #[test]
    fn constant_path() {
        let (b, g) = setup();
        let p = EtaModel::Constant { value: 1.5 }.sample(&b, &g, RngStream::new(1, 0));
        assert!(p.values.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_jump_shape() {
        let (b, g) = setup();
        let m = EtaModel::SingleJump { rate: 1.0 };
        for id in 0..50 {
            let p = m.sample(&b, &g, RngStream::new(3, id));
            let e = p.jump_time.unwrap();
            for (i, &v) in p.values.iter().enumerate() {
                let expected = if e < g.node(i) { 2.0 } else { 1.0 };
                assert_eq!(v, expected);
            }
        }
    }

    #[test]
    fn random_constant_frequency() {
        let (b, g) = setup();
        let m = EtaModel::RandomConstant {
            values: vec![1.0, 2.0],
            probs: vec![0.5, 0.5],
        };
        let n = 10_000;
        let highs = (0..n)
            .filter(|&i| {
                let p = m.sample(&b, &g, RngStream::new(11, i));
                assert!(p.values.iter().all(|&v| v == p.values[0]));
                p.values[0] == 2.0
            })
            .count();
        let freq = highs as f64 / n as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn single_jump_clock_is_exponential() {
        let (b, g) = setup();
        let m = EtaModel::SingleJump { rate: 1.0 };
        let mut times: Vec<f64> = (0..10_000)
            .map(|i| m.sample(&b, &g, RngStream::new(5, i)).jump_time.unwrap())
            .collect();
        times.sort_by(f64::total_cmp);
        let n = times.len() as f64;
        let d = times
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-x).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 0.02, "KS distance {d}");
    }

    #[test]
    fn all_models_respect_bounds_and_predictability() {
        let (b, g) = setup();
        let models = vec![
            EtaModel::TwoStateMarkov {
                low: 1.0,
                high: 2.0,
                rate_up: 3.0,
                rate_down: 2.0,
                start_high: 0.5,
            },
            EtaModel::ClampedDiffusion {
                mean_reversion: 1.0,
                long_run: 0.0,
                vol: 3.0,
                initial: 0.0,
            },
            EtaModel::DeterministicSinusoid {
                base: 1.5,
                amplitude: 0.8,
                period: 1.0,
            },
        ];
        for m in models {
            m.validate(&b).unwrap();
            for id in 0..100 {
                let p = m.sample(&b, &g, RngStream::new(9, id));
                assert!(p.values.iter().all(|&v| (1.0..=2.0).contains(&v)), "{m:?}");
            }
        }
        // diffusion: first cell is deterministic, no noise consumed before t_0
        let m = EtaModel::ClampedDiffusion {
            mean_reversion: 1.0,
            long_run: 0.0,
            vol: 3.0,
            initial: 0.0,
        };
        let p1 = m.sample(&b, &g, RngStream::new(1, 1));
        let p2 = m.sample(&b, &g, RngStream::new(1, 2));
        assert_eq!(p1.values[0], 1.5);
        assert_eq!(p1.values[0], p2.values[0]);
    }

    #[test]
    fn invalid_models() {
        let (b, _) = setup();
        assert!(EtaModel::Constant { value: 3.0 }.validate(&b).is_err());
        assert!(EtaModel::RandomConstant {
            values: vec![1.0],
            probs: vec![0.5]
        }
        .validate(&b)
        .is_err());
    }

    #[test]
    fn holder_constant_of_constant_model_is_zero() {
        let (b, g) = setup();
        let est = holder_constant_estimate(
            &EtaModel::Constant { value: 1.2 },
            &b,
            &g,
            1.0,
            100,
            50,
            RngStream::new(1, 0),
        )
        .unwrap();
        assert_eq!(est.constant, 0.0);
    }

    #[test]
    fn holder_constant_of_single_jump_below_one() {
        // E|eta_t - eta_s| = P(s < E <= t) = e^{-s} - e^{-t} <= t - s
        let (b, g) = setup();
        let est = holder_constant_estimate(
            &EtaModel::SingleJump { rate: 1.0 },
            &b,
            &g,
            1.0,
            200,
            20_000,
            RngStream::new(2, 0),
        )
        .unwrap();
        assert!(est.constant <= 1.0 + 3.0 * est.std_error + 0.02, "{est:?}");
        assert!(est.constant > 0.5);
    }

    #[test]
    fn holder_constant_of_diffusion_stable_under_refinement() {
        let b = Bounds::new(1.0, 2.0).unwrap();
        let m = EtaModel::ClampedDiffusion {
            mean_reversion: 1.0,
            long_run: 0.0,
            vol: 1.0,
            initial: 0.0,
        };
        let coarse = TimeGrid::new(1.0, 50).unwrap();
        let fine = TimeGrid::new(1.0, 100).unwrap();
        let c = holder_constant_estimate(&m, &b, &coarse, 0.5, 200, 4000, RngStream::new(4, 0)).unwrap();
        let f = holder_constant_estimate(&m, &b, &fine, 0.5, 400, 4000, RngStream::new(4, 0)).unwrap();
        assert!(c.constant.is_finite() && c.constant > 0.0);
        assert!((c.constant - f.constant).abs() / c.constant < 0.1, "{c:?} vs {f:?}");
    }
}
