//! Numerical verification of the theory the merge mechanics rely on.
//!
//! Three self-contained verifiers sample random instances from a seeded
//! ChaCha stream and measure worst-case violations:
//!
//! - [`verify_prop2`]: the gate/blend norm identities
//!   `‖Δ_merge - Δ_plain‖_B̃ = α D` and `‖Δ_merge - Δ_geo‖_B̃ = (1-α) D`
//!   with `D = ‖Δ_geo - Δ_plain‖_B̃`, plus the threshold regime property of
//!   the sigmoid gate.
//! - [`verify_lemma1`]: the center-mismatch bound `r ≤ M g` for barycenters
//!   under the product pair weights `w_ij = ω_i ω_j / Z`.
//! - [`verify_thm1_quadratic`]: the exact second-order Taylor identity on
//!   quadratic surrogate losses together with the gate-scaled displacement
//!   identity `‖δ‖²_B̃ = α² ‖Δ_geo - Δ_plain‖²_B̃`.
//!
//! Every verifier is deterministic given its seed; reports are bit-stable
//! across runs and platforms (libm provides the transcendentals).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::config::GateConfig;
use crate::error::Result;
use crate::geometry::{metric_norm_sq_dense, LayerMap};
use crate::linalg::{bures_distance_sq, wasserstein_barycenter};
use crate::mat::{Mat, SymMat};
use crate::merge::blend;
use crate::signals::{gate, layer_conflict, pair_weights, pairwise_conflict};

/// Stabilizer used in the conflict normalizations of the verifiers.
const VERIFY_EPSILON: f64 = 1e-8;

/// Outcome of one verification run.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub name: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl VerificationReport {
    pub fn new(name: &str, trials: usize, max_violation: f64, tolerance: f64) -> Self {
        VerificationReport {
            name: String::from(name),
            trials,
            max_violation,
            tolerance,
            pass: max_violation <= tolerance,
        }
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: trials={} max_violation={:.3e} tolerance={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_violation,
            self.tolerance
        )
    }
}

/// Seeded deterministic sampler over matrices, SPD operators and simplices.
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn usize_in(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(hi >= lo);
        let span = (hi - lo + 1) as u64;
        lo + (self.rng.next_u64() % span) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.normal();
        }
        m
    }

    /// Random SPD matrix `GᵀG/dim + jitter_rel · t̄ · I` with `t̄` the mean
    /// diagonal of the Gram part; `jitter_rel` bounds the condition number.
    pub fn spd(&mut self, dim: usize, jitter_rel: f64) -> SymMat {
        let g = self.matrix(dim, dim);
        let mut a = g.gram().scale(1.0 / dim.max(1) as f64);
        let tbar = (a.trace() / dim.max(1) as f64).max(f64::MIN_POSITIVE);
        for i in 0..dim {
            a[(i, i)] += jitter_rel * tbar;
        }
        SymMat::symmetrize(a)
    }

    /// Random point of the probability simplex (normalized exponentials).
    pub fn simplex(&mut self, m: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..m)
            .map(|_| -libm::log(1.0 - self.uniform()))
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }

    /// Random gate configuration with a valid α range and κ ∈ (0, 50].
    pub fn gate_config(&mut self) -> GateConfig {
        let a = self.uniform();
        let b = self.uniform();
        let (alpha_min, alpha_max) = if a <= b { (a, b) } else { (b, a) };
        GateConfig {
            tau: self.uniform_in(-0.5, 0.5),
            kappa: self.uniform_in(0.1, 50.0),
            alpha_min,
            alpha_max,
            epsilon: VERIFY_EPSILON,
        }
    }
}

/// Verify the gate/blend norm identities and the threshold regime property.
///
/// `blend_perturbation` is a fault-injection hook for exercising the
/// verifier itself: it shifts the plain-branch coefficient away from
/// `1 - α`, which must make the check fail. Production callers pass 0.
pub fn verify_prop2_impl(
    trials: usize,
    max_dim: usize,
    seed: u64,
    blend_perturbation: f64,
) -> VerificationReport {
    let mut sampler = Sampler::new(seed);
    let mut worst = 0.0_f64;

    for trial in 0..trials {
        let d_out = sampler.usize_in(1, max_dim);
        let d_in = sampler.usize_in(1, max_dim);
        let delta_geo = sampler.matrix(d_out, d_in);
        let delta_plain = sampler.matrix(d_out, d_in);
        let metric = sampler.spd(d_in, 1e-3);
        let alpha = match trial {
            0 => 0.0,
            1 => 1.0,
            _ => sampler.uniform(),
        };

        let mut delta_merge = blend(alpha, &delta_geo, &delta_plain);
        if blend_perturbation != 0.0 {
            delta_merge.add_scaled(blend_perturbation, &delta_plain);
        }

        let norm = |x: &Mat| -> f64 {
            libm::sqrt(metric_norm_sq_dense(x, &metric).expect("dims match"))
        };
        let d = norm(&delta_geo.sub(&delta_plain));
        let scale = d.max(1e-30);
        let lhs_plain = norm(&delta_merge.sub(&delta_plain));
        let lhs_geo = norm(&delta_merge.sub(&delta_geo));
        worst = worst.max((lhs_plain - alpha * d).abs() / scale);
        worst = worst.max((lhs_geo - (1.0 - alpha) * d).abs() / scale);

        // Threshold regime: g ≤ τ ⇒ α ≤ midpoint, g ≥ τ ⇒ α ≥ midpoint,
        // exact equality at g = τ.
        let cfg = sampler.gate_config();
        let mid = cfg.midpoint();
        let g = cfg.tau + sampler.uniform_in(-1.0, 1.0);
        let a = gate(g, &cfg);
        if g <= cfg.tau {
            worst = worst.max(a - mid);
        }
        if g >= cfg.tau {
            worst = worst.max(mid - a);
        }
        worst = worst.max((gate(cfg.tau, &cfg) - mid).abs());
    }
    VerificationReport::new("prop2_gate_identities", trials, worst, 1e-9)
}

/// Gate/blend identity verifier (Proposition-level mechanics).
pub fn verify_prop2(trials: usize, max_dim: usize, seed: u64) -> VerificationReport {
    verify_prop2_impl(trials, max_dim, seed, 0.0)
}

/// Verify the center-mismatch bound `r ≤ M g + 1e-8 M` with product pair
/// weights, where `r = Σ ω_i d_B²(B_i, B̄)` and
/// `M = max_{i<j} (tr B_i + tr B_j + ε)`.
pub fn verify_lemma1(
    trials: usize,
    max_m: usize,
    max_dim: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let mut sampler = Sampler::new(seed);
    let mut worst = f64::NEG_INFINITY;

    for trial in 0..trials {
        let m = sampler.usize_in(2, max_m.max(2));
        let dim = sampler.usize_in(1, max_dim);
        let geometries: Vec<SymMat> = (0..m).map(|_| sampler.spd(dim, 1e-3)).collect();
        let omegas = if trial == 0 {
            // Identical geometries with uniform weights: r = g = 0 and the
            // bound holds with equality.
            alloc::vec![1.0 / m as f64; m]
        } else {
            sampler.simplex(m)
        };
        let geometries = if trial == 0 {
            alloc::vec![geometries[0].clone(); m]
        } else {
            geometries
        };

        let center = wasserstein_barycenter(&geometries, &omegas, 1e-10, 1000)?;
        let mut r = 0.0;
        for (b, &w) in geometries.iter().zip(&omegas) {
            r += w * bures_distance_sq(b, &center)?;
        }

        let mut m_scale = 0.0_f64;
        let mut gammas = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                m_scale = m_scale.max(
                    geometries[i].trace() + geometries[j].trace() + VERIFY_EPSILON,
                );
                gammas.push(pairwise_conflict(
                    &geometries[i],
                    &geometries[j],
                    VERIFY_EPSILON,
                )?);
            }
        }
        let weights = pair_weights(&omegas, crate::config::PairWeighting::OmegaProduct);
        let g = layer_conflict(&gammas, &weights)?;
        worst = worst.max((r - m_scale * g) / m_scale);
    }
    Ok(VerificationReport::new(
        "lemma1_center_mismatch_bound",
        trials,
        worst.max(0.0),
        1e-8,
    ))
}

/// Quadratic surrogate loss with per-layer anchors:
/// `L(θ) = ½ Σ_ℓ ‖θ^(ℓ) - θ*^(ℓ)‖_F²`.
///
/// Its gradient at θ is exactly `θ - θ*` per layer and its Hessian is the
/// identity, so the second-order Taylor expansion is exact.
#[derive(Debug, Clone)]
pub struct QuadraticSurrogate {
    pub anchors: LayerMap,
}

impl QuadraticSurrogate {
    pub fn loss(&self, theta: &LayerMap) -> f64 {
        let mut acc = 0.0;
        for (name, anchor) in &self.anchors {
            acc += 0.5 * theta[name].sub(anchor).frobenius_norm_sq();
        }
        acc
    }

    pub fn grad(&self, theta: &LayerMap) -> LayerMap {
        self.anchors
            .iter()
            .map(|(name, anchor)| (name.clone(), theta[name].sub(anchor)))
            .collect()
    }
}

fn frobenius_inner(a: &LayerMap, b: &LayerMap) -> f64 {
    let mut acc = 0.0;
    for (name, x) in a {
        let y = &b[name];
        for (p, q) in x.data().iter().zip(y.data()) {
            acc += p * q;
        }
    }
    acc
}

/// Verify the exact Taylor identity
/// `L(Θ_gcwm) - L(Θ_plain) = η ⟨∇L(Θ_plain), δ⟩ + (η²/2) ‖δ‖_F²`
/// on quadratic surrogates, plus the gate-scaled displacement identity.
pub fn verify_thm1_quadratic(trials: usize, seed: u64) -> VerificationReport {
    let mut sampler = Sampler::new(seed);
    let mut worst = 0.0_f64;

    for trial in 0..trials {
        let n_layers = sampler.usize_in(1, 3);
        let mut anchors = LayerMap::new();
        let mut theta_base = LayerMap::new();
        let mut plain = BTreeMap::new();
        let mut geo = BTreeMap::new();
        let mut metrics = BTreeMap::new();
        let mut alphas = BTreeMap::new();
        for l in 0..n_layers {
            let name = alloc::format!("layer.{l}");
            let d_out = sampler.usize_in(1, 8);
            let d_in = sampler.usize_in(1, 8);
            anchors.insert(name.clone(), sampler.matrix(d_out, d_in));
            theta_base.insert(name.clone(), sampler.matrix(d_out, d_in));
            let delta_plain = sampler.matrix(d_out, d_in);
            let delta_geo = if trial == 1 {
                delta_plain.clone() // δ = 0 edge case
            } else {
                sampler.matrix(d_out, d_in)
            };
            plain.insert(name.clone(), delta_plain);
            geo.insert(name.clone(), delta_geo);
            metrics.insert(name.clone(), sampler.spd(d_in, 1e-3));
            let cfg = sampler.gate_config();
            let alpha = match trial % 5 {
                2 => 0.0,
                3 => 1.0,
                _ => gate(sampler.uniform_in(-0.5, 0.5), &cfg),
            };
            alphas.insert(name, alpha);
        }
        let eta = if trial == 0 {
            0.0
        } else {
            sampler.uniform_in(0.01, 1.0)
        };
        let surrogate = QuadraticSurrogate { anchors };

        let mut theta_plain = LayerMap::new();
        let mut theta_gcwm = LayerMap::new();
        let mut delta = LayerMap::new();
        for (name, base) in &theta_base {
            let merged = blend(alphas[name], &geo[name], &plain[name]);
            let d = merged.sub(&plain[name]);

            let mut tp = base.clone();
            tp.add_scaled(eta, &plain[name]);
            let mut tg = base.clone();
            tg.add_scaled(eta, &merged);
            theta_plain.insert(name.clone(), tp);
            theta_gcwm.insert(name.clone(), tg);
            delta.insert(name.clone(), d);
        }

        let loss_plain = surrogate.loss(&theta_plain);
        let loss_gcwm = surrogate.loss(&theta_gcwm);
        let lhs = loss_gcwm - loss_plain;
        let grad_plain = surrogate.grad(&theta_plain);
        let delta_norm_sq: f64 = delta.values().map(Mat::frobenius_norm_sq).sum();
        let rhs = eta * frobenius_inner(&grad_plain, &delta) + 0.5 * eta * eta * delta_norm_sq;
        let scale = (loss_plain + loss_gcwm).max(1e-30);
        worst = worst.max((lhs - rhs).abs() / scale);

        // Gate-scaled displacement: ‖δ‖²_B̃ = α² ‖Δ_geo - Δ_plain‖²_B̃.
        for (name, d) in &delta {
            let metric = &metrics[name];
            let disp = metric_norm_sq_dense(d, metric).expect("dims match");
            let full = metric_norm_sq_dense(&geo[name].sub(&plain[name]), metric)
                .expect("dims match");
            let alpha = alphas[name];
            worst = worst.max((disp - alpha * alpha * full).abs() / full.max(1e-30));
        }
    }
    VerificationReport::new("thm1_quadratic_taylor", trials, worst, 1e-9)
}
