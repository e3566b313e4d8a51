//! Patient-specific global stiffness from robotic-palpation traces.
//!
//! One press-release cycle yields a series of (probe displacement, contact
//! force) samples; an ordinary least-squares line `force = c2 * lambda + c1`
//! fits them well in practice, and the slope `c2` serves as the subject's
//! global stiffness. Before feeding the network, the stiffness is z-scored
//! against the training population.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time series of one press-release palpation cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct PalpationTrace {
    /// (time s, probe displacement mm, contact force N) per sample.
    pub samples: Vec<(f64, f64, f64)>,
}

/// Linear force-displacement fit; the slope is the global stiffness K_g.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StiffnessFit {
    /// Slope in N/mm (the global stiffness).
    pub c2_slope: f64,
    /// Intercept in N.
    pub c1_intercept: f64,
    pub r_squared: f64,
}

/// Population moments used to z-score an unseen subject's stiffness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiffnessPopulation {
    /// Mean, N/mm.
    pub mu_g: f64,
    /// Population standard deviation (divide by N), N/mm.
    pub delta_g: f64,
    pub n: usize,
}

impl StiffnessPopulation {
    /// Computes mean and population SD of recorded global stiffness values.
    pub fn from_values(values: &[f64]) -> Result<StiffnessPopulation> {
        if values.is_empty() {
            return Err(Error::DegenerateFit("empty stiffness population".into()));
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        Ok(StiffnessPopulation {
            mu_g: mu,
            delta_g: var.sqrt(),
            n: values.len(),
        })
    }
}

/// OLS fit of force against probe displacement.
pub fn fit_global_stiffness(trace: &PalpationTrace) -> Result<StiffnessFit> {
    if trace.samples.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need at least 3 samples, got {}",
            trace.samples.len()
        )));
    }
    let n = trace.samples.len() as f64;
    let mean_x = trace.samples.iter().map(|s| s.1).sum::<f64>() / n;
    let mean_y = trace.samples.iter().map(|s| s.2).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(_, x, y) in &trace.samples {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(
            "zero displacement variance in palpation trace".into(),
        ));
    }
    let c2 = sxy / sxx;
    let c1 = mean_y - c2 * mean_x;
    // R^2 = 1 - SS_res / SS_tot; a constant-force trace fits exactly
    let ss_res = syy - c2 * sxy;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(StiffnessFit {
        c2_slope: c2,
        c1_intercept: c1,
        r_squared,
    })
}

/// Z-score of a subject's global stiffness against a recorded population.
pub fn zscore(k_g: f64, pop: &StiffnessPopulation) -> Result<f64> {
    if pop.delta_g <= 0.0 {
        return Err(Error::DegenerateFit(
            "stiffness population has zero spread".into(),
        ));
    }
    Ok((k_g - pop.mu_g) / pop.delta_g)
}

/// Generates a plausible press-release palpation cycle for a subject with
/// global stiffness `k_g` (N/mm): displacement sweeps 0 -> max -> 0, the
/// force follows the line `k_g * lambda` with Gaussian-ish noise. The
/// default noise keeps a linear fit at R^2 >= 0.95.
pub fn synth_palpation_trace(
    k_g: f64,
    max_disp_mm: f64,
    samples: usize,
    noise_force_n: f64,
    seed: u64,
) -> PalpationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    let half = (samples.max(2) - 1) as f64 / 2.0;
    for i in 0..samples.max(2) {
        let t = i as f64;
        // triangular press-release profile
        let lambda = max_disp_mm * (1.0 - (t - half).abs() / half);
        let noise = noise_force_n * approx_gaussian(&mut rng);
        let force = (k_g * lambda + noise).max(0.0);
        out.push((t * 0.05, lambda, force));
    }
    PalpationTrace { samples: out }
}

/// Sum of 12 uniforms, standard normal to good approximation.
fn approx_gaussian<R: Rng>(rng: &mut R) -> f64 {
    (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0
}

/// Palpation trace CSV with header `t_s,lambda_z_mm,force_n`.
pub fn write_trace_csv(trace: &PalpationTrace, path: &Path) -> Result<()> {
    let mut out = String::from("t_s,lambda_z_mm,force_n\n");
    for &(t, l, f) in &trace.samples {
        writeln!(&mut out, "{t},{l},{f}").expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_trace_csv(path: &Path) -> Result<PalpationTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("line {}: expected 3 columns", lineno + 1),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                message: format!("line {}: bad number {s:?}", lineno + 1),
            })
        };
        samples.push((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
    }
    Ok(PalpationTrace { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_line_recovered() {
        let trace = PalpationTrace {
            samples: (0..10)
                .map(|i| {
                    let x = i as f64 * 0.5;
                    (i as f64, x, 2.0 * x + 1.0)
                })
                .collect(),
        };
        let fit = fit_global_stiffness(&trace).unwrap();
        assert!((fit.c2_slope - 2.0).abs() < 1e-12);
        assert!((fit.c1_intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_fit_matches_normal_equations_oracle() {
        let trace = synth_palpation_trace(1.8, 8.0, 60, 0.4, 123);
        let fit = fit_global_stiffness(&trace).unwrap();

        // closed-form normal equations, summed independently
        let n = trace.samples.len() as f64;
        let sx: f64 = trace.samples.iter().map(|s| s.1).sum();
        let sy: f64 = trace.samples.iter().map(|s| s.2).sum();
        let sxx: f64 = trace.samples.iter().map(|s| s.1 * s.1).sum();
        let sxy: f64 = trace.samples.iter().map(|s| s.1 * s.2).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        assert!((fit.c2_slope - slope).abs() < 1e-9);
        assert!((fit.c1_intercept - intercept).abs() < 1e-9);
    }

    #[test]
    fn default_noise_keeps_r_squared_high() {
        for seed in 0..8 {
            let trace = synth_palpation_trace(1.8, 8.0, 120, 0.35, seed);
            let fit = fit_global_stiffness(&trace).unwrap();
            assert!(fit.r_squared >= 0.95, "seed {seed}: R2 {}", fit.r_squared);
        }
    }

    #[test]
    fn zero_displacement_variance_rejected() {
        let trace = PalpationTrace {
            samples: vec![(0.0, 1.0, 1.0), (1.0, 1.0, 2.0), (2.0, 1.0, 3.0)],
        };
        assert!(matches!(
            fit_global_stiffness(&trace),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn zscore_cases() {
        let pop = StiffnessPopulation::from_values(&[1.0, 2.0, 3.0]).unwrap();
        assert!((pop.mu_g - 2.0).abs() < 1e-12);
        assert!((pop.delta_g - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(zscore(2.0, &pop).unwrap().abs() < 1e-12);
        assert!((zscore(3.0, &pop).unwrap() - 1.224744871391589).abs() < 1e-9);
        assert!((zscore(pop.mu_g + pop.delta_g, &pop).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_zero_spread_rejected() {
        let pop = StiffnessPopulation {
            mu_g: 1.0,
            delta_g: 0.0,
            n: 2,
        };
        assert!(zscore(1.0, &pop).is_err());
    }

    #[test]
    fn trace_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = synth_palpation_trace(0.78, 10.0, 20, 0.3, 7);
        write_trace_csv(&trace, &path).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back, trace);
    }

    proptest! {
        #[test]
        fn fit_is_affine_equivariant_in_force(scale in 0.1f64..10.0) {
            let base = synth_palpation_trace(1.2, 6.0, 40, 0.2, 99);
            let scaled = PalpationTrace {
                samples: base.samples.iter().map(|&(t, l, f)| (t, l, f * scale)).collect(),
            };
            let fa = fit_global_stiffness(&base).unwrap();
            let fb = fit_global_stiffness(&scaled).unwrap();
            prop_assert!((fb.c2_slope - scale * fa.c2_slope).abs() < 1e-9 * scale.max(1.0));
            prop_assert!((fb.c1_intercept - scale * fa.c1_intercept).abs() < 1e-9 * scale.max(1.0));
            prop_assert!((fb.r_squared - fa.r_squared).abs() < 1e-9);
        }

        #[test]
        fn zscore_inverts_population_shift(t in -3.0f64..3.0) {
            let pop = StiffnessPopulation::from_values(&[0.7, 1.1, 1.9, 2.4]).unwrap();
            let z = zscore(pop.mu_g + t * pop.delta_g, &pop).unwrap();
            prop_assert!((z - t).abs() < 1e-9);
        }
    }
}
