//! Polynomial battery power map and trip-energy aggregation.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Coefficients `p[i][j]` of `P(v, a) = Σ p_ij·vⁱ·aʲ`, in W for m/s and m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCoeffs {
    pub p: [[f64; 3]; 4],
}

impl Default for EnergyCoeffs {
    fn default() -> Self {
        Self {
            p: [
                [110.3, 1213.0, 2911.0],
                [422.9, 2484.0, 25.19],
                [-0.0279, 1.374, 0.0],
                [0.3557, 0.0, 0.0],
            ],
        }
    }
}

impl EnergyCoeffs {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("energy coefficients", self.p.as_flattened())
    }
}

/// Instantaneous power in W. Values may be negative (regeneration).
pub fn power(v: f64, a: f64, c: &EnergyCoeffs) -> f64 {
    if !(0.0..=25.0).contains(&v) || !(-3.0..=3.0).contains(&a) {
        debug!("power map evaluated outside fitted range: v={v}, a={a}");
    }
    // Horner in v over each column polynomial in a
    c.p.iter().rev().fold(0.0, |acc, row| {
        acc * v + (row[0] + a * (row[1] + a * row[2]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripEnergy {
    pub kj: f64,
    pub km: f64,
    /// `None` when the travelled distance is zero.
    pub kj_per_km: Option<f64>,
}

/// Platoon figure: the CAV and HDV per-km energies added together.
pub fn holistic_kj_per_km(cav: &TripEnergy, hdv: &TripEnergy) -> Option<f64> {
    Some(cav.kj_per_km? + hdv.kj_per_km?)
}

fn per_km(kj: f64, km: f64) -> Option<f64> {
    (km > 0.0).then(|| kj / km)
}

pub fn trip_energy(
    velocities: &[f64],
    accels: &[f64],
    tau: f64,
    c: &EnergyCoeffs,
) -> Result<TripEnergy> {
    if velocities.len() != accels.len() {
        return Err(Error::Dimension {
            expected: velocities.len(),
            got: accels.len(),
        });
    }
    if velocities.is_empty() {
        return Err(Error::domain("empty trajectory"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("invalid step length {tau}")));
    }
    ensure_finite("velocities", velocities)?;
    ensure_finite("accelerations", accels)?;
    let kj = velocities
        .iter()
        .zip(accels)
        .map(|(&v, &a)| power(v, a, c))
        .sum::<f64>()
        * tau
        / 1000.0;
    let km = velocities.iter().sum::<f64>() * tau / 1000.0;
    Ok(TripEnergy {
        kj,
        km,
        kj_per_km: per_km(kj, km),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(v: f64, a: f64, c: &EnergyCoeffs) -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                s += c.p[i][j] * v.powi(i as i32) * a.powi(j as i32);
            }
        }
        s
    }

    #[test]
    fn table_values() {
        let c = EnergyCoeffs::default();
        assert_eq!(power(0.0, 0.0, &c), 110.3);
        assert!((power(1.0, 0.0, &c) - 533.5278).abs() < 1e-9);
        let hand = 110.3 + 422.9 * 8.5 - 0.0279 * 8.5f64.powi(2) + 0.3557 * 8.5f64.powi(3);
        assert!((power(8.5, 0.0, &c) - hand).abs() < 1e-9);
        assert!((power(8.5, 0.0, &c) - 3921.38).abs() < 0.01);
    }

    #[test]
    fn single_step_has_no_distance() {
        let t = trip_energy(&[0.0], &[0.0], 0.5, &EnergyCoeffs::default()).unwrap();
        assert!((t.kj - 0.05515).abs() < 1e-12);
        assert!(t.kj_per_km.is_none());
    }

    #[test]
    fn constant_cruise() {
        let c = EnergyCoeffs::default();
        let t = trip_energy(&[10.0; 100], &[0.0; 100], 0.5, &c).unwrap();
        assert!((t.km - 0.5).abs() < 1e-12);
        assert!((t.kj - 50.0 * power(10.0, 0.0, &c) / 1000.0).abs() < 1e-9);
    }

    #[test]
    fn acceleration_costs_energy() {
        let c = EnergyCoeffs::default();
        let flat = trip_energy(&[10.0; 10], &[0.0; 10], 0.5, &c).unwrap();
        let acc = trip_energy(&[10.0; 10], &[0.5; 10], 0.5, &c).unwrap();
        assert!(acc.kj > flat.kj);
    }

    #[test]
    fn holistic_adds_both_vehicles() {
        let c = EnergyCoeffs::default();
        let a = trip_energy(&[8.5; 20], &[0.0; 20], 0.5, &c).unwrap();
        let b = trip_energy(&[8.0; 20], &[0.2; 20], 0.5, &c).unwrap();
        let h = holistic_kj_per_km(&a, &b).unwrap();
        assert!((h - (a.kj / a.km + b.kj / b.km)).abs() < 1e-9);
        let still = trip_energy(&[0.0], &[0.0], 0.5, &c).unwrap();
        assert!(holistic_kj_per_km(&a, &still).is_none());
    }

    #[test]
    fn mismatched_lengths() {
        assert!(trip_energy(&[1.0, 2.0], &[0.0], 0.5, &EnergyCoeffs::default()).is_err());
    }

    #[test]
    fn brute_force_grid() {
        use rand::{Rng, SeedableRng};
        let c = EnergyCoeffs::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let v = rng.random_range(0.0..30.0);
            let a = rng.random_range(-4.0..4.0);
            let (x, y) = (power(v, a, &c), brute(v, a, &c));
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn additive_over_concatenation(
            v1 in prop::collection::vec(0.0f64..25.0, 1..30),
            v2 in prop::collection::vec(0.0f64..25.0, 1..30),
            a in -3.0f64..3.0,
        ) {
            let c = EnergyCoeffs::default();
            let a1 = vec![a; v1.len()];
            let a2 = vec![-a; v2.len()];
            let t1 = trip_energy(&v1, &a1, 0.5, &c).unwrap();
            let t2 = trip_energy(&v2, &a2, 0.5, &c).unwrap();
            let all_v: Vec<f64> = v1.iter().chain(&v2).copied().collect();
            let all_a: Vec<f64> = a1.iter().chain(&a2).copied().collect();
            let t = trip_energy(&all_v, &all_a, 0.5, &c).unwrap();
            prop_assert!((t.kj - (t1.kj + t2.kj)).abs() <= 1e-9 * t.kj.abs().max(1.0));
            prop_assert!((t.km - (t1.km + t2.km)).abs() <= 1e-12);
        }
    }
}
