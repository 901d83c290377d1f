//! Unweighted Gauss–Newton single-point positioning.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use super::geometry::{distance, Ecef};
use super::observation::EpochObservation;
use super::GnssError;

#[derive(Clone, Debug, PartialEq)]
pub struct ReceiverSolution {
    pub position: Ecef,
    /// Receiver clock bias expressed in meters.
    pub clock_bias: f64,
    /// Measured minus modeled pseudorange per satellite, in epoch order.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SppConfig {
    pub max_iterations: usize,
    /// Stop once the position+clock update norm drops below this (m).
    pub tolerance: f64,
    pub max_condition: f64,
}

impl Default for SppConfig {
    fn default() -> Self {
        Self { max_iterations: 20, tolerance: 1e-6, max_condition: 1e8 }
    }
}

pub fn solve_spp(epoch: &EpochObservation) -> Result<ReceiverSolution, GnssError> {
    solve_spp_from(epoch, None, &SppConfig::default())
}

/// Solves with `pseudoranges` overriding the epoch's own (same order), which
/// is how corrected measurements are positioned.
pub fn solve_spp_with(
    epoch: &EpochObservation,
    pseudoranges: &[f64],
    init: Option<(Ecef, f64)>,
    cfg: &SppConfig,
) -> Result<ReceiverSolution, GnssError> {
    let sats: Vec<Ecef> = epoch.sats.iter().map(|s| s.sat_pos).collect();
    solve(&sats, pseudoranges, init, cfg)
}

/// `init` is a previous (position, clock) solution; without one the
/// iteration starts at the Earth's center.
pub fn solve_spp_from(
    epoch: &EpochObservation,
    init: Option<(Ecef, f64)>,
    cfg: &SppConfig,
) -> Result<ReceiverSolution, GnssError> {
    let pr: Vec<f64> = epoch.sats.iter().map(|s| s.pseudorange).collect();
    solve_spp_with(epoch, &pr, init, cfg)
}

fn solve(sats: &[Ecef], pr: &[f64], init: Option<(Ecef, f64)>, cfg: &SppConfig) -> Result<ReceiverSolution, GnssError> {
    let n = sats.len();
    if n < 4 {
        return Err(GnssError::InsufficientSatellites(n));
    }
    let (p0, c0) = init.unwrap_or(([0.0; 3], 0.0));
    let mut x = Vector4::new(p0[0], p0[1], p0[2], c0);
    let mut h = DMatrix::<f64>::zeros(n, 4);
    let mut r = DVector::<f64>::zeros(n);
    for it in 1..=cfg.max_iterations {
        let pos = [x[0], x[1], x[2]];
        for (k, sat) in sats.iter().enumerate() {
            let range = distance(sat, &pos);
            for j in 0..3 {
                h[(k, j)] = (pos[j] - sat[j]) / range;
            }
            h[(k, 3)] = 1.0;
            r[k] = pr[k] - (range + x[3]);
        }
        let normal: Matrix4<f64> = (h.transpose() * &h).fixed_view::<4, 4>(0, 0).into();
        let sv = normal.singular_values();
        let cond = sv.max() / sv.min();
        if !cond.is_finite() || cond > cfg.max_condition * cfg.max_condition {
            return Err(GnssError::SingularGeometry(cond.sqrt()));
        }
        let rhs: Vector4<f64> = (h.transpose() * &r).fixed_view::<4, 1>(0, 0).into();
        let dx = normal
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(GnssError::SingularGeometry(f64::INFINITY))?;
        x += dx;
        if dx.norm() < cfg.tolerance {
            let pos = [x[0], x[1], x[2]];
            let residuals = sats.iter().zip(pr).map(|(s, p)| p - distance(s, &pos) - x[3]).collect();
            return Ok(ReceiverSolution { position: pos, clock_bias: x[3], residuals, iterations: it, converged: true });
        }
    }
    Err(GnssError::NonConvergence(cfg.max_iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnss::geometry::{geodetic_to_ecef, point_on_shell};
    use crate::gnss::observation::{SatId, SatObservation, SceneLabel};

    fn epoch(rx: &Ecef, dirs: &[(f64, f64)], bias: f64) -> EpochObservation {
        let sats = dirs
            .iter()
            .enumerate()
            .map(|(i, &(el, az))| {
                let pos = point_on_shell(rx, el, az, 6_371_000.0 + 20_200_000.0);
                SatObservation {
                    sat_id: SatId::new(format!("G{:02}", i + 1)),
                    sat_pos: pos,
                    pseudorange: distance(&pos, rx) + bias,
                    cn0: 45.0,
                    elevation: el,
                    azimuth: az,
                    gt_error: Some(0.0),
                }
            })
            .collect();
        EpochObservation { epoch_time: 0.0, seq_id: "t".into(), scene: SceneLabel::OpenSky, sats, gt_receiver_pos: Some(*rx) }
    }

    const SIX: [(f64, f64); 6] = [(80.0, 10.0), (45.0, 60.0), (30.0, 150.0), (20.0, 230.0), (55.0, 300.0), (15.0, 340.0)];

    #[test]
    fn noiseless_geometry() {
        let rx = geodetic_to_ecef(22.3, 114.2, 30.0);
        let sol = solve_spp(&epoch(&rx, &SIX, 0.0)).unwrap();
        assert!(distance(&sol.position, &rx) < 1e-4);
        assert!(sol.clock_bias.abs() < 1e-4);
        assert!(sol.converged);
    }

    #[test]
    fn common_bias_goes_to_clock() {
        let rx = geodetic_to_ecef(22.3, 114.2, 30.0);
        let sol = solve_spp(&epoch(&rx, &SIX, 100.0)).unwrap();
        assert!(distance(&sol.position, &rx) < 1e-3);
        assert!((sol.clock_bias - 100.0).abs() < 1e-3);
    }

    #[test]
    fn three_satellites() {
        let rx = geodetic_to_ecef(22.3, 114.2, 30.0);
        let err = solve_spp(&epoch(&rx, &SIX[..3], 0.0)).unwrap_err();
        assert!(matches!(err, GnssError::InsufficientSatellites(3)));
    }

    #[test]
    fn coincident_satellites_are_singular() {
        let rx = geodetic_to_ecef(22.3, 114.2, 30.0);
        let same = [(45.0, 60.0); 5];
        let err = solve_spp_from(&epoch(&rx, &same, 0.0), Some((rx, 0.0)), &SppConfig::default()).unwrap_err();
        assert!(matches!(err, GnssError::SingularGeometry(_)), "{err}");
    }
}
