//! Seeded urban-GNSS scene generator with exact ground truth.
//!
//! Satellites sit on a fixed shell 20 200 km above a spherical Earth and are
//! frozen for the duration of a segment. A slowly moving receiver observes
//! pseudoranges corrupted by Gaussian noise, an elevation-dependent AR(1)
//! multipath term and strictly positive NLOS biases during reflection
//! episodes, with the corresponding C/N0 drops. `gt_err_m` is the injected
//! error itself.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gnss::features::split_counts;
use crate::gnss::geometry::{distance, elevation_azimuth, enu_to_ecef, geodetic_to_ecef, point_on_shell, Ecef};
use crate::gnss::{EpochObservation, SatId, SatObservation, SceneLabel, Sequence, WindowConfig};
use crate::{Error, Result};

pub const SHELL_RADIUS: f64 = 6_371_000.0 + 20_200_000.0;

/// Periodic reflection episodes: in every `period` seconds, `1..=max_sats`
/// satellites are NLOS for `duty · period` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlosEpisodes {
    pub period: f64,
    pub duty: f64,
    pub min_sats: usize,
    pub max_sats: usize,
    /// Bias drawn uniformly per satellite and episode, m.
    pub bias: (f64, f64),
}

/// A single scripted NLOS interval on satellite index `sat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlosEvent {
    pub sat: usize,
    pub onset: f64,
    pub offset: f64,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub scene: SceneLabel,
    pub seq_id: String,
    pub n_satellites: (usize, usize),
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub rate: f64,
    pub start_time: f64,
    /// LOS noise standard deviation, m.
    pub los_sigma: f64,
    /// Multipath standard deviation at zenith-equivalent scale, m; grows
    /// towards the horizon.
    pub multipath_sigma: f64,
    /// Lag-one correlation of the multipath process.
    pub multipath_corr: f64,
    pub nlos: Option<NlosEpisodes>,
    pub events: Vec<NlosEvent>,
    /// dB-Hz at zenith.
    pub cn0_base: f64,
    /// NLOS attenuation range, dB.
    pub cn0_drop: (f64, f64),
    pub cn0_jitter: f64,
    /// Probability that a satellite is missing at an epoch.
    pub dropout: f64,
    /// Receiver start (latitude deg, longitude deg, height m).
    pub origin: (f64, f64, f64),
    /// m/s.
    pub speed: f64,
    /// Clock bias range at t = 0, m.
    pub clock_bias: (f64, f64),
    /// m/s.
    pub clock_drift: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::preset(SceneLabel::OpenSky, "scene", 0)
    }
}

impl SceneConfig {
    pub fn preset(scene: SceneLabel, seq_id: &str, seed: u64) -> Self {
        let base = Self {
            scene,
            seq_id: seq_id.to_string(),
            n_satellites: (9, 12),
            duration: 60.0,
            rate: 1.0,
            start_time: 0.0,
            los_sigma: 0.3,
            multipath_sigma: 0.3,
            multipath_corr: 0.9,
            nlos: None,
            events: Vec::new(),
            cn0_base: 45.0,
            cn0_drop: (10.0, 20.0),
            cn0_jitter: 1.0,
            dropout: 0.0,
            origin: (31.23, 121.47, 15.0),
            speed: 1.5,
            clock_bias: (-100.0, 100.0),
            clock_drift: 0.05,
            seed,
        };
        match scene {
            SceneLabel::OpenSky => base,
            SceneLabel::Wooded => Self {
                n_satellites: (8, 11),
                multipath_sigma: 0.8,
                dropout: 0.02,
                nlos: Some(NlosEpisodes { period: 12.0, duty: 0.25, min_sats: 1, max_sats: 2, bias: (3.0, 12.0) }),
                ..base
            },
            SceneLabel::HighRise => Self {
                n_satellites: (7, 10),
                multipath_sigma: 1.0,
                dropout: 0.03,
                nlos: Some(NlosEpisodes { period: 10.0, duty: 0.3, min_sats: 1, max_sats: 3, bias: (10.0, 50.0) }),
                ..base
            },
            SceneLabel::Bridge => Self {
                n_satellites: (7, 10),
                multipath_sigma: 0.8,
                dropout: 0.03,
                nlos: Some(NlosEpisodes { period: 15.0, duty: 0.3, min_sats: 1, max_sats: 3, bias: (5.0, 30.0) }),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.n_satellites;
        if lo < 4 || hi < lo {
            return bad(format!("n_satellites range {lo}..={hi} must be non-empty and start at 4 or more"));
        }
        if !(self.rate > 0.0) || !(self.duration > 0.0) {
            return bad("rate and duration must be positive".into());
        }
        if self.los_sigma < 0.0 || self.multipath_sigma < 0.0 || !(0.0..1.0).contains(&self.multipath_corr) {
            return bad("noise parameters out of range".into());
        }
        if self.cn0_drop.0 > self.cn0_drop.1 || !(0.0..0.5).contains(&self.dropout) {
            return bad("C/N0 drop range empty or dropout outside [0, 0.5)".into());
        }
        if let Some(n) = &self.nlos {
            if !(n.period > 0.0) || !(0.0..=1.0).contains(&n.duty) || n.min_sats > n.max_sats || n.bias.0 > n.bias.1 || n.bias.0 < 0.0 {
                return bad("NLOS episode parameters out of range".into());
            }
        }
        for e in &self.events {
            if e.sat >= lo || e.offset < e.onset || e.bias < 0.0 {
                return bad(format!("NLOS event {e:?} invalid (sat index must be < {lo})"));
            }
        }
        Ok(())
    }
}

struct Sat {
    id: SatId,
    pos: Ecef,
    elevation: f64,
}

fn place_satellites(rng: &mut ChaCha8Rng, rx: &Ecef, n: usize) -> Vec<Sat> {
    let mut gps: Vec<u32> = (1..=32).collect();
    let mut bds: Vec<u32> = (1..=46).collect();
    gps.shuffle(rng);
    bds.shuffle(rng);
    let n_gps = n.div_ceil(2);
    let mut ids: Vec<SatId> = gps[..n_gps]
        .iter()
        .map(|p| SatId::new(format!("G{p:02}")))
        .chain(bds[..n - n_gps].iter().map(|p| SatId::new(format!("C{p:02}"))))
        .collect();
    ids.shuffle(rng);
    let offset: f64 = rng.gen_range(0.0..360.0);
    (0..n)
        .map(|k| {
            // stratified azimuths, elevations biased towards the horizon
            let az = (offset + (k as f64 + rng.gen_range(0.1..0.9)) * 360.0 / n as f64) % 360.0;
            let el = 5.0 + 80.0 * rng.gen::<f64>().powf(1.3);
            Sat { id: ids[k].clone(), pos: point_on_shell(rx, el, az, SHELL_RADIUS), elevation: el }
        })
        .collect()
}

/// Generates one sequence. Every random draw comes from `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let origin = geodetic_to_ecef(cfg.origin.0, cfg.origin.1, cfg.origin.2);
    let n = rng.gen_range(cfg.n_satellites.0..=cfg.n_satellites.1);
    let sats = place_satellites(&mut rng, &origin, n);
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let clock0 = rng.gen_range(cfg.clock_bias.0..=cfg.clock_bias.1);
    let steps = (cfg.duration * cfg.rate).round() as usize;
    let dt = 1.0 / cfg.rate;

    // NLOS bias per (epoch, satellite)
    let mut nlos = vec![vec![0.0f64; n]; steps];
    if let Some(ep) = &cfg.nlos {
        let phase = rng.gen_range(0.0..ep.period);
        let mut start = -phase;
        let on = ep.duty * ep.period;
        while start < cfg.duration {
            let k = rng.gen_range(ep.min_sats..=ep.max_sats).min(n);
            // lower satellites are more likely to be blocked
            let mut order: Vec<(f64, usize)> = (0..n).map(|i| (rng.gen::<f64>() * (95.0 - sats[i].elevation), i)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0));
            for &(_, s) in order.iter().take(k) {
                let bias = rng.gen_range(ep.bias.0..=ep.bias.1);
                for (i, row) in nlos.iter_mut().enumerate() {
                    let t = i as f64 * dt;
                    if t >= start && t < start + on {
                        row[s] = bias;
                    }
                }
            }
            start += ep.period;
        }
    }
    for e in &cfg.events {
        for (i, row) in nlos.iter_mut().enumerate() {
            let t = i as f64 * dt;
            if t >= e.onset && t < e.offset {
                row[e.sat] = e.bias;
            }
        }
    }

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut mp = vec![0.0f64; n];
    let mut drops = vec![0.0f64; n];
    let mut epochs = Vec::with_capacity(steps);
    let rho = cfg.multipath_corr;
    for (i, nlos_row) in nlos.iter().enumerate() {
        let t = i as f64 * dt;
        let enu = [cfg.speed * t * heading.sin(), cfg.speed * t * heading.cos(), 0.0];
        let d = enu_to_ecef(&enu, &origin);
        let rx = [origin[0] + d[0], origin[1] + d[1], origin[2] + d[2]];
        let clock = clock0 + cfg.clock_drift * t;
        let mut obs = Vec::with_capacity(n);
        for (k, sat) in sats.iter().enumerate() {
            let (el, az) = elevation_azimuth(&rx, &sat.pos);
            let sigma_mp = cfg.multipath_sigma * (1.0 + 2.0 * (-el / 15.0).exp());
            let innov = unit.sample(&mut rng);
            mp[k] = if i == 0 { sigma_mp * innov } else { rho * mp[k] + (1.0 - rho * rho).sqrt() * sigma_mp * innov };
            let noise = cfg.los_sigma * unit.sample(&mut rng);
            let bias = nlos_row[k];
            if bias > 0.0 && (i == 0 || nlos[i - 1][k] == 0.0) {
                drops[k] = rng.gen_range(cfg.cn0_drop.0..=cfg.cn0_drop.1);
            }
            let jitter = cfg.cn0_jitter * unit.sample(&mut rng);
            let missing = rng.gen::<f64>() < cfg.dropout;
            let error = noise + mp[k] + bias;
            if missing {
                continue;
            }
            let cn0 = cfg.cn0_base - 10.0 * (1.0 - el.to_radians().sin()) - if bias > 0.0 { drops[k] } else { 0.0 } + jitter;
            obs.push(SatObservation {
                sat_id: sat.id.clone(),
                sat_pos: sat.pos,
                pseudorange: distance(&sat.pos, &rx) + clock + error,
                cn0: cn0.max(0.0),
                elevation: el.clamp(0.0, 90.0),
                azimuth: az,
                gt_error: Some(error),
            });
        }
        // keep enough satellites to position
        if obs.len() < 5 {
            continue;
        }
        obs.sort_by(|a, b| a.sat_id.cmp(&b.sat_id));
        epochs.push(EpochObservation {
            epoch_time: cfg.start_time + t,
            seq_id: cfg.seq_id.clone(),
            scene: cfg.scene,
            sats: obs,
            gt_receiver_pos: Some(rx),
        });
    }
    Ok(Sequence { seq_id: cfg.seq_id.clone(), epochs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Segments generated per scene type.
    pub segments_per_scene: usize,
    /// Epochs per segment.
    pub epochs: usize,
    pub window: WindowConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { segments_per_scene: 12, epochs: 63, window: WindowConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSuite {
    pub train: Vec<Sequence>,
    pub valid: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut x = seed ^ h;
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Splits a segment's epochs so that windowing each part reproduces the 7:1:2
/// contiguous split of the segment's windows. Consecutive parts share the
/// `T − 1` epochs that precede their first window.
pub fn split_sequence(seq: &Sequence, window: usize) -> [Sequence; 3] {
    let n_windows = seq.epochs.len().saturating_sub(window - 1);
    let (ntr, nva, _) = split_counts(n_windows);
    let part = |from: usize, to: usize| Sequence {
        seq_id: seq.seq_id.clone(),
        epochs: seq.epochs[from.min(seq.epochs.len())..to.min(seq.epochs.len())].to_vec(),
    };
    let e = window - 1;
    [part(0, ntr + e), part(ntr, ntr + nva + e), part(ntr + nva, seq.epochs.len())]
}

/// Twelve segments per scene type by default, each split into contiguous
/// train/valid/test blocks.
pub fn make_benchmark_suite(seed: u64, cfg: &SuiteConfig) -> Result<BenchmarkSuite> {
    let mut suite = BenchmarkSuite { train: Vec::new(), valid: Vec::new(), test: Vec::new() };
    for scene in SceneLabel::ALL {
        for k in 0..cfg.segments_per_scene {
            let id = format!("{scene}_{k}");
            let mut sc = SceneConfig::preset(scene, &id, derive_seed(seed, &id));
            sc.duration = cfg.epochs as f64 / sc.rate;
            let seq = generate_scene(&sc)?;
            let [tr, va, te] = split_sequence(&seq, cfg.window.length);
            suite.train.push(tr);
            suite.valid.push(va);
            suite.test.push(te);
        }
    }
    Ok(suite)
}

/// Fraction of epochs in which at least one satellite carries an NLOS bias
/// larger than `threshold` meters, measured from the ground-truth errors.
pub fn nlos_epoch_fraction(seqs: &[Sequence], scene: SceneLabel, threshold: f64) -> f64 {
    let epochs: Vec<&EpochObservation> = seqs.iter().flat_map(|s| &s.epochs).filter(|e| e.scene == scene).collect();
    if epochs.is_empty() {
        return 0.0;
    }
    let hit = epochs
        .iter()
        .filter(|e| e.sats.iter().any(|s| s.gt_error.is_some_and(|g| g > threshold)))
        .count();
    hit as f64 / epochs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnss::solve_spp;

    #[test]
    fn noiseless_scene_positions_exactly() {
        let cfg = SceneConfig {
            los_sigma: 0.0,
            multipath_sigma: 0.0,
            clock_bias: (0.0, 0.0),
            clock_drift: 0.0,
            duration: 10.0,
            ..SceneConfig::preset(SceneLabel::OpenSky, "z", 3)
        };
        let seq = generate_scene(&cfg).unwrap();
        for ep in &seq.epochs {
            let sol = solve_spp(ep).unwrap();
            assert!(distance(&sol.position, &ep.gt_receiver_pos.unwrap()) < 1e-4);
        }
    }

    #[test]
    fn scripted_event_is_ground_truth() {
        let cfg = SceneConfig {
            los_sigma: 0.5,
            multipath_sigma: 0.0,
            events: vec![NlosEvent { sat: 0, onset: 20.0, offset: 30.0, bias: 40.0 }],
            duration: 40.0,
            ..SceneConfig::preset(SceneLabel::HighRise, "h", 9)
        };
        let cfg = SceneConfig { nlos: None, dropout: 0.0, ..cfg };
        let seq = generate_scene(&cfg).unwrap();
        for ep in &seq.epochs {
            let biased: Vec<f64> = ep.sats.iter().filter_map(|s| s.gt_error).filter(|g| *g > 20.0).collect();
            if (20.0..30.0).contains(&ep.epoch_time) {
                assert_eq!(biased.len(), 1);
                assert!((biased[0] - 40.0).abs() < 1.5);
            } else {
                assert!(biased.is_empty());
            }
        }
    }

    #[test]
    fn split_blocks_overlap_by_window_tail() {
        let seq = generate_scene(&SceneConfig { duration: 63.0, ..SceneConfig::default() }).unwrap();
        let [tr, va, te] = split_sequence(&seq, 3);
        assert_eq!((tr.epochs.len(), va.epochs.len(), te.epochs.len()), (45, 8, 14));
    }

    #[test]
    fn invalid_config() {
        let cfg = SceneConfig { n_satellites: (6, 5), ..SceneConfig::default() };
        assert!(matches!(generate_scene(&cfg), Err(Error::Config(_))));
    }
}
