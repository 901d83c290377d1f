//! Per-satellite features, sliding windows, augmentation, splitting and
//! normalization.
//!
//! Feature channels, in order: least-squares pseudorange error, epoch RSS,
//! C/N0, elevation, azimuth.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::geometry::distance;
use super::observation::{EpochObservation, SatId, SceneLabel, Sequence};
use super::spp::{solve_spp_from, ReceiverSolution, SppConfig};
use super::GnssError;

pub const NUM_FEATURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Epochs per window.
    pub length: usize,
    /// Satellite rows per window.
    pub n_max: usize,
    /// Clip duration used by [`augment`], seconds.
    pub clip_len: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { length: 3, n_max: 32, clip_len: 5.0 }
    }
}

/// `Δρ_LS,k = ρ̂_k − ‖p_k − p̂_r‖ − b̂`, i.e. the SPP residual with the
/// estimated receiver clock removed.
pub fn compute_ls_error(epoch: &EpochObservation, sol: &ReceiverSolution) -> Vec<f64> {
    epoch
        .sats
        .iter()
        .map(|s| s.pseudorange - distance(&s.sat_pos, &sol.position) - sol.clock_bias)
        .collect()
}

pub fn compute_rss(ls_errors: &[f64]) -> f64 {
    ls_errors.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Features of one epoch, satellites in the epoch's own order.
#[derive(Clone, Debug)]
pub struct EpochFeatures {
    pub solution: ReceiverSolution,
    pub ls_errors: Vec<f64>,
    pub rss: f64,
}

/// Solves every epoch of a sequence, seeding each solve with the previous
/// solution. Epochs that cannot be positioned yield `None`.
pub fn epoch_features(seq: &Sequence) -> Vec<Option<EpochFeatures>> {
    let cfg = SppConfig::default();
    let mut prev = None;
    seq.epochs
        .iter()
        .map(|ep| match solve_spp_from(ep, prev, &cfg).or_else(|_| solve_spp_from(ep, None, &cfg)) {
            Ok(sol) => {
                prev = Some((sol.position, sol.clock_bias));
                let ls = compute_ls_error(ep, &sol);
                let rss = compute_rss(&ls);
                Some(EpochFeatures { solution: sol, ls_errors: ls, rss })
            }
            Err(e) => {
                log::warn!("{} @ {}: epoch skipped: {e}", seq.seq_id, ep.epoch_time);
                None
            }
        })
        .collect()
}

/// Network input for one window. Row-major arrays: `features` is
/// `n_max × T × 5`, `mask` is `n_max × T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub seq_id: String,
    /// Index of the scene segment within its sequence.
    pub segment: usize,
    pub scene: SceneLabel,
    pub epoch_times: Vec<f64>,
    /// Canonically ordered satellites, then `None` padding rows.
    pub sat_ids: Vec<Option<SatId>>,
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    /// Ground-truth error at the last epoch, where known.
    pub gt_errors: Vec<Option<f64>>,
}

impl FeatureWindow {
    pub fn n_max(&self) -> usize {
        self.sat_ids.len()
    }

    pub fn len(&self) -> usize {
        self.epoch_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epoch_times.is_empty()
    }

    pub fn last_time(&self) -> f64 {
        *self.epoch_times.last().expect("window has epochs")
    }

    pub fn feature(&self, sat: usize, step: usize) -> &[f64] {
        let o = (sat * self.len() + step) * NUM_FEATURES;
        &self.features[o..o + NUM_FEATURES]
    }

    pub fn is_valid(&self, sat: usize, step: usize) -> bool {
        self.mask[sat * self.len() + step]
    }

    /// Observed at the last epoch, i.e. the satellite gets a prediction.
    pub fn is_target(&self, sat: usize) -> bool {
        self.is_valid(sat, self.len() - 1)
    }

    pub fn num_targets(&self) -> usize {
        (0..self.n_max()).filter(|&k| self.is_target(k)).count()
    }

    pub fn num_sats(&self) -> usize {
        self.sat_ids.iter().filter(|s| s.is_some()).count()
    }

    /// Key used to deduplicate windows.
    pub fn key(&self) -> (String, Vec<u64>) {
        (self.seq_id.clone(), self.epoch_times.iter().map(|t| t.to_bits()).collect())
    }
}

/// Runs of consecutive epochs with the same scene label, as index ranges.
fn segments(seq: &Sequence) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=seq.epochs.len() {
        if i == seq.epochs.len() || seq.epochs[i].scene != seq.epochs[start].scene {
            out.push(start..i);
            start = i;
        }
    }
    out
}

fn make_window(
    seq: &Sequence,
    feats: &[Option<EpochFeatures>],
    segment: usize,
    idx: &[usize],
    cfg: &WindowConfig,
) -> Result<FeatureWindow, GnssError> {
    let epochs: Vec<&EpochObservation> = idx.iter().map(|&i| &seq.epochs[i]).collect();
    let ids: BTreeSet<&SatId> = epochs.iter().flat_map(|e| e.sats.iter().map(|s| &s.sat_id)).collect();
    if ids.len() > cfg.n_max {
        return Err(GnssError::TooManySatellites(ids.len(), cfg.n_max));
    }
    let t = idx.len();
    let mut features = vec![0.0; cfg.n_max * t * NUM_FEATURES];
    let mut mask = vec![false; cfg.n_max * t];
    let mut gt_errors = vec![None; cfg.n_max];
    for (row, id) in ids.iter().enumerate() {
        for (step, (&ei, ep)) in idx.iter().zip(&epochs).enumerate() {
            let Some(f) = &feats[ei] else { continue };
            let Some(k) = ep.sats.iter().position(|s| &s.sat_id == *id) else { continue };
            let s = &ep.sats[k];
            let o = (row * t + step) * NUM_FEATURES;
            features[o..o + NUM_FEATURES].copy_from_slice(&[f.ls_errors[k], f.rss, s.cn0, s.elevation, s.azimuth]);
            mask[row * t + step] = true;
            if step == t - 1 {
                gt_errors[row] = s.gt_error;
            }
        }
    }
    let mut sat_ids: Vec<Option<SatId>> = ids.into_iter().map(|s| Some(s.clone())).collect();
    sat_ids.resize(cfg.n_max, None);
    Ok(FeatureWindow {
        seq_id: seq.seq_id.clone(),
        segment,
        scene: epochs[0].scene,
        epoch_times: epochs.iter().map(|e| e.epoch_time).collect(),
        sat_ids,
        features,
        mask,
        gt_errors,
    })
}

/// Index triples of every window position whose epochs could all be
/// positioned.
fn usable(feats: &[Option<EpochFeatures>], idx: &[usize]) -> bool {
    idx.iter().all(|&i| feats[i].is_some())
}

/// One window per run of `cfg.length` consecutive epochs, never crossing a
/// change of scene label.
pub fn build_windows(seq: &Sequence, cfg: &WindowConfig) -> Result<Vec<FeatureWindow>, GnssError> {
    if seq.epochs.len() < cfg.length {
        return Err(GnssError::WindowTooShort { len: seq.epochs.len(), needed: cfg.length });
    }
    let feats = epoch_features(seq);
    let mut out = Vec::new();
    for (si, range) in segments(seq).into_iter().enumerate() {
        if range.len() < cfg.length {
            continue;
        }
        for start in range.start..=range.end - cfg.length {
            let idx: Vec<usize> = (start..start + cfg.length).collect();
            if usable(&feats, &idx) {
                out.push(make_window(seq, &feats, si, &idx, cfg)?);
            }
        }
    }
    Ok(out)
}

/// Contiguous windows followed by every order-preserving `cfg.length`-subset
/// of each `cfg.clip_len`-second clip, without repeated epoch-time tuples.
pub fn augment(seq: &Sequence, cfg: &WindowConfig) -> Result<Vec<FeatureWindow>, GnssError> {
    let mut out = if seq.epochs.len() < cfg.length { Vec::new() } else { build_windows(seq, cfg)? };
    let mut seen: HashSet<(String, Vec<u64>)> = out.iter().map(FeatureWindow::key).collect();
    let feats = epoch_features(seq);
    for (si, range) in segments(seq).into_iter().enumerate() {
        for start in range.clone() {
            let t0 = seq.epochs[start].epoch_time;
            let clip: Vec<usize> = (start..range.end)
                .take_while(|&i| seq.epochs[i].epoch_time < t0 + cfg.clip_len - 1e-9)
                .collect();
            for combo in combinations(clip.len(), cfg.length) {
                let idx: Vec<usize> = combo.iter().map(|&c| clip[c]).collect();
                let key = (seq.seq_id.clone(), idx.iter().map(|&i| seq.epochs[i].epoch_time.to_bits()).collect());
                if !usable(&feats, &idx) || seen.contains(&key) {
                    continue;
                }
                seen.insert(key);
                out.push(make_window(seq, &feats, si, &idx, cfg)?);
            }
        }
    }
    Ok(out)
}

/// Lexicographic `k`-subsets of `0..n`.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 && k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct SplitSets {
    pub train: Vec<FeatureWindow>,
    pub valid: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

/// Block sizes `(train, valid, test)` for `n` windows at 7:1:2.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let valid = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// 7:1:2 split by contiguous time blocks inside each scene segment: earliest
/// windows train, then valid, then test.
pub fn split_dataset(windows: Vec<FeatureWindow>) -> Result<SplitSets, GnssError> {
    let mut groups: Vec<((String, usize), Vec<FeatureWindow>)> = Vec::new();
    for w in windows {
        let key = (w.seq_id.clone(), w.segment);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(w),
            None => groups.push((key, vec![w])),
        }
    }
    let mut sets = SplitSets::default();
    for ((seq, seg), mut group) in groups {
        if group.len() < 10 {
            return Err(GnssError::SegmentTooSmall(format!("{seq}#{seg}"), group.len()));
        }
        group.sort_by(|a, b| a.last_time().total_cmp(&b.last_time()));
        let (ntr, nva, _) = split_counts(group.len());
        let mut it = group.into_iter();
        sets.train.extend(it.by_ref().take(ntr));
        sets.valid.extend(it.by_ref().take(nva));
        sets.test.extend(it);
    }
    Ok(sets)
}

/// Per-channel z-score statistics over unmasked entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl NormStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; NUM_FEATURES], std: [1.0; NUM_FEATURES] }
    }

    /// Channels with standard deviation below 1e-6 get `std = 1`.
    pub fn compute(windows: &[FeatureWindow]) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; NUM_FEATURES];
        for w in windows {
            for (chunk, &m) in w.features.chunks_exact(NUM_FEATURES).zip(&w.mask) {
                if m {
                    n += 1;
                    for c in 0..NUM_FEATURES {
                        sum[c] += chunk[c];
                    }
                }
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / n as f64);
        let mut var = [0.0; NUM_FEATURES];
        for w in windows {
            for (chunk, &m) in w.features.chunks_exact(NUM_FEATURES).zip(&w.mask) {
                if m {
                    for c in 0..NUM_FEATURES {
                        var[c] += (chunk[c] - mean[c]).powi(2);
                    }
                }
            }
        }
        let std = var.map(|v| {
            let s = (v / n as f64).sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, w: &mut FeatureWindow) {
        for (chunk, &m) in w.features.chunks_exact_mut(NUM_FEATURES).zip(&w.mask) {
            for c in 0..NUM_FEATURES {
                chunk[c] = if m { (chunk[c] - self.mean[c]) / self.std[c] } else { 0.0 };
            }
        }
    }

    pub fn normalize(&self, windows: &mut [FeatureWindow]) {
        windows.iter_mut().for_each(|w| self.apply(w));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnss::observation::SatObservation;

    fn seq(n: usize, drop: &[(usize, &str)]) -> Sequence {
        let rx = crate::gnss::geometry::geodetic_to_ecef(31.0, 121.0, 10.0);
        let dirs = [(80.0, 10.0), (45.0, 60.0), (30.0, 150.0), (20.0, 230.0), (55.0, 300.0), (15.0, 340.0)];
        let epochs = (0..n)
            .map(|i| EpochObservation {
                epoch_time: i as f64,
                seq_id: "s".into(),
                scene: SceneLabel::Wooded,
                sats: dirs
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| !drop.contains(&(i, format!("G{:02}", k + 1).as_str())))
                    .map(|(k, &(el, az))| {
                        let p = crate::gnss::geometry::point_on_shell(&rx, el, az, 26_571_000.0);
                        SatObservation {
                            sat_id: SatId::new(format!("G{:02}", k + 1)),
                            sat_pos: p,
                            pseudorange: distance(&p, &rx),
                            cn0: 40.0 + k as f64,
                            elevation: el,
                            azimuth: az,
                            gt_error: Some(0.0),
                        }
                    })
                    .collect(),
                gt_receiver_pos: Some(rx),
            })
            .collect();
        Sequence { seq_id: "s".into(), epochs }
    }

    #[test]
    fn rss_cases() {
        assert_eq!(compute_rss(&[3.0, 4.0]), 5.0);
        assert_eq!(compute_rss(&[-2.5]), 2.5);
        assert_eq!(compute_rss(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn five_epochs_three_windows() {
        let w = build_windows(&seq(5, &[]), &WindowConfig::default()).unwrap();
        assert_eq!(w.len(), 3);
        assert!(matches!(
            build_windows(&seq(2, &[]), &WindowConfig::default()),
            Err(GnssError::WindowTooShort { len: 2, needed: 3 })
        ));
    }

    #[test]
    fn absent_satellite_is_masked() {
        let w = &build_windows(&seq(3, &[(2, "G03")]), &WindowConfig::default()).unwrap()[0];
        let row = w.sat_ids.iter().position(|s| s.as_ref().map(|s| s.as_str()) == Some("G03")).unwrap();
        assert_eq!(&w.mask[row * 3..row * 3 + 3], &[true, true, false]);
        assert!(w.feature(row, 2).iter().all(|&v| v == 0.0));
        assert_eq!(w.gt_errors[row], None);
    }

    #[test]
    fn clip_combinations() {
        let cfg = WindowConfig::default();
        let five = augment(&seq(5, &[]), &cfg).unwrap();
        assert_eq!(five.len(), 10);
        let three = augment(&seq(3, &[]), &cfg).unwrap();
        assert_eq!(three.len(), 1);
    }

    #[test]
    fn split_ratio() {
        let mk = |seg: usize, n: usize| {
            let base = build_windows(&seq(3, &[]), &WindowConfig::default()).unwrap().remove(0);
            (0..n)
                .map(|i| FeatureWindow { segment: seg, epoch_times: vec![0.0, 1.0, i as f64 + 2.0], ..base.clone() })
                .collect::<Vec<_>>()
        };
        let s = split_dataset(mk(0, 100)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (70, 10, 20));
        let s = split_dataset(mk(0, 10)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 1, 2));
        let mut both = mk(0, 10);
        both.extend(mk(1, 20));
        let s = split_dataset(both).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (21, 3, 6));
        assert!(matches!(split_dataset(mk(0, 9)), Err(GnssError::SegmentTooSmall(_, 9))));
    }

    #[test]
    fn normalization_keeps_masked_zero() {
        let mut w = build_windows(&seq(4, &[(3, "G02")]), &WindowConfig::default()).unwrap();
        let stats = NormStats::compute(&w);
        stats.normalize(&mut w);
        let back = NormStats::compute(&w);
        for c in 0..NUM_FEATURES {
            assert!(back.mean[c].abs() < 1e-9);
        }
        // elevation differs across satellites, RSS is constant (≈ 0) and clamps
        assert!(stats.std[3] > 1.0);
        assert_eq!(stats.std[1], 1.0);
        for win in &w {
            for (chunk, &m) in win.features.chunks_exact(NUM_FEATURES).zip(&win.mask) {
                if !m {
                    assert!(chunk.iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
