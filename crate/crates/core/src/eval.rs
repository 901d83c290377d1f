//! Error metrics, scene tables, the uncertainty-vs-iterations study and the
//! raw-versus-corrected positioning comparison, plus report export.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gnss::geometry::{ecef_to_enu, sub};
use crate::gnss::spp::solve_spp_with;
use crate::gnss::{FeatureWindow, SatId, SceneLabel, Sequence, SppConfig};
use crate::model::{DiffGnss, PredictionRecord};
use crate::train::predict_windows;
use crate::{Error, Params, Result};

/// `(MAE, RMSE)` of `pred − gt` over entries where `mask` is set.
pub fn metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    let errs: Vec<f64> = pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m).map(|((p, g), _)| p - g).collect();
    if errs.is_empty() {
        return Err(Error::Data("metrics over an empty mask".into()));
    }
    let n = errs.len() as f64;
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok((mae, rmse))
}

fn labeled(records: &[PredictionRecord]) -> impl Iterator<Item = (&PredictionRecord, f64)> {
    records.iter().filter_map(|r| r.gt.map(|g| (r, g)))
}

/// Metrics of the coarse (`fine = false`) or refined estimate over labeled
/// records.
pub fn record_metrics(records: &[PredictionRecord], fine: bool) -> Result<(f64, f64)> {
    let (p, g): (Vec<f64>, Vec<f64>) = labeled(records).map(|(r, g)| (if fine { r.fine } else { r.init }, g)).unzip();
    metrics(&p, &g, &vec![true; p.len()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: SceneLabel,
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mae_init: f64,
}

/// Refined-estimate metrics per scene, in scene order. Scenes without
/// labeled records are omitted and listed in the second return value.
pub fn scene_eval(records: &[PredictionRecord]) -> (Vec<SceneRow>, Vec<SceneLabel>) {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for scene in SceneLabel::ALL {
        let group: Vec<PredictionRecord> = records.iter().filter(|r| r.scene == scene).cloned().collect();
        match (record_metrics(&group, true), record_metrics(&group, false)) {
            (Ok((mae, rmse)), Ok((mae_init, _))) => {
                let count = labeled(&group).count();
                rows.push(SceneRow { scene, count, mae, rmse, mae_init });
            }
            _ => missing.push(scene),
        }
    }
    (rows, missing)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub threshold: f64,
    pub mean_u: f64,
    pub n_certain: usize,
    /// Refined MAE over satellites with `û_0 < threshold`.
    pub mae_certain: Option<f64>,
    pub n_uncertain: usize,
    pub mae_uncertain: Option<f64>,
}

pub fn uncertainty_summary(records: &[PredictionRecord], threshold: f64) -> UncertaintySummary {
    let lab: Vec<(&PredictionRecord, f64)> = labeled(records).collect();
    let split = |certain: bool| -> (usize, Option<f64>) {
        let errs: Vec<f64> =
            lab.iter().filter(|(r, _)| (r.u_hat < threshold) == certain).map(|(r, g)| (r.fine - g).abs()).collect();
        let n = errs.len();
        (n, (n > 0).then(|| errs.iter().sum::<f64>() / n as f64))
    };
    let (n_certain, mae_certain) = split(true);
    let (n_uncertain, mae_uncertain) = split(false);
    let mean_u = if lab.is_empty() { 0.0 } else { lab.iter().map(|(r, _)| r.u_hat).sum::<f64>() / lab.len() as f64 };
    UncertaintySummary { threshold, mean_u, n_certain, mae_certain, n_uncertain, mae_uncertain }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub iterations: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mean_u: f64,
}

/// Inference at each DDIM evaluation count over normalized windows.
pub fn uncertainty_study(
    model: &DiffGnss,
    params: &Params,
    windows: &[FeatureWindow],
    iterations: &[usize],
    seed: u64,
    threads: usize,
) -> Result<Vec<StudyRow>> {
    iterations
        .iter()
        .map(|&k| {
            let recs = predict_windows(model, params, windows, k, seed, threads)?;
            let (mae, rmse) = record_metrics(&recs, true)?;
            let mean_u = uncertainty_summary(&recs, 0.5).mean_u;
            Ok(StudyRow { iterations: k, mae, rmse, mean_u })
        })
        .collect()
}

/// Per-satellite corrections keyed by `(seq_id, epoch time, sat_id)`:
/// `(error estimate in m, û_0)`.
#[derive(Clone, Debug, Default)]
pub struct Corrections(HashMap<(String, u64, SatId), (f64, f64)>);

impl Corrections {
    pub fn from_predictions(records: &[PredictionRecord]) -> Self {
        Self(
            records
                .iter()
                .map(|r| ((r.seq_id.clone(), r.epoch_time.to_bits(), r.sat_id.clone()), (r.fine, r.u_hat)))
                .collect(),
        )
    }

    /// Ground-truth errors of every labeled satellite, with `û_0 = 0`.
    pub fn oracle(seqs: &[Sequence]) -> Self {
        let mut m = HashMap::new();
        for s in seqs {
            for e in &s.epochs {
                for sat in &e.sats {
                    if let Some(g) = sat.gt_error {
                        m.insert((s.seq_id.clone(), e.epoch_time.to_bits(), sat.sat_id.clone()), (g, 0.0));
                    }
                }
            }
        }
        Self(m)
    }

    /// Every value set to zero.
    pub fn zeroed(&self) -> Self {
        Self(self.0.iter().map(|(k, _)| (k.clone(), (0.0, 0.0))).collect())
    }

    pub fn get(&self, seq: &str, t: f64, sat: &SatId) -> Option<(f64, f64)> {
        self.0.get(&(seq.to_string(), t.to_bits(), sat.clone())).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochFix {
    pub epoch_time: f64,
    /// Horizontal error, m; `None` when the solve failed.
    pub raw: Option<f64>,
    pub corrected: Option<f64>,
    pub raw_enu: Option<[f64; 3]>,
    pub corrected_enu: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositioningBlock {
    pub epochs: usize,
    pub failed_raw: usize,
    pub failed_corrected: usize,
    /// `None` when no epoch could be solved.
    pub mean_horizontal_raw: Option<f64>,
    pub mean_horizontal_corrected: Option<f64>,
    pub enu_rmse_raw: Option<[f64; 3]>,
    pub enu_rmse_corrected: Option<[f64; 3]>,
    /// `(horizontal error, cumulative fraction)`, ascending.
    pub cdf_raw: Vec<(f64, f64)>,
    pub cdf_corrected: Vec<(f64, f64)>,
    pub fixes: Vec<EpochFix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionOptions {
    /// Drop satellites with `û_0 ≥ threshold` instead of correcting them.
    pub exclude_uncertain: bool,
    pub threshold: f64,
}

impl Default for PositionOptions {
    fn default() -> Self {
        Self { exclude_uncertain: false, threshold: 0.5 }
    }
}

/// Empirical CDF of `values` as ascending `(value, i / n)` pairs.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

/// Solves every epoch that has ground truth and at least one correction,
/// once with raw pseudoranges and once with `ρ − Δρ̂`, and compares both
/// solutions with the true receiver position in its local E/N/U frame.
pub fn position_compare(seqs: &[Sequence], corr: &Corrections, opts: &PositionOptions) -> PositioningBlock {
    let cfg = SppConfig::default();
    let mut fixes = Vec::new();
    for s in seqs {
        for e in &s.epochs {
            let Some(truth) = e.gt_receiver_pos else { continue };
            let lookup: Vec<Option<(f64, f64)>> = e.sats.iter().map(|sat| corr.get(&s.seq_id, e.epoch_time, &sat.sat_id)).collect();
            if lookup.iter().all(Option::is_none) {
                continue;
            }
            let enu = |pr: &[f64], keep: &[bool]| -> Option<[f64; 3]> {
                let mut ep = e.clone();
                let mut kept = Vec::new();
                ep.sats = e.sats.iter().zip(keep).filter(|(_, &k)| k).map(|(s, _)| s.clone()).collect();
                for (p, &k) in pr.iter().zip(keep) {
                    if k {
                        kept.push(*p);
                    }
                }
                let sol = solve_spp_with(&ep, &kept, None, &cfg).ok()?;
                Some(ecef_to_enu(&sub(&sol.position, &truth), &truth))
            };
            let raw_pr: Vec<f64> = e.sats.iter().map(|s| s.pseudorange).collect();
            let all = vec![true; e.sats.len()];
            let corr_pr: Vec<f64> =
                e.sats.iter().zip(&lookup).map(|(s, c)| s.pseudorange - c.map_or(0.0, |c| c.0)).collect();
            let keep: Vec<bool> = if opts.exclude_uncertain {
                lookup.iter().map(|c| c.is_none_or(|c| c.1 < opts.threshold)).collect()
            } else {
                all.clone()
            };
            let r = enu(&raw_pr, &all);
            let c = enu(&corr_pr, &keep);
            let h = |v: Option<[f64; 3]>| v.map(|v| v[0].hypot(v[1]));
            fixes.push(EpochFix { epoch_time: e.epoch_time, raw: h(r), corrected: h(c), raw_enu: r, corrected_enu: c });
        }
    }
    let summarize = |get: &dyn Fn(&EpochFix) -> Option<[f64; 3]>| {
        let v: Vec<[f64; 3]> = fixes.iter().filter_map(get).collect();
        let n = v.len() as f64;
        let mean_h = (!v.is_empty()).then(|| v.iter().map(|e| e[0].hypot(e[1])).sum::<f64>() / n);
        let rmse = (!v.is_empty()).then(|| [0, 1, 2].map(|k| (v.iter().map(|e| e[k] * e[k]).sum::<f64>() / n).sqrt()));
        let c = cdf(&v.iter().map(|e| e[0].hypot(e[1])).collect::<Vec<_>>());
        (fixes.len() - v.len(), mean_h, rmse, c)
    };
    let (failed_raw, mean_horizontal_raw, enu_rmse_raw, cdf_raw) = summarize(&|f| f.raw_enu);
    let (failed_corrected, mean_horizontal_corrected, enu_rmse_corrected, cdf_corrected) = summarize(&|f| f.corrected_enu);
    PositioningBlock {
        epochs: fixes.len(),
        failed_raw,
        failed_corrected,
        mean_horizontal_raw,
        mean_horizontal_corrected,
        enu_rmse_raw,
        enu_rmse_corrected,
        cdf_raw,
        cdf_corrected,
        fixes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mae_init: f64,
    pub rmse_init: f64,
    pub per_scene: Vec<SceneRow>,
    pub missing_scenes: Vec<SceneLabel>,
    pub uncertainty: UncertaintySummary,
    #[serde(skip)]
    pub traces: Vec<PredictionRecord>,
    pub positioning: Option<PositioningBlock>,
}

pub fn evaluate(records: &[PredictionRecord]) -> Result<EvalReport> {
    let (mae, rmse) = record_metrics(records, true)?;
    let (mae_init, rmse_init) = record_metrics(records, false)?;
    let (per_scene, missing_scenes) = scene_eval(records);
    for s in &missing_scenes {
        log::info!("scene {s} has no labeled predictions; omitted from the scene table");
    }
    Ok(EvalReport {
        count: labeled(records).count(),
        mae,
        rmse,
        mae_init,
        rmse_init,
        per_scene,
        missing_scenes,
        uncertainty: uncertainty_summary(records, 0.5),
        traces: records.to_vec(),
        positioning: None,
    })
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let p = dir.join(name);
    std::fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| Error::Io(p.display().to_string(), e))
}

fn io(dir: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(dir.display().to_string(), e)
}

/// Writes `metrics.csv`, `per_scene.csv`, `cdf.csv`, `traces.csv` and
/// `summary.json` into `dir`.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut f = create(dir, "metrics.csv")?;
    writeln!(f, "stage,count,mae_m,rmse_m").map_err(io(dir))?;
    writeln!(f, "coarse,{},{},{}", report.count, report.mae_init, report.rmse_init).map_err(io(dir))?;
    writeln!(f, "refined,{},{},{}", report.count, report.mae, report.rmse).map_err(io(dir))?;
    f.flush().map_err(io(dir))?;

    let mut f = create(dir, "per_scene.csv")?;
    writeln!(f, "scene,count,mae_m,rmse_m,mae_coarse_m").map_err(io(dir))?;
    for r in &report.per_scene {
        writeln!(f, "{},{},{},{},{}", r.scene, r.count, r.mae, r.rmse, r.mae_init).map_err(io(dir))?;
    }
    f.flush().map_err(io(dir))?;

    let mut f = create(dir, "cdf.csv")?;
    writeln!(f, "series,horizontal_error_m,cdf").map_err(io(dir))?;
    if let Some(p) = &report.positioning {
        let mut rows: Vec<(f64, &str, f64)> = p
            .cdf_raw
            .iter()
            .map(|&(e, c)| (e, "raw", c))
            .chain(p.cdf_corrected.iter().map(|&(e, c)| (e, "corrected", c)))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        for (e, s, c) in rows {
            writeln!(f, "{s},{e},{c}").map_err(io(dir))?;
        }
    }
    f.flush().map_err(io(dir))?;

    let f = create(dir, "traces.csv")?;
    write_predictions(&report.traces, f)?;

    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("summary.json"), json + "\n").map_err(io(dir))?;
    Ok(())
}

pub const PREDICTION_HEADER: [&str; 9] =
    ["seq_id", "scene", "epoch_time_s", "sat_id", "init_m", "eps_hat", "fine_m", "u_hat", "gt_err_m"];

pub fn write_predictions<W: Write>(records: &[PredictionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(PREDICTION_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.seq_id.clone(),
            r.scene.to_string(),
            r.epoch_time.to_string(),
            r.sat_id.to_string(),
            r.init.to_string(),
            r.eps_hat.to_string(),
            r.fine.to_string(),
            r.u_hat.to_string(),
            r.gt.map(|g| g.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io("predictions".into(), e))
}

pub fn read_predictions<R: std::io::Read>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Data(format!("csv: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>() != PREDICTION_HEADER {
        return Err(Error::Data(format!("unexpected predictions header, expected {}", PREDICTION_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Data(format!("line {line}: `{}` is not a number", &rec[k])))
        };
        out.push(PredictionRecord {
            seq_id: rec[0].to_string(),
            scene: rec[1].parse().map_err(|e: String| Error::Data(format!("line {line}: {e}")))?,
            epoch_time: num(2)?,
            sat_id: SatId::new(&rec[3]),
            init: num(4)?,
            eps_hat: num(5)?,
            fine: num(6)?,
            u_hat: num(7)?,
            gt: if rec[8].is_empty() { None } else { Some(num(8)?) },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scene: SceneLabel, fine: f64, gt: f64, u: f64) -> PredictionRecord {
        PredictionRecord {
            seq_id: "s".into(),
            scene,
            epoch_time: 1.0,
            sat_id: SatId::new("G01"),
            init: 0.0,
            eps_hat: 0.0,
            fine,
            u_hat: u,
            gt: Some(gt),
        }
    }

    #[test]
    fn metric_cases() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), (0.0, 0.0));
        assert_eq!(metrics(&[1.0, -1.0], &[0.0, 0.0], &[true, true]).unwrap(), (1.0, 1.0));
        let (mae, rmse) = metrics(&[0.0, 2.0], &[0.0, 0.0], &[true, true]).unwrap();
        assert_eq!(mae, 1.0);
        assert!((rmse - 2f64.sqrt()).abs() < 1e-15);
        assert!(metrics(&[1.0], &[0.0], &[false]).is_err());
    }

    #[test]
    fn scene_table_weighted_mean() {
        let recs = vec![
            rec(SceneLabel::Bridge, 1.0, 0.0, 0.1),
            rec(SceneLabel::Bridge, 3.0, 0.0, 0.9),
            rec(SceneLabel::Wooded, -0.5, 0.0, 0.2),
        ];
        let (rows, missing) = scene_eval(&recs);
        assert_eq!(rows.len(), 2);
        assert_eq!(missing, vec![SceneLabel::OpenSky, SceneLabel::HighRise]);
        let total: usize = rows.iter().map(|r| r.count).sum();
        let weighted = rows.iter().map(|r| r.mae * r.count as f64).sum::<f64>() / total as f64;
        let overall = record_metrics(&recs, true).unwrap().0;
        assert!((weighted - overall).abs() < 1e-9);
        let u = uncertainty_summary(&recs, 0.5);
        assert_eq!((u.n_certain, u.n_uncertain), (2, 1));
        assert_eq!(u.mae_uncertain, Some(3.0));
    }

    #[test]
    fn single_scene_matches_overall() {
        let recs = vec![rec(SceneLabel::HighRise, 1.0, 0.5, 0.0), rec(SceneLabel::HighRise, 2.0, 0.0, 0.0)];
        let (rows, _) = scene_eval(&recs);
        let (mae, rmse) = record_metrics(&recs, true).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].mae, rows[0].rmse), (mae, rmse));
    }

    #[test]
    fn cdf_ends_at_one() {
        let c = cdf(&[3.0, 1.0, 2.0]);
        assert_eq!(c.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.last().unwrap().1, 1.0);
    }

    #[test]
    fn predictions_round_trip() {
        let mut recs = vec![rec(SceneLabel::OpenSky, 0.25, -0.125, 0.75)];
        recs[0].gt = None;
        let mut buf = Vec::new();
        write_predictions(&recs, &mut buf).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), recs);
    }
}
