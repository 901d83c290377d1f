//! Per-epoch observation records and their CSV form.
//!
//! One row per satellite per epoch:
//!
//! ```text
//! epoch_time_s,seq_id,scene,sat_id,sat_x_m,sat_y_m,sat_z_m,pr_corr_m,cn0_dbhz,elev_deg,az_deg,gt_err_m,gt_rx_x_m,gt_rx_y_m,gt_rx_z_m
//! ```
//!
//! Ground-truth columns may be empty. Floats are written in shortest
//! round-trip form, so save → load reproduces every value exactly.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::geometry::Ecef;
use super::GnssError;

pub const CSV_HEADER: [&str; 15] = [
    "epoch_time_s",
    "seq_id",
    "scene",
    "sat_id",
    "sat_x_m",
    "sat_y_m",
    "sat_z_m",
    "pr_corr_m",
    "cn0_dbhz",
    "elev_deg",
    "az_deg",
    "gt_err_m",
    "gt_rx_x_m",
    "gt_rx_y_m",
    "gt_rx_z_m",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneLabel {
    OpenSky,
    Wooded,
    HighRise,
    Bridge,
}

impl SceneLabel {
    pub const ALL: [SceneLabel; 4] = [SceneLabel::OpenSky, SceneLabel::Wooded, SceneLabel::HighRise, SceneLabel::Bridge];

    pub fn as_str(&self) -> &'static str {
        match self {
            SceneLabel::OpenSky => "open_sky",
            SceneLabel::Wooded => "wooded",
            SceneLabel::HighRise => "high_rise",
            SceneLabel::Bridge => "bridge",
        }
    }
}

impl fmt::Display for SceneLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SceneLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown scene `{s}` (expected open_sky, wooded, high_rise or bridge)"))
    }
}

/// Constellation-prefixed satellite identifier such as `G05` or `C21`.
///
/// Ordering is by constellation letter, then PRN, which is the canonical
/// satellite order used throughout the pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SatId(String);

impl SatId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn constellation(&self) -> char {
        self.0.chars().next().unwrap_or('?')
    }

    pub fn prn(&self) -> u32 {
        self.0.get(1..).and_then(|s| s.parse().ok()).unwrap_or(u32::MAX)
    }
}

impl Ord for SatId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.constellation(), self.prn(), &self.0).cmp(&(other.constellation(), other.prn(), &other.0))
    }
}

impl PartialOrd for SatId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SatId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SatObservation {
    pub sat_id: SatId,
    pub sat_pos: Ecef,
    /// Atmosphere- and satellite-clock-corrected pseudorange, m.
    pub pseudorange: f64,
    /// dB-Hz.
    pub cn0: f64,
    /// Degrees, `[0, 90]`.
    pub elevation: f64,
    /// Degrees, `[0, 360)`.
    pub azimuth: f64,
    /// Ground-truth pseudorange error, m.
    pub gt_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochObservation {
    pub epoch_time: f64,
    pub seq_id: String,
    pub scene: SceneLabel,
    pub sats: Vec<SatObservation>,
    pub gt_receiver_pos: Option<Ecef>,
}

impl EpochObservation {
    pub fn sat(&self, id: &SatId) -> Option<&SatObservation> {
        self.sats.iter().find(|s| &s.sat_id == id)
    }

    pub fn validate(&self) -> Result<(), GnssError> {
        if self.sats.is_empty() {
            return Err(GnssError::InvalidEpoch(format!("{} @ {}: no satellites", self.seq_id, self.epoch_time)));
        }
        let mut ids: Vec<&SatId> = self.sats.iter().map(|s| &s.sat_id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(GnssError::InvalidEpoch(format!("{} @ {}: duplicate satellite id", self.seq_id, self.epoch_time)));
        }
        for s in &self.sats {
            check_units(s).map_err(GnssError::UnitSanity)?;
        }
        Ok(())
    }
}

fn check_units(s: &SatObservation) -> Result<(), String> {
    if !(0.0..=90.0).contains(&s.elevation) {
        return Err(format!("{}: elevation {} deg outside [0, 90]", s.sat_id, s.elevation));
    }
    if !(0.0..360.0).contains(&s.azimuth) {
        return Err(format!("{}: azimuth {} deg outside [0, 360)", s.sat_id, s.azimuth));
    }
    if s.cn0 < 0.0 || !s.cn0.is_finite() {
        return Err(format!("{}: C/N0 {} dB-Hz is negative", s.sat_id, s.cn0));
    }
    Ok(())
}

/// Time-ordered epochs sharing a `seq_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub seq_id: String,
    pub epochs: Vec<EpochObservation>,
}

pub fn write_observations<W: Write>(sequences: &[Sequence], out: W) -> Result<(), GnssError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for seq in sequences {
        for ep in &seq.epochs {
            let rx = ep.gt_receiver_pos;
            for s in &ep.sats {
                w.write_record([
                    ep.epoch_time.to_string(),
                    ep.seq_id.clone(),
                    ep.scene.to_string(),
                    s.sat_id.to_string(),
                    s.sat_pos[0].to_string(),
                    s.sat_pos[1].to_string(),
                    s.sat_pos[2].to_string(),
                    s.pseudorange.to_string(),
                    s.cn0.to_string(),
                    s.elevation.to_string(),
                    s.azimuth.to_string(),
                    opt(s.gt_error),
                    opt(rx.map(|p| p[0])),
                    opt(rx.map(|p| p[1])),
                    opt(rx.map(|p| p[2])),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| GnssError::Io("csv output".into(), e))?;
    Ok(())
}

pub fn save_observations(sequences: &[Sequence], path: &Path) -> Result<(), GnssError> {
    let file = std::fs::File::create(path).map_err(|e| GnssError::Io(path.display().to_string(), e))?;
    write_observations(sequences, std::io::BufWriter::new(file))
}

pub fn load_observations(path: &Path) -> Result<Vec<Sequence>, GnssError> {
    let file = std::fs::File::open(path).map_err(|e| GnssError::Io(path.display().to_string(), e))?;
    read_observations(std::io::BufReader::new(file))
}

/// Rows with the same `(seq_id, epoch_time)` that are adjacent in the file form
/// one epoch; sequences keep their first-appearance order.
pub fn read_observations<R: Read>(input: R) -> Result<Vec<Sequence>, GnssError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(Vec::new()),
        Some(h) => h?,
    };
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(GnssError::Malformed { line: 1, reason: "unexpected header".into() });
    }
    let mut sequences: Vec<Sequence> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |reason: String| GnssError::Malformed { line, reason };
        if rec.len() != CSV_HEADER.len() {
            return Err(bad(format!("expected {} fields, got {}", CSV_HEADER.len(), rec.len())));
        }
        let num = |k: usize| -> Result<f64, GnssError> {
            rec[k].parse::<f64>().map_err(|_| bad(format!("{}: `{}` is not a number", CSV_HEADER[k], &rec[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>, GnssError> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let epoch_time = num(0)?;
        let seq_id = rec[1].to_string();
        let scene: SceneLabel = rec[2].parse().map_err(bad)?;
        let sat = SatObservation {
            sat_id: SatId::new(&rec[3]),
            sat_pos: [num(4)?, num(5)?, num(6)?],
            pseudorange: num(7)?,
            cn0: num(8)?,
            elevation: num(9)?,
            azimuth: num(10)?,
            gt_error: opt(11)?,
        };
        check_units(&sat).map_err(|e| GnssError::UnitSanity(format!("line {line}: {e}")))?;
        let rx = match (opt(12)?, opt(13)?, opt(14)?) {
            (Some(x), Some(y), Some(z)) => Some([x, y, z]),
            (None, None, None) => None,
            _ => return Err(bad("receiver ground truth must have all three coordinates or none".into())),
        };
        let seq = match sequences.iter_mut().position(|s| s.seq_id == seq_id) {
            Some(p) => &mut sequences[p],
            None => {
                sequences.push(Sequence { seq_id: seq_id.clone(), epochs: Vec::new() });
                sequences.last_mut().unwrap()
            }
        };
        match seq.epochs.last_mut() {
            Some(ep) if ep.epoch_time == epoch_time => {
                if ep.sat(&sat.sat_id).is_some() {
                    return Err(bad(format!("duplicate satellite {} in epoch {epoch_time}", sat.sat_id)));
                }
                ep.sats.push(sat);
            }
            last => {
                if let Some(prev) = last {
                    if epoch_time < prev.epoch_time {
                        return Err(bad(format!("epoch time {epoch_time} goes backwards in sequence {seq_id}")));
                    }
                }
                seq.epochs.push(EpochObservation { epoch_time, seq_id, scene, sats: vec![sat], gt_receiver_pos: rx });
            }
        }
    }
    Ok(sequences)
}
