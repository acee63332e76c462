//! Line-delimited JSON encoding of epoch frames, one epoch per line.

use std::io::{self, Write};

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{EpochFrame, Observation, RawMeasurement};
use crate::geom::{BsSite, Position3};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    x_m: f64,
    y_m: f64,
    vx_mps: f64,
    vy_mps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObsRecord {
    bs_id: u32,
    bs_x_m: f64,
    bs_y_m: f64,
    bs_z_m: f64,
    range_toa_m: f64,
    azimuth_rad: f64,
    range_rss_m: f64,
    los: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t_s: f64,
    ue_height_m: f64,
    truth: TruthRecord,
    obs: Vec<ObsRecord>,
}

impl From<&EpochFrame> for FrameRecord {
    fn from(f: &EpochFrame) -> Self {
        Self {
            t_s: f.t,
            ue_height_m: f.ue_height,
            truth: TruthRecord {
                x_m: f.truth[0],
                y_m: f.truth[1],
                vx_mps: f.truth[2],
                vy_mps: f.truth[3],
            },
            obs: f
                .obs
                .iter()
                .map(|o| ObsRecord {
                    bs_id: o.site.id.0,
                    bs_x_m: o.site.pos.x,
                    bs_y_m: o.site.pos.y,
                    bs_z_m: o.site.pos.z,
                    range_toa_m: o.meas.range_toa,
                    azimuth_rad: o.meas.azimuth,
                    range_rss_m: o.meas.range_rss,
                    los: o.meas.los,
                })
                .collect(),
        }
    }
}

impl FrameRecord {
    fn into_frame(self) -> std::result::Result<EpochFrame, String> {
        let t = &self.truth;
        let mut numbers = vec![self.t_s, self.ue_height_m, t.x_m, t.y_m, t.vx_mps, t.vy_mps];
        for o in &self.obs {
            numbers.extend([o.bs_x_m, o.bs_y_m, o.bs_z_m, o.range_toa_m, o.azimuth_rad, o.range_rss_m]);
        }
        if numbers.iter().any(|v| !v.is_finite()) {
            return Err("non-finite number".into());
        }
        Ok(EpochFrame {
            t: self.t_s,
            truth: Vector4::new(t.x_m, t.y_m, t.vx_mps, t.vy_mps),
            ue_height: self.ue_height_m,
            obs: self
                .obs
                .into_iter()
                .map(|o| Observation {
                    site: BsSite::new(o.bs_id, Position3::new(o.bs_x_m, o.bs_y_m, o.bs_z_m)),
                    meas: RawMeasurement {
                        range_toa: o.range_toa_m,
                        azimuth: o.azimuth_rad,
                        range_rss: o.range_rss_m,
                        los: o.los,
                    },
                })
                .collect(),
        })
    }
}

pub fn encode_frame(frame: &EpochFrame) -> String {
    serde_json::to_string(&FrameRecord::from(frame)).expect("frame records always serialize")
}

pub fn write_frames<W: Write>(mut w: W, frames: &[EpochFrame]) -> io::Result<()> {
    for f in frames {
        writeln!(w, "{}", encode_frame(f))?;
    }
    w.flush()
}

/// Parses a whole stream. Blank lines are skipped; epochs must be strictly
/// increasing in time.
pub fn parse_frames(text: &str) -> Result<Vec<EpochFrame>> {
    let mut frames: Vec<EpochFrame> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let stream_err = |reason: String| Error::Stream { line: line_no, reason };
        let record: FrameRecord = serde_json::from_str(line).map_err(|e| stream_err(e.to_string()))?;
        let frame = record.into_frame().map_err(stream_err)?;
        if let Some(prev) = frames.last() {
            if frame.t <= prev.t {
                return Err(stream_err(format!(
                    "time {} does not advance past {}",
                    frame.t, prev.t
                )));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, MeasurementMode, ScenarioConfig, TrajectoryConfig};

    #[test]
    fn round_trip_is_exact() {
        let cfg = ScenarioConfig {
            trajectory: TrajectoryConfig::straight(300.0, 10.0),
            ..ScenarioConfig::default()
        };
        let sc = simulate(&cfg, MeasurementMode::Noisy).unwrap();
        let mut buf = Vec::new();
        write_frames(&mut buf, &sc.frames).unwrap();
        let back = parse_frames(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, sc.frames);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = r#"{"t_s":0.0,"ue_height_m":2.0,"truth":{"x_m":0,"y_m":0,"vx_mps":0,"vy_mps":0},"obs":[]}"#;
        let text = format!("{good}\n\n{{\"t_s\":1}}\n");
        assert!(matches!(parse_frames(&text), Err(Error::Stream { line: 3, .. })));
        let text = format!("{good}\n{good}\n");
        assert!(matches!(parse_frames(&text), Err(Error::Stream { line: 2, .. })));
    }
}
