//! Calibration data: a synthetic spatio-temporal video generator, capture of
//! (input, reference output) pairs along the refinement trajectory, and the
//! STQC calibration file.

use crate::backbone::{ToyBackbone, IO_CHANNELS};
use crate::container::{write_container, ContainerReader};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"STQC";

/// Controls for one synthetic clip: how fast the pattern translates between
/// frames and how much noise rides on top.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VideoParams {
    pub speed: f64,
    pub noise_amp: f64,
}

/// Translating sinusoid plus uniform noise, [t, 4, h, w].
pub fn synth_video(seed: u64, t: usize, h: usize, w: usize, p: VideoParams) -> Tensor {
    let mut rng = RngState::new(seed).derive(0x7669_6465); // video stream
    let mut data = Vec::with_capacity(t * IO_CHANNELS * h * w);
    // random spatial frequencies and phases per channel
    let mut freqs = Vec::new();
    for _ in 0..IO_CHANNELS {
        freqs.push((
            rng.uniform(0.5, 2.0),
            rng.uniform(0.5, 2.0),
            rng.uniform(0.0, std::f64::consts::TAU),
        ));
    }
    for ti in 0..t {
        for (fx, fy, phase) in &freqs {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 / w as f64;
                    let v = y as f64 / h as f64;
                    let arg = std::f64::consts::TAU * (fx * u + fy * v) + phase
                        + p.speed * ti as f64;
                    data.push(arg.sin() + rng.uniform(-p.noise_amp, p.noise_amp));
                }
            }
        }
    }
    Tensor::new(vec![t, IO_CHANNELS, h, w], data).unwrap()
}

/// One calibration record: a backbone input along the refinement trajectory
/// and the full-precision backbone output on it.
#[derive(Debug, Clone)]
pub struct CalibPair {
    pub input: Tensor,
    pub fp_output: Tensor,
    /// Refinement step (1-based) at which the pair was recorded.
    pub step_index: usize,
}

/// How the calibration set was captured; stored in the STQC header so a
/// reloaded set is self-describing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalibSchedule {
    pub seed: u64,
    pub n_videos: usize,
    pub steps: usize,
    pub sample_every: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl CalibSchedule {
    pub fn pairs_per_video(&self) -> usize {
        self.steps / self.sample_every
    }
}

#[derive(Debug, Clone)]
pub struct CalibSet {
    pub schedule: CalibSchedule,
    pub pairs: Vec<CalibPair>,
}

/// Generate synthetic clips and record (input, fp_output) pairs of the
/// full-precision backbone at every `sample_every`-th refinement step.
///
/// Clip parameters are drawn bimodally (slow/clean vs fast/noisy) so the
/// captured set spans both low and high spatio-temporal complexity.
pub fn capture_calib(backbone: &ToyBackbone, schedule: &CalibSchedule) -> Result<CalibSet> {
    if schedule.sample_every == 0 || schedule.steps == 0 {
        return Err(Error::arg("steps and sample_every must be positive"));
    }
    if schedule.n_videos == 0 {
        return Err(Error::arg("calibration capture needs at least one video"));
    }
    let mut pairs = Vec::new();
    let mut rng = RngState::new(schedule.seed).derive(0x6361_6c69); // calib stream
    let inv = 1.0 / schedule.steps as f64;
    for vi in 0..schedule.n_videos {
        let params = VideoParams {
            speed: if rng.sign() > 0.0 { 1.5 } else { 0.1 },
            noise_amp: if rng.sign() > 0.0 { 0.4 } else { 0.02 },
        };
        let video_seed = RngState::new(schedule.seed).derive(1000 + vi as u64).seed();
        let mut x = synth_video(
            video_seed,
            schedule.frames,
            schedule.height,
            schedule.width,
            params,
        );
        for k in 0..schedule.steps {
            let f = backbone.forward(&x)?;
            if (k + 1) % schedule.sample_every == 0 {
                pairs.push(CalibPair {
                    input: x.clone(),
                    fp_output: f.clone(),
                    step_index: k + 1,
                });
            }
            x = x.zip(&f, |a, b| a - b * inv)?;
        }
    }
    Ok(CalibSet {
        schedule: schedule.clone(),
        pairs,
    })
}

#[derive(Serialize, Deserialize)]
struct CalibHeader {
    kind: String,
    dtype: String,
    count: usize,
    shape: Vec<usize>,
    step_indices: Vec<usize>,
    schedule: CalibSchedule,
}

pub fn save_calib(path: &Path, set: &CalibSet) -> Result<()> {
    let shape = match set.pairs.first() {
        Some(p) => p.input.shape().to_vec(),
        None => return Err(Error::arg("refusing to save an empty calibration set")),
    };
    let mut payload = Vec::new();
    for p in &set.pairs {
        if p.input.shape() != shape.as_slice() || p.fp_output.shape() != shape.as_slice() {
            return Err(Error::dim("all calibration pairs must share one shape"));
        }
        payload.extend_from_slice(p.input.data());
        payload.extend_from_slice(p.fp_output.data());
    }
    let header = serde_json::to_value(CalibHeader {
        kind: "calibration".into(),
        dtype: "f64".into(),
        count: set.pairs.len(),
        shape,
        step_indices: set.pairs.iter().map(|p| p.step_index).collect(),
        schedule: set.schedule.clone(),
    })
    .map_err(Error::format)?;
    write_container(path, MAGIC, &header, &payload)
}

pub fn load_calib(path: &Path) -> Result<CalibSet> {
    let reader = ContainerReader::open(path, MAGIC)?;
    let header: CalibHeader =
        serde_json::from_value(reader.header().clone()).map_err(Error::format)?;
    if header.dtype != "f64" {
        return Err(Error::format(format!("unsupported dtype {}", header.dtype)));
    }
    let elems: usize = header.shape.iter().product();
    if elems == 0 || header.count == 0 {
        return Err(Error::format("calibration header declares an empty set"));
    }
    if header.step_indices.len() != header.count {
        return Err(Error::format("step index list does not match pair count"));
    }
    let payload = reader.payload(header.count * 2 * elems)?;
    let mut pairs = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let base = i * 2 * elems;
        pairs.push(CalibPair {
            input: Tensor::new(header.shape.clone(), payload[base..base + elems].to_vec())?,
            fp_output: Tensor::new(
                header.shape.clone(),
                payload[base + elems..base + 2 * elems].to_vec(),
            )?,
            step_index: header.step_indices[i],
        });
    }
    Ok(CalibSet {
        schedule: header.schedule,
        pairs,
    })
}
