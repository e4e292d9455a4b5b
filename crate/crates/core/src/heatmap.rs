//! Relevance maps: where on a helper image the model's latent vectors point.

use ilvr_numerics::{cosine, Tape};
use serde::Serialize;

use crate::error::{IlvrError, Result};
use crate::interleave::{build_supervision_sequence, forward_sequence, LatentInputs, Structure};
use crate::model::{self, Model};
use crate::tasks::Trajectory;
use crate::teacher::{group_mean, CandidatePool};

pub const SMOOTHING_SIGMA: f64 = 1.0;
const KERNEL_RADIUS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub segment: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell weights, non-negative, summing to 1.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = KERNEL_RADIUS as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `0..n`, edge cell repeated (`… b a | a b …`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian blur with mirrored borders; constant maps stay constant.
pub fn smooth(values: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = KERNEL_RADIUS as isize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..rows {
        for x in 0..cols {
            tmp[y * cols + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * values[y * cols + reflect(x as isize + d, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..rows {
        for x in 0..cols {
            out[y * cols + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[reflect(y as isize + d, rows) * cols + x])
                .sum();
        }
    }
    out
}

/// Mean cosine of the latents against each candidate (negatives clipped to
/// zero), spread over each candidate's source cells, smoothed and normalized.
/// An all-zero map becomes uniform.
pub fn relevance_map(
    latents: &[Vec<f64>],
    pool: &CandidatePool,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let cells = rows * cols;
    if latents.is_empty() || cells == 0 {
        return Err(IlvrError::Contract("relevance map needs latents and cells".into()));
    }
    let mut raw = vec![0.0; cells];
    for (c, src) in pool.sources.iter().enumerate() {
        let cand = pool.features.row(c);
        let score = latents
            .iter()
            .map(|z| cosine(z, cand).unwrap_or(0.0))
            .sum::<f64>()
            / latents.len() as f64;
        for cell in src.clone() {
            if cell >= cells {
                return Err(IlvrError::Contract(format!("candidate cell {cell} outside grid")));
            }
            raw[cell] = score.max(0.0);
        }
    }
    Ok(normalize(smooth(&raw, rows, cols, SMOOTHING_SIGMA)))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        let n = v.len() as f64;
        v.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    v
}

/// One map per latent segment of the trajectory. Latents come from running
/// the model with self-fed latent inputs along the trajectory's own text, so
/// every helper image gets a map even when free generation would skip it.
pub fn export_heatmaps(
    model: &Model,
    traj: &Trajectory,
    structure: Structure,
    group_size: usize,
) -> Result<Vec<Heatmap>> {
    let cfg = &model.config;
    let seq = build_supervision_sequence(traj, cfg.latent_k, structure)?;
    if seq.n_latent() == 0 {
        return Err(IlvrError::Data("trajectory has no latent segment".into()));
    }
    let mut tape = Tape::new();
    let bound = model::bind_frozen(&mut tape, &model.params);
    let fwd = forward_sequence(
        cfg,
        &mut tape,
        &bound,
        &model.params,
        &seq,
        LatentInputs::SelfFeedback { detach: true },
    )?;
    let hidden = fwd.hidden_values(&tape)?;
    let mut maps = Vec::new();
    for (m, (seg, pads)) in seq.latent_segments().zip(seq.latent_positions()).enumerate() {
        // the latent fed into slot t is the hidden state at t − 1
        let latents: Vec<Vec<f64>> = pads.iter().map(|&p| hidden.row_vec(p - 1)).collect();
        let source = seg
            .source
            .ok_or_else(|| IlvrError::Data("latent segment has no helper image".into()))?;
        let image = source.resolve(traj)?;
        let pool = group_mean(&model.encode_image(&image)?, group_size)?;
        maps.push(Heatmap {
            segment: m,
            rows: image.rows,
            cols: image.cols,
            values: relevance_map(&latents, &pool, image.rows, image.cols)?,
        });
    }
    Ok(maps)
}
