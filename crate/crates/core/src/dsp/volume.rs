use crate::error::{Error, Result};

use super::AudioClip;

/// Lower bound on pooled power before taking the log (-120 dB).
pub const POWER_FLOOR: f64 = 1e-12;

/// Mean power of each non-overlapping 1 s segment, averaged over channels.
/// A trailing partial segment is dropped.
pub fn segment_powers(clip: &AudioClip) -> Result<Vec<f64>> {
    let seg = clip.sample_rate() as usize;
    let n_seg = clip.frames() / seg;
    if n_seg == 0 {
        return Err(Error::Length(format!(
            "{} frames is less than one second at {} Hz",
            clip.frames(),
            clip.sample_rate()
        )));
    }
    let channels = clip.channels();
    Ok((0..n_seg)
        .map(|s| {
            let energy: f64 = (0..channels)
                .map(|c| clip.channel(c)[s * seg..(s + 1) * seg].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                .sum();
            energy / (seg * channels) as f64
        })
        .collect())
}

/// Loudness in dB of each 1 s segment: `10·log10(mean(z²))`, floored at
/// [`POWER_FLOOR`].
pub fn volume_db(clip: &AudioClip) -> Result<Vec<f64>> {
    Ok(segment_powers(clip)?.into_iter().map(|p| 10.0 * p.max(POWER_FLOOR).log10()).collect())
}
