use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Random start per segment.
    Train,
    /// Start in the middle of each segment.
    Test,
}

/// Segment-based frame sampling: `segments` near-equal segments, each
/// contributing `frames_per_segment` consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplingPlan {
    pub segments: usize,
    pub frames_per_segment: usize,
    pub mode: SampleMode,
}

impl SamplingPlan {
    pub fn new(segments: usize, frames_per_segment: usize, mode: SampleMode) -> Result<Self> {
        if segments == 0 || frames_per_segment == 0 {
            return Err(Error::config(format!(
                "sampling plan needs segments >= 1 and frames_per_segment >= 1, got {segments} and {frames_per_segment}"
            )));
        }
        Ok(Self {
            segments,
            frames_per_segment,
            mode,
        })
    }

    /// Frames per sampled clip.
    pub fn frames(&self) -> usize {
        self.segments * self.frames_per_segment
    }

    pub fn with_mode(self, mode: SampleMode) -> Self {
        Self { mode, ..self }
    }
}

/// `(start, len)` of every segment. The first `clip_length % segments`
/// segments are one frame longer.
pub fn segment_bounds(clip_length: usize, segments: usize) -> Vec<(usize, usize)> {
    let base = clip_length / segments;
    let extra = clip_length % segments;
    let mut start = 0;
    (0..segments)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}

/// Indices of the frames to feed the model, `plan.frames()` of them.
///
/// A segment shorter than `frames_per_segment` repeats its last frame; an
/// empty segment (clip shorter than the segment count) reuses the frame just
/// before it.
pub fn sample_frames<R: Rng + ?Sized>(clip_length: usize, plan: &SamplingPlan, rng: &mut R) -> Result<Vec<usize>> {
    if clip_length == 0 {
        return Err(Error::input("cannot sample frames from an empty clip"));
    }
    let t = plan.frames_per_segment;
    let mut out = Vec::with_capacity(plan.frames());
    for (start, len) in segment_bounds(clip_length, plan.segments) {
        if len == 0 {
            let fallback = start.saturating_sub(1).min(clip_length - 1);
            out.extend(std::iter::repeat_n(fallback, t));
            continue;
        }
        let first = if len < t {
            start
        } else {
            match plan.mode {
                SampleMode::Test => start + (len - t) / 2,
                SampleMode::Train => start + rng.random_range(0..=len - t),
            }
        };
        let last = start + len - 1;
        out.extend((0..t).map(|j| (first + j).min(last)));
    }
    Ok(out)
}
