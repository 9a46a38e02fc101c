//! Synthetic clip-classification tasks and their on-disk form.
//!
//! Every clip is drawn from its own ChaCha stream keyed by (seed, split,
//! index), so train and test draws never overlap and any single clip can be
//! regenerated in isolation.

use std::f32::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial period, in pixels, of every grating the generators draw.
pub const GRATING_PERIOD: f32 = 8.0;

/// Per-class drift `(dx, dy)` in pixels per frame for the motion task.
pub const MOTION_DIRECTIONS: [(i32, i32); 8] = [(1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1), (0, 1), (0, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// A drifting plaid; the class is the drift direction. Every single
    /// frame is a plaid at a uniformly random phase, whatever the class.
    MotionDirection,
    /// A bright square flashes during the `c`-th of `C` equal parts of the clip.
    ApexFrame,
    /// A still grating whose orientation is `pi * c / C`.
    StaticPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub classes: usize,
    /// Frames per clip before sampling.
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config(format!("clip geometry must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::config("a task needs at least 2 classes"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise level must be >= 0, got {}", self.noise)));
        }
        match self.task {
            Task::MotionDirection if self.classes > MOTION_DIRECTIONS.len() => Err(Error::config(format!(
                "motion task supports at most {} classes",
                MOTION_DIRECTIONS.len()
            ))),
            Task::ApexFrame if self.clip_length < self.classes => Err(Error::config(format!(
                "apex task needs at least one frame per class, got {} frames for {} classes",
                self.clip_length, self.classes
            ))),
            _ => Ok(()),
        }
    }
}

/// A clip `[L, H, W, C]` and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub frames: Tensor<f32>,
    pub label: usize,
}

impl LabeledClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame geometry `(H, W, C)`.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let per = self.frames.numel() / self.len();
        &self.frames.data()[t * per..(t + 1) * per]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub clips: Vec<LabeledClip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Train and test sets. Labels cycle through the classes so both splits are
/// balanced whenever their size is a multiple of the class count.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let make = |split, n| Dataset {
        classes: spec.classes,
        clips: crate::exec::map_indexed(n, |i| gen_clip(spec, split, i, i % spec.classes)),
    };
    Ok((make(Split::Train, spec.train_size), make(Split::Test, spec.test_size)))
}

/// Clip `index` of `split` with class `label`.
pub fn gen_clip(spec: &SyntheticSpec, split: Split, index: usize, label: usize) -> LabeledClip {
    let mut rng = clip_rng(spec.seed, split, index);
    let (l, h, w, c) = (spec.clip_length, spec.height, spec.width, spec.channels);
    let mut data = vec![0f32; l * h * w * c];
    match spec.task {
        Task::MotionDirection => {
            let px = rng.random_range(0.0..GRATING_PERIOD);
            let py = rng.random_range(0.0..GRATING_PERIOD);
            draw_plaid(&mut data, (l, h, w, c), MOTION_DIRECTIONS[label], (px, py));
        }
        Task::StaticPattern => {
            let theta = PI * label as f32 / spec.classes as f32;
            let (ct, st) = (theta.cos(), theta.sin());
            let phase = rng.random_range(0.0..GRATING_PERIOD);
            for t in 0..l {
                fill(&mut data, t, h, w, c, |y, x| 0.5 + 0.5 * wave(x as f32 * ct + y as f32 * st - phase));
            }
        }
        Task::ApexFrame => {
            let (start, len) = part_bounds(l, spec.classes, label);
            let flash = (len / 2).max(1);
            let first = start + rng.random_range(0..=len - flash);
            let side = (h.min(w) / 4).max(1);
            let y0 = rng.random_range(0..=h - side);
            let x0 = rng.random_range(0..=w - side);
            for t in first..first + flash {
                fill(&mut data, t, h, w, c, |y, x| {
                    if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise as f32).expect("finite noise level");
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    LabeledClip {
        frames: Tensor::from_vec(vec![l, h, w, c], data).expect("sized by construction"),
        label,
    }
}

/// `(start, len)` of the `part`-th of `parts` near-equal pieces of a clip.
pub fn part_bounds(length: usize, parts: usize, part: usize) -> (usize, usize) {
    crate::embed::segment_bounds(length, parts)[part]
}

/// Plaid whose phase starts at `(px, py)` and moves `(dx, dy)` per frame.
fn draw_plaid(data: &mut [f32], (l, h, w, c): (usize, usize, usize, usize), (dx, dy): (i32, i32), (px, py): (f32, f32)) {
    for t in 0..l {
        let ox = px + (dx * t as i32) as f32;
        let oy = py + (dy * t as i32) as f32;
        fill(data, t, h, w, c, |y, x| 0.5 + 0.25 * (wave(x as f32 - ox) + wave(y as f32 - oy)));
    }
}

fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 62,
    };
    rng.set_stream(tag | index as u64);
    rng
}

fn wave(u: f32) -> f32 {
    (2.0 * PI * u / GRATING_PERIOD).cos()
}

fn fill(data: &mut [f32], t: usize, h: usize, w: usize, c: usize, f: impl Fn(usize, usize) -> f32) {
    let frame = &mut data[t * h * w * c..(t + 1) * h * w * c];
    for y in 0..h {
        for x in 0..w {
            let v = f(y, x);
            frame[(y * w + x) * c..(y * w + x + 1) * c].fill(v);
        }
    }
}

/// `b"STTD"` read as a little-endian `u32`.
pub const DATASET_MAGIC: u32 = u32::from_le_bytes(*b"STTD");
pub const DATASET_VERSION: u32 = 1;

/// Layout, all little-endian: `u32` magic, version, clip count, classes,
/// then per clip `u32` label, `u32` L, H, W, C and `L*H*W*C` `f32` values.
pub fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    for word in [DATASET_MAGIC, DATASET_VERSION, data.len() as u32, data.classes as u32] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for clip in &data.clips {
        buf.extend_from_slice(&(clip.label as u32).to_le_bytes());
        for &e in clip.frames.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in clip.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<dataset stream>", e))
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<dataset stream>", e))?;
    let mut cur = Cursor(&bytes);
    if cur.word()? != DATASET_MAGIC as usize {
        return Err(Error::input("dataset file has wrong magic"));
    }
    let version = cur.word()?;
    if version != DATASET_VERSION as usize {
        return Err(Error::input(format!("unsupported dataset version {version}")));
    }
    let count = cur.word()?;
    let classes = cur.word()?;
    let mut clips = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = cur.word()?;
        if label >= classes {
            return Err(Error::input(format!("label {label} out of range for {classes} classes")));
        }
        let shape = vec![cur.word()?, cur.word()?, cur.word()?, cur.word()?];
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::input("clip shape overflows"))?;
        let data = cur
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        clips.push(LabeledClip {
            frames: Tensor::from_vec(shape, data)?,
            label,
        });
    }
    if !cur.0.is_empty() {
        return Err(Error::input("dataset file has trailing bytes"));
    }
    Ok(Dataset { classes, clips })
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::input("dataset file is truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn word(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(f);
    write_dataset(&mut out, data)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    fn spec(task: Task, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            task,
            classes: 2,
            clip_length: 16,
            height: 16,
            width: 16,
            channels: 1,
            noise,
            train_size: 8,
            test_size: 4,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_same_data() {
        for task in [Task::MotionDirection, Task::ApexFrame, Task::StaticPattern] {
            let s = spec(task, 0.0);
            assert_eq!(gen_synthetic(&s).unwrap(), gen_synthetic(&s).unwrap());
            let noisy = spec(task, 0.1);
            assert_eq!(gen_synthetic(&noisy).unwrap(), gen_synthetic(&noisy).unwrap());
        }
    }

    #[test]
    fn splits_are_balanced_and_disjoint() {
        let (train, test) = gen_synthetic(&spec(Task::MotionDirection, 0.0)).unwrap();
        assert_eq!(train.labels(), vec![0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(test.len(), 4);
        for a in &train.clips {
            assert!(test.clips.iter().all(|b| a.frames != b.frames));
        }
    }

    #[test]
    fn reversed_class_zero_clip_is_a_class_one_clip() {
        let s = spec(Task::MotionDirection, 0.0);
        let l = s.clip_length;
        for index in 0..6 {
            let clip = gen_clip(&s, Split::Train, index, 0);
            let per = clip.frames.numel() / l;
            let mut reversed = Vec::with_capacity(clip.frames.numel());
            for t in (0..l).rev() {
                reversed.extend_from_slice(clip.frame(t));
            }
            let mut rng = clip_rng(s.seed, Split::Train, index);
            let px: f32 = rng.random_range(0.0..GRATING_PERIOD);
            let py: f32 = rng.random_range(0.0..GRATING_PERIOD);
            // last frame of the original is the first of a leftward drift
            let mut expect = vec![0f32; l * per];
            draw_plaid(&mut expect, (l, 16, 16, 1), MOTION_DIRECTIONS[1], (px + (l - 1) as f32, py));
            let diff = reversed.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(diff < 1e-5, "{diff}");
        }
    }

    /// Horizontal phase of a noiseless plaid frame in `[0, 1)` periods.
    fn horizontal_phase(frame: &[f32], w: usize) -> f64 {
        let (mut re, mut im) = (0f64, 0f64);
        for (i, &v) in frame.iter().enumerate() {
            let x = (i % w) as f64;
            let a = std::f64::consts::TAU * x / f64::from(GRATING_PERIOD);
            re += f64::from(v) * a.cos();
            im += f64::from(v) * a.sin();
        }
        im.atan2(re).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU
    }

    #[test]
    fn per_frame_phase_histograms_match_between_classes() {
        const BINS: usize = 8;
        let s = SyntheticSpec {
            clip_length: 8,
            height: 8,
            width: 8,
            train_size: 10_000,
            test_size: 0,
            ..spec(Task::MotionDirection, 0.0)
        };
        let (train, _) = gen_synthetic(&s).unwrap();
        let mut counts = vec![[[0f64; BINS]; 2]; s.clip_length];
        for clip in &train.clips {
            for (t, hist) in counts.iter_mut().enumerate() {
                let bin = (horizontal_phase(clip.frame(t), s.width) * BINS as f64) as usize % BINS;
                hist[clip.label][bin] += 1.0;
            }
        }
        // two-sample chi-square per frame index, pooled over frames
        let mut stat = 0.0;
        for hist in &counts {
            let n: Vec<f64> = hist.iter().map(|h| h.iter().sum()).collect();
            let total = n[0] + n[1];
            for b in 0..BINS {
                let col = hist[0][b] + hist[1][b];
                for k in 0..2 {
                    let e = n[k] * col / total;
                    stat += (hist[k][b] - e).powi(2) / e;
                }
            }
        }
        let df = (s.clip_length * (BINS - 1)) as f64;
        let p = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 = {stat} on {df} dof, p = {p}");
    }

    #[test]
    fn apex_flash_lies_in_the_labelled_part() {
        let s = SyntheticSpec {
            classes: 3,
            clip_length: 12,
            ..spec(Task::ApexFrame, 0.0)
        };
        for label in 0..3 {
            let clip = gen_clip(&s, Split::Test, label, label);
            let (start, len) = part_bounds(12, 3, label);
            for t in 0..12 {
                let lit = clip.frame(t).iter().any(|&v| v > 0.5);
                assert_eq!(lit && !(start..start + len).contains(&t), false);
            }
            assert!((start..start + len).any(|t| clip.frame(t).iter().any(|&v| v > 0.5)));
        }
    }

    #[test]
    fn static_frames_do_not_change() {
        let clip = gen_clip(&spec(Task::StaticPattern, 0.0), Split::Train, 3, 1);
        for t in 1..clip.len() {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
    }

    #[test]
    fn invalid_specs_are_configuration_errors() {
        let bad = [
            SyntheticSpec { height: 0, ..spec(Task::StaticPattern, 0.0) },
            SyntheticSpec { classes: 1, ..spec(Task::StaticPattern, 0.0) },
            SyntheticSpec { classes: 9, ..spec(Task::MotionDirection, 0.0) },
            SyntheticSpec { clip_length: 2, classes: 3, ..spec(Task::ApexFrame, 0.0) },
            SyntheticSpec { noise: -1.0, ..spec(Task::StaticPattern, 0.0) },
        ];
        for s in bad {
            assert!(matches!(gen_synthetic(&s), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn dataset_file_round_trip_and_corruption() {
        let (train, _) = gen_synthetic(&spec(Task::MotionDirection, 0.1)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &train).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), train);
        assert!(read_dataset(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(&mut extra.as_slice()).is_err());
        let mut magic = buf.clone();
        magic[0] ^= 1;
        assert!(read_dataset(&mut magic.as_slice()).is_err());
    }
}
