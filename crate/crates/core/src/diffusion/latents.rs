use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::rng::fill_gaussian;

/// Track count, latent channels per track and frame count (`K`, `D`, `S′`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub tracks: usize,
    pub channels: usize,
    pub frames: usize,
}

impl LatentShape {
    pub fn new(tracks: usize, channels: usize, frames: usize) -> Self {
        Self {
            tracks,
            channels,
            frames,
        }
    }

    pub fn track_len(&self) -> usize {
        self.channels * self.frames
    }

    pub fn len(&self) -> usize {
        self.tracks * self.track_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.tracks, self.channels, self.frames)
    }
}

/// The `K × D × S′` latent block, stored track-major so that the
/// channel-concatenated `(K·D) × S′` view is the same buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLatents {
    shape: LatentShape,
    data: Vec<f64>,
}

impl TrackLatents {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_mismatch(
                format!("{} values ({shape})", shape.len()),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn gaussian<R: Rng + ?Sized>(shape: LatentShape, rng: &mut R) -> Self {
        let mut out = Self::zeros(shape);
        fill_gaussian(rng, &mut out.data);
        out
    }

    /// Builds a block from per-track latents, each `D × S′`.
    pub fn from_tracks(shape: LatentShape, tracks: &[Vec<f64>]) -> Result<Self> {
        if tracks.len() != shape.tracks {
            return Err(shape_mismatch(
                format!("{} tracks", shape.tracks),
                format!("{} tracks", tracks.len()),
            ));
        }
        let mut out = Self::zeros(shape);
        for (i, t) in tracks.iter().enumerate() {
            out.set_track(i, t)?;
        }
        Ok(out)
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of the channel-concatenated view, plus its buffer.
    pub fn channel_view(&self) -> (usize, usize, &[f64]) {
        (
            self.shape.tracks * self.shape.channels,
            self.shape.frames,
            &self.data,
        )
    }

    pub fn track(&self, i: usize) -> &[f64] {
        let n = self.shape.track_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn track_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.shape.track_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn set_track(&mut self, i: usize, values: &[f64]) -> Result<()> {
        if i >= self.shape.tracks {
            return Err(Error::InvalidInput(format!(
                "track {i} out of range for {} tracks",
                self.shape.tracks
            )));
        }
        if values.len() != self.shape.track_len() {
            return Err(shape_mismatch(
                format!("{} values per track", self.shape.track_len()),
                format!("{}", values.len()),
            ));
        }
        self.track_mut(i).copy_from_slice(values);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, shape: LatentShape) -> Result<()> {
        if self.shape != shape {
            return Err(shape_mismatch(shape, self.shape));
        }
        Ok(())
    }
}

/// A set of track indices, stored as a bitmask (`bit i` = track `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TrackSet(u32);

impl TrackSet {
    pub const MAX_TRACKS: usize = 16;

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn all(k: usize) -> Self {
        Self(((1u64 << k) - 1) as u32)
    }

    pub fn from_mask(mask: u32) -> Self {
        Self(mask)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        Self(indices.into_iter().fold(0, |m, i| m | (1 << i)))
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 32 && self.0 & (1 << i) != 0
    }

    pub fn insert(&mut self, i: usize) {
        self.0 |= 1 << i;
    }

    pub fn remove(&mut self, i: usize) {
        self.0 &= !(1 << i);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        Self(self.0 & other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.0 & (1 << i) != 0)
    }

    /// All nonempty subsets of `k` tracks in mask order (`1..2^k`).
    pub fn nonempty_subsets(k: usize) -> impl Iterator<Item = TrackSet> {
        (1u32..(1u32 << k)).map(TrackSet)
    }
}

/// How a non-target track is presented to the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NonTargetMode {
    /// Clean latent at timestep `0`.
    Conditional,
    /// Pure noise at timestep `T`.
    Marginal,
}

/// Which tracks are generated and how the rest are presented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    tracks: usize,
    targets: TrackSet,
    conditional: TrackSet,
}

impl TaskSpec {
    pub fn new(tracks: usize, targets: TrackSet, conditional: TrackSet) -> Result<Self> {
        if tracks == 0 || tracks > TrackSet::MAX_TRACKS {
            return Err(Error::InvalidTask(format!("unsupported track count {tracks}")));
        }
        let all = TrackSet::all(tracks);
        if targets.is_empty() {
            return Err(Error::InvalidTask("target set is empty".into()));
        }
        if !targets.is_subset(all) || !conditional.is_subset(all) {
            return Err(Error::InvalidTask(format!(
                "track index out of range for {tracks} tracks"
            )));
        }
        if !targets.intersection(conditional).is_empty() {
            return Err(Error::InvalidTask(
                "a track cannot be both target and conditional".into(),
            ));
        }
        Ok(Self {
            tracks,
            targets,
            conditional,
        })
    }

    /// Targets plus one mode shared by every non-target track.
    pub fn uniform(tracks: usize, targets: TrackSet, mode: NonTargetMode) -> Result<Self> {
        let rest = TrackSet::all(tracks).difference(targets);
        match mode {
            NonTargetMode::Conditional => Self::new(tracks, targets, rest),
            NonTargetMode::Marginal => Self::new(tracks, targets, TrackSet::empty()),
        }
    }

    pub fn joint(tracks: usize) -> Self {
        Self {
            tracks,
            targets: TrackSet::all(tracks),
            conditional: TrackSet::empty(),
        }
    }

    pub fn tracks(&self) -> usize {
        self.tracks
    }

    pub fn targets(&self) -> TrackSet {
        self.targets
    }

    pub fn conditional(&self) -> TrackSet {
        self.conditional
    }

    pub fn marginal(&self) -> TrackSet {
        TrackSet::all(self.tracks)
            .difference(self.targets)
            .difference(self.conditional)
    }

    pub fn is_joint(&self) -> bool {
        self.targets.len() == self.tracks
    }

    pub fn mode(&self, track: usize) -> Option<NonTargetMode> {
        if self.targets.contains(track) {
            None
        } else if self.conditional.contains(track) {
            Some(NonTargetMode::Conditional)
        } else {
            Some(NonTargetMode::Marginal)
        }
    }
}

/// Per-track diffusion timesteps `[t_1, …, t_K]`, each in `0..=T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimestepVector(pub(crate) Vec<usize>);

impl TimestepVector {
    pub fn new(steps: Vec<usize>, num_steps: usize) -> Result<Self> {
        let v = Self(steps);
        v.validate(num_steps)?;
        Ok(v)
    }

    /// Targets at the shared step `t`; conditional tracks at `0`; marginal at `T`.
    pub fn for_task(task: &TaskSpec, t: usize, num_steps: usize) -> Result<Self> {
        if t > num_steps {
            return Err(Error::TimestepOutOfRange { t, max: num_steps });
        }
        let steps = (0..task.tracks())
            .map(|i| match task.mode(i) {
                None => t,
                Some(NonTargetMode::Conditional) => 0,
                Some(NonTargetMode::Marginal) => num_steps,
            })
            .collect();
        Ok(Self(steps))
    }

    /// Entries must lie in `0..=T`, and every entry strictly between the two
    /// ends must share one value (the jointly denoised targets).
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        let mut shared = None;
        for &t in &self.0 {
            if t > num_steps {
                return Err(Error::InvalidTimesteps(format!(
                    "entry {t} exceeds T = {num_steps}"
                )));
            }
            if t != 0 && t != num_steps {
                match shared {
                    None => shared = Some(t),
                    Some(s) if s != t => {
                        return Err(Error::InvalidTimesteps(format!(
                            "intermediate entries differ ({s} vs {t})"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_view_is_the_same_buffer() {
        let shape = LatentShape::new(2, 3, 4);
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let z = TrackLatents::from_vec(shape, data.clone()).unwrap();
        let (rows, cols, view) = z.channel_view();
        assert_eq!((rows, cols), (6, 4));
        assert_eq!(view, data.as_slice());
        // row 4 = track 1, channel 1
        assert_eq!(view[4 * 4..5 * 4], z.track(1)[4..8]);
    }

    #[test]
    fn task_partitions_tracks() {
        let task = TaskSpec::new(4, TrackSet::from_indices([0, 1]), TrackSet::from_indices([3])).unwrap();
        assert_eq!(task.marginal(), TrackSet::from_indices([2]));
        assert_eq!(task.mode(0), None);
        assert_eq!(task.mode(2), Some(NonTargetMode::Marginal));
        assert_eq!(task.mode(3), Some(NonTargetMode::Conditional));
        assert!(TaskSpec::new(4, TrackSet::empty(), TrackSet::empty()).is_err());
        assert!(TaskSpec::new(4, TrackSet::from_indices([0]), TrackSet::from_indices([0])).is_err());
        assert!(TaskSpec::new(4, TrackSet::from_indices([5]), TrackSet::empty()).is_err());
    }

    #[test]
    fn timestep_vector_rules() {
        let task = TaskSpec::new(4, TrackSet::from_indices([2]), TrackSet::from_indices([1])).unwrap();
        let tv = TimestepVector::for_task(&task, 37, 100).unwrap();
        assert_eq!(tv.steps(), &[100, 0, 37, 100]);
        assert!(TimestepVector::new(vec![5, 6, 0, 100], 100).is_err());
        assert!(TimestepVector::new(vec![101, 0], 100).is_err());
        assert!(TimestepVector::new(vec![5, 5, 0, 100], 100).is_ok());
    }

    #[test]
    fn subsets_enumerate_in_mask_order() {
        let subsets: Vec<u32> = TrackSet::nonempty_subsets(4).map(|s| s.mask()).collect();
        assert_eq!(subsets.len(), 15);
        assert_eq!(subsets[0], 1);
        assert_eq!(subsets[14], 15);
    }
}
