//! Closed prompt vocabulary: task prefix tokens plus content tokens for the
//! f0 bucket, tempo bucket and motif of a sample.
//!
//! Layout, for `K` tracks:
//!
//! ```text
//! 0                      null prompt
//! 1 .. 2^K               task prefix; the id equals the target-set bitmask
//! 2^K ..                 f0 buckets, then tempo buckets, then motifs
//! ```

use serde::{Deserialize, Serialize};

use crate::diffusion::{NonTargetMode, TaskSpec, TrackSet};
use crate::error::{Error, Result};

pub const NULL_TOKEN: u32 = 0;

/// Task prefix followed by content tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    pub prefix: u32,
    pub content: Vec<u32>,
}

impl PromptTokens {
    pub fn new(prefix: u32, content: Vec<u32>) -> Self {
        Self { prefix, content }
    }

    pub fn for_task(targets: TrackSet, content: &[u32]) -> Self {
        Self::new(task_token(targets), content.to_vec())
    }

    /// Same task prefix with the content replaced by the null token.
    pub fn to_null(&self) -> Self {
        Self::new(self.prefix, vec![NULL_TOKEN])
    }

    pub fn with_prefix(&self, prefix: u32) -> Self {
        Self::new(prefix, self.content.clone())
    }

    pub fn ids(&self) -> Vec<u32> {
        std::iter::once(self.prefix).chain(self.content.iter().copied()).collect()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(bad) = self.ids().into_iter().find(|&id| id as usize >= vocab_size) {
            return Err(Error::InvalidPrompt(format!(
                "token {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

pub fn task_token(targets: TrackSet) -> u32 {
    targets.mask()
}

/// Offsets of the content-token groups for a given dataset configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    pub tracks: usize,
    pub f0_buckets: usize,
    pub tempo_buckets: usize,
    pub motifs: usize,
}

impl PromptVocab {
    pub fn f0_offset(&self) -> u32 {
        1 << self.tracks
    }

    pub fn tempo_offset(&self) -> u32 {
        self.f0_offset() + self.f0_buckets as u32
    }

    pub fn motif_offset(&self) -> u32 {
        self.tempo_offset() + self.tempo_buckets as u32
    }

    pub fn size(&self) -> usize {
        (self.motif_offset() as usize) + self.motifs
    }

    pub fn content(&self, f0_bucket: usize, tempo_bucket: usize, motif: usize) -> Vec<u32> {
        vec![
            self.f0_offset() + f0_bucket as u32,
            self.tempo_offset() + tempo_bucket as u32,
            self.motif_offset() + motif as u32,
        ]
    }

    /// Recovers `(f0 bucket, tempo bucket, motif)` from content tokens.
    pub fn decode(&self, content: &[u32]) -> Option<(usize, usize, usize)> {
        let (mut f0, mut tempo, mut motif) = (None, None, None);
        for &id in content {
            if id >= self.f0_offset() && id < self.tempo_offset() {
                f0 = Some((id - self.f0_offset()) as usize);
            } else if id >= self.tempo_offset() && id < self.motif_offset() {
                tempo = Some((id - self.tempo_offset()) as usize);
            } else if id >= self.motif_offset() && (id as usize) < self.size() {
                motif = Some((id - self.motif_offset()) as usize);
            }
        }
        Some((f0?, tempo?, motif?))
    }
}

const FOUR_TRACK_NAMES: [&str; 4] = ["bass", "drums", "instrument", "melody"];

pub fn track_name(k: usize, i: usize) -> String {
    if k == 4 {
        FOUR_TRACK_NAMES[i].to_string()
    } else {
        format!("track{i}")
    }
}

pub fn track_index(k: usize, name: &str) -> Option<usize> {
    let name = name.trim().to_ascii_lowercase();
    let name = match name.as_str() {
        "drum" => "drums",
        "instr" => "instrument",
        other => other,
    };
    (0..k).find(|&i| track_name(k, i) == name).or_else(|| name.parse().ok().filter(|&i| i < k))
}

/// Human-readable form of a task prefix, e.g. `[bass & drums generation]`.
pub fn task_label(k: usize, targets: TrackSet) -> String {
    let names: Vec<String> = targets.iter().map(|i| track_name(k, i)).collect();
    format!("[{} generation]", names.join(" & "))
}

fn parse_track_list(k: usize, list: &str) -> Result<TrackSet> {
    let mut set = TrackSet::empty();
    for part in list.split([',', '&', '+']) {
        if part.trim().is_empty() {
            continue;
        }
        let i = track_index(k, part).ok_or_else(|| Error::InvalidTask(format!("unknown track `{}`", part.trim())))?;
        set.insert(i);
    }
    Ok(set)
}

/// Parses task strings such as `bass&drums` or `bass,drums | given melody,instrument`.
///
/// Tracks named after `given` are conditional; every other non-target is marginal.
pub fn parse_task(k: usize, spec: &str) -> Result<TaskSpec> {
    let (targets, given) = match spec.split_once('|') {
        Some((t, g)) => {
            let g = g.trim();
            let g = g.strip_prefix("given").unwrap_or(g);
            (t, Some(g))
        }
        None => (spec, None),
    };
    let targets = parse_track_list(k, targets)?;
    let conditional = match given {
        Some(g) => parse_track_list(k, g)?,
        None => TrackSet::empty(),
    };
    TaskSpec::new(k, targets, conditional)
}

/// Inverse of [`parse_task`].
pub fn format_task(task: &TaskSpec) -> String {
    let k = task.tracks();
    let join = |s: TrackSet| s.iter().map(|i| track_name(k, i)).collect::<Vec<_>>().join(",");
    let cond = task.conditional();
    if cond.is_empty() {
        join(task.targets())
    } else {
        format!("{} | given {}", join(task.targets()), join(cond))
    }
}

pub fn mode_name(mode: NonTargetMode) -> &'static str {
    match mode {
        NonTargetMode::Conditional => "conditional",
        NonTargetMode::Marginal => "marginal",
    }
}
