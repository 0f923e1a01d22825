use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BBox, Frame, LesionClass, VideoSample};
use crate::error::{Error, Result};

/// Frame-order permutation `π` of a video. The shuffled video is
/// `shuffled[j] = frames[π[j]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    permutation: Vec<usize>,
    seed: Option<u64>,
}

impl ShufflePlan {
    pub fn identity(frames: usize) -> Self {
        ShufflePlan { permutation: (0..frames).collect(), seed: None }
    }

    /// Uniformly random permutation drawn from `seed`.
    pub fn random(frames: usize, seed: u64) -> Self {
        let mut permutation: Vec<usize> = (0..frames).collect();
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ShufflePlan { permutation, seed: Some(seed) }
    }

    pub fn from_permutation(permutation: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Dataset(format!("{permutation:?} is not a permutation")));
            }
        }
        Ok(ShufflePlan { permutation, seed: None })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn inverse(&self) -> ShufflePlan {
        let mut inv = vec![0; self.permutation.len()];
        for (j, &p) in self.permutation.iter().enumerate() {
            inv[p] = j;
        }
        ShufflePlan { permutation: inv, seed: None }
    }

    /// Reorder a sequence: `out[j] = items[π[j]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.permutation.iter().map(|&p| items[p].clone()).collect()
    }
}

/// Three-frame neighbourhood of frame `k` from the ordered video plus the
/// same positions of the shuffled video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub center: usize,
    /// Video frame indices of `(I[k-1], I[k], I[k+1])` after clamping.
    pub ordered_indices: [usize; 3],
    /// Video frame indices of `(S[k-1], S[k], S[k+1])`.
    pub shuffled_indices: [usize; 3],
    pub frames: [Frame; 3],
    pub shuffled: [Frame; 3],
    /// Ground truth of the centre frame.
    pub boxes: Vec<BBox>,
    pub label: LesionClass,
}

/// Positions `k−1, k, k+1` are clamped to `[0, T−1]`; the shuffled frames
/// are the permuted video at those same positions.
pub fn sample_clip(video: &VideoSample, k: usize, plan: &ShufflePlan) -> Result<Clip> {
    let t = video.frame_count();
    if k >= t {
        return Err(Error::Dataset(format!("{}: clip centre {k} outside 0..{t}", video.id)));
    }
    if plan.len() != t {
        return Err(Error::Dataset(format!(
            "{}: shuffle plan covers {} frames, video has {t}",
            video.id,
            plan.len()
        )));
    }
    let positions = [k.saturating_sub(1), k, (k + 1).min(t - 1)];
    let shuffled_indices = positions.map(|p| plan.permutation[p]);
    Ok(Clip {
        center: k,
        ordered_indices: positions,
        shuffled_indices,
        frames: positions.map(|p| video.frames[p].clone()),
        shuffled: shuffled_indices.map(|p| video.frames[p].clone()),
        boxes: vec![video.boxes[k]],
        label: video.label,
    })
}
