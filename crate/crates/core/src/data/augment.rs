use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Clip, DataError, Result};
use crate::tensor::Tensor;

/// `n` evenly spaced indices into `total` frames, endpoints included:
/// `floor(i·(total-1)/(n-1))`, or `[0]` when `n == 1`.
pub fn sample_frames(total: usize, n: usize, clip: &str) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(DataError::Frames {
            clip: clip.to_string(),
            requested: n,
            available: total,
        });
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n).map(|i| i * (total - 1) / (n - 1)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

impl Flip {
    /// Each of the three outcomes with probability 1/3.
    pub fn choose<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.random_range(0..3) {
            0 => Flip::Horizontal,
            1 => Flip::Vertical,
            _ => Flip::None,
        }
    }

    /// Applies the flip to every frame of `[T, C, H, W]` data.
    pub fn apply(self, frames: &Tensor) -> Tensor {
        if self == Flip::None {
            return frames.clone();
        }
        let s = frames.shape();
        let (h, w) = (s[2], s[3]);
        let src = frames.data();
        let mut out = vec![0.0; src.len()];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match self {
                        Flip::Horizontal => (y, w - 1 - x),
                        Flip::Vertical => (h - 1 - y, x),
                        Flip::None => unreachable!(),
                    };
                    dst[y * w + x] = plane[sy * w + sx];
                }
            }
        }
        Tensor::new(s.to_vec(), out).expect("same extents")
    }
}

impl Clip {
    pub fn flipped(&self, flip: Flip) -> Clip {
        Clip {
            frames: flip.apply(&self.frames),
            label: self.label,
            source: self.source.clone(),
        }
    }
}

/// Draws one flip for the whole clip, so every frame gets the same transform.
pub fn flip_augment<R: Rng + ?Sized>(clip: &Clip, rng: &mut R) -> Clip {
    clip.flipped(Flip::choose(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_frames(150, 5, "c").unwrap(), [0, 37, 74, 111, 149]);
        assert_eq!(sample_frames(15, 15, "c").unwrap(), (0..15).collect::<Vec<_>>());
        assert_eq!(sample_frames(2, 2, "c").unwrap(), [0, 1]);
        assert_eq!(sample_frames(9, 1, "c").unwrap(), [0]);
        let err = sample_frames(4, 5, "clip_7").unwrap_err().to_string();
        assert!(err.contains("clip_7"), "{err}");
    }

    proptest! {
        #[test]
        fn sampled_indices_are_strictly_increasing(total in 2usize..400, n in 2usize..60) {
            prop_assume!(n <= total);
            let idx = sample_frames(total, n, "c").unwrap();
            prop_assert_eq!(idx.len(), n);
            prop_assert_eq!(idx[0], 0);
            prop_assert_eq!(*idx.last().unwrap(), total - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    fn marker_clip() -> Clip {
        // one bright pixel at the top-left of every frame and channel
        let frames = Tensor::from_fn([5, 2, 4, 6], |i| if i % 24 == 0 { 1.0 } else { 0.25 });
        Clip::new(frames, 1, "m").unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let c = marker_clip();
        for f in [Flip::Horizontal, Flip::Vertical, Flip::None] {
            assert_eq!(f.apply(&f.apply(c.frames())), *c.frames());
        }
    }

    #[test]
    fn one_flip_per_clip() {
        let c = marker_clip();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let a = flip_augment(&c, &mut rng);
            assert_eq!(a.label, c.label);
            assert_eq!(a.geometry(), c.geometry());
            let marker_at: Vec<usize> = a
                .frames()
                .data()
                .chunks(24)
                .map(|plane| plane.iter().position(|&v| v == 1.0).unwrap())
                .collect();
            assert!(marker_at.iter().all(|&p| p == marker_at[0]));
            assert!([0, 5, 18].contains(&marker_at[0]));
        }
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| Flip::choose(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        let counts = draw(4).iter().filter(|&&f| f == Flip::None).count();
        assert!(counts > 5 && counts < 30);
    }
}
