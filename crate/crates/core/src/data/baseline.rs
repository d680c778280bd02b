use super::Clip;

/// Mean over masked pixels and channels of the per-pixel variance across time.
pub fn face_temporal_variance(clip: &Clip, mask: &[bool]) -> f64 {
    let g = clip.geometry();
    let plane = g.height * g.width;
    assert_eq!(mask.len(), plane, "mask must cover one frame plane");
    let d = clip.frames().data();
    let t = g.frames as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..g.channels {
        for p in (0..plane).filter(|&p| mask[p]) {
            let at = |f: usize| d[(f * g.channels + c) * plane + p];
            let mean = (0..g.frames).map(at).sum::<f64>() / t;
            total += (0..g.frames).map(|f| (at(f) - mean).powi(2)).sum::<f64>() / t;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Mean absolute change between consecutive frames over masked pixels.
pub fn mean_abs_frame_diff(clip: &Clip, mask: &[bool]) -> f64 {
    let g = clip.geometry();
    let plane = g.height * g.width;
    let len = g.frame_len();
    let d = clip.frames().data();
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 1..g.frames {
        for i in 0..len {
            if mask[i % plane] {
                total += (d[f * len + i] - d[(f - 1) * len + i]).abs();
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}

/// One-feature threshold classifier: "fake" when the statistic exceeds the
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdBaseline {
    pub threshold: f64,
}

impl ThresholdBaseline {
    /// Picks the midpoint threshold with the best training accuracy.
    pub fn fit(stats: &[f64], labels: &[u8]) -> Self {
        let mut sorted: Vec<f64> = stats.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut candidates = vec![sorted[0] - 1.0];
        candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let best = candidates
            .into_iter()
            .map(|t| (Self { threshold: t }.accuracy(stats, labels), t))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)))
            .expect("at least one candidate");
        Self { threshold: best.1 }
    }

    pub fn predict(&self, stat: f64) -> u8 {
        u8::from(stat > self.threshold)
    }

    pub fn accuracy(&self, stats: &[f64], labels: &[u8]) -> f64 {
        let correct = stats
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| self.predict(s) == l)
            .count();
        correct as f64 / stats.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn variance_of_alternating_frames() {
        // pixel alternates 0.2 / 0.6: variance 0.04
        let frames = Tensor::from_fn([4, 1, 2, 2], |i| if (i / 4) % 2 == 0 { 0.2 } else { 0.6 });
        let clip = Clip::new(frames, 0, "a").unwrap();
        let mask = vec![true; 4];
        assert!((face_temporal_variance(&clip, &mask) - 0.04).abs() < 1e-12);
        assert!((mean_abs_frame_diff(&clip, &mask) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn threshold_separates_clean_data() {
        let stats = [0.1, 0.2, 0.3, 0.8, 0.9];
        let labels = [0, 0, 0, 1, 1];
        let b = ThresholdBaseline::fit(&stats, &labels);
        assert_eq!(b.accuracy(&stats, &labels), 1.0);
        assert!(b.threshold > 0.3 && b.threshold < 0.8);
    }
}
