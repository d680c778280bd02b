//! Synthetic stand-in for face-swap datasets.
//!
//! Real clips show a drifting band-limited background texture with an
//! elliptical "face" carrying its own texture. Fakes add a static seam (a
//! rectangle inside the face with altered contrast and brightness, blended at
//! its border) and/or flicker (independent per-frame brightness offsets inside
//! the face).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{io, split_labels, Clip, ClipGeometry, DataError, Manifest, ManifestEntry, Result, SplitRatios};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Seam,
    Flicker,
    Both,
}

impl ArtifactKind {
    fn seam(self) -> bool {
        matches!(self, Self::Seam | Self::Both)
    }

    fn flicker(self) -> bool {
        matches!(self, Self::Flicker | Self::Both)
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Seam => "seam",
            Self::Flicker => "flicker",
            Self::Both => "both",
        })
    }
}

impl FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seam" => Ok(Self::Seam),
            "flicker" => Ok(Self::Flicker),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown artifact `{other}` (expected seam, flicker or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub fake_fraction: f64,
    pub artifact: ArtifactKind,
    /// In `(0, 1]`; scales every artifact.
    pub strength: f64,
    /// Background drift in pixels per frame.
    pub motion: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
    pub seed: u64,
    pub geometry: ClipGeometry,
    pub ratios: SplitRatios,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 160,
            fake_fraction: 0.5,
            artifact: ArtifactKind::Both,
            strength: 1.0,
            motion: 0.6,
            noise: 0.02,
            seed: 0,
            geometry: ClipGeometry::new(25, 3, 16, 16),
            ratios: SplitRatios::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.count == 0 {
            return bad("clip count must be positive".into());
        }
        if !(self.fake_fraction > 0.0 && self.fake_fraction < 1.0) {
            return bad(format!("fake fraction must be in (0, 1), got {}", self.fake_fraction));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return bad(format!("artifact strength must be in (0, 1], got {}", self.strength));
        }
        if !(self.motion >= 0.0) || !(self.noise >= 0.0) {
            return bad("motion and noise must be non-negative".into());
        }
        let g = self.geometry;
        if g.shape().contains(&0) || g.height < 8 || g.width < 8 {
            return bad(format!("geometry {g} is too small for a face region"));
        }
        self.ratios.validate()
    }

    /// Number of fake clips, `round(count · fake_fraction)`.
    pub fn fake_count(&self) -> usize {
        (self.count as f64 * self.fake_fraction).round() as usize
    }

    /// Labels for every clip index; fakes are placed by a seeded shuffle.
    pub fn labels(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.count];
        labels[..self.fake_count()].fill(1);
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_1abe_15));
        labels
    }
}

/// Nominal face ellipse used by pixel statistics: centred, slightly smaller
/// than any generated face so it never covers background.
pub fn face_mask(height: usize, width: usize) -> Vec<bool> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (ry, rx) = (0.26 * height as f64, 0.2 * width as f64);
    (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
        })
        .collect()
}

struct Wave {
    amp: f64,
    ky: f64,
    kx: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, amp: (f64, f64), freq: (f64, f64)) -> Self {
        let k = rng.random_range(freq.0..freq.1);
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            amp: rng.random_range(amp.0..amp.1),
            ky: k * dir.sin(),
            kx: k * dir.cos(),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.amp * (self.ky * y + self.kx * x + self.phase).sin()
    }
}

fn smoothstep(e0: f64, e1: f64, v: f64) -> f64 {
    let t = ((v - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders clip `index` of the dataset described by `spec`.
pub fn generate_clip(spec: &SynthSpec, index: usize, fake: bool) -> Clip {
    let g = spec.geometry;
    let (h, w) = (g.height as f64, g.width as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let bg_base: Vec<f64> = (0..g.channels).map(|_| rng.random_range(0.25..0.55)).collect();
    let bg_waves: Vec<Vec<Wave>> = (0..g.channels)
        .map(|_| (0..3).map(|_| Wave::random(&mut rng, (0.03, 0.08), (0.25, 0.9))).collect())
        .collect();
    let speed = spec.motion * rng.random_range(0.5..1.5);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let (vy, vx) = (speed * heading.sin(), speed * heading.cos());

    let skin = [0.78, 0.58, 0.47];
    let face_base: Vec<f64> = (0..g.channels)
        .map(|c| skin[c % 3] + rng.random_range(-0.08..0.08))
        .collect();
    let face_waves: Vec<Vec<Wave>> = (0..g.channels)
        .map(|_| (0..2).map(|_| Wave::random(&mut rng, (0.02, 0.05), (0.4, 1.2))).collect())
        .collect();
    let contrast = rng.random_range(0.8..1.2);
    let cy0 = (h - 1.0) / 2.0 + rng.random_range(-0.04..0.04) * h;
    let cx0 = (w - 1.0) / 2.0 + rng.random_range(-0.04..0.04) * w;
    let ry = 0.36 * h * rng.random_range(0.95..1.1);
    let rx = 0.28 * w * rng.random_range(0.95..1.1);
    let sway = 0.5 * spec.motion * rng.random_range(0.5..1.0);
    let omega = rng.random_range(0.15..0.4);
    let psi = rng.random_range(0.0..std::f64::consts::TAU);
    // slow global illumination change and facial texture drift
    let light_amp = rng.random_range(0.0..0.08);
    let light_omega = rng.random_range(0.1..0.3);
    let light_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let face_speed = 0.5 * spec.motion * rng.random_range(0.0..1.5);
    let face_heading = rng.random_range(0.0..std::f64::consts::TAU);
    let (fvy, fvx) = (face_speed * face_heading.sin(), face_speed * face_heading.cos());
    let noise_sd = spec.noise * rng.random_range(0.5..2.0);

    let s = spec.strength;
    let seam = fake && spec.artifact.seam();
    let flicker = fake && spec.artifact.flicker();
    // seam rectangle, fixed in frame coordinates
    let (sy0, sy1) = (cy0 - 0.45 * ry, cy0 + 0.25 * ry);
    let (sx0, sx1) = (cx0 - 0.5 * rx, cx0 + 0.5 * rx);
    let seam_gain = 1.0 + 0.8 * s;
    let seam_shift = if rng.random_bool(0.5) { 0.12 } else { -0.12 } * s;
    let offsets: Vec<f64> = (0..g.frames)
        .map(|_| if flicker { 0.25 * s * rng.random_range(-1.0..1.0) } else { 0.0 })
        .collect();
    let normal = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("finite noise");

    let mut data = Vec::with_capacity(g.numel());
    for (t, &offset) in offsets.iter().enumerate() {
        let tf = t as f64;
        let cy = cy0 + sway * (omega * tf + psi).sin();
        let cx = cx0 + sway * (omega * tf + psi).cos();
        let light = light_amp * (light_omega * tf + light_phase).sin();
        for c in 0..g.channels {
            for yi in 0..g.height {
                for xi in 0..g.width {
                    let (y, x) = (yi as f64, xi as f64);
                    let bg = bg_base[c]
                        + contrast * bg_waves[c].iter().map(|wv| wv.at(y - vy * tf, x - vx * tf)).sum::<f64>();
                    let (fy, fx) = (y - cy, x - cx);
                    let r = ((fy / ry).powi(2) + (fx / rx).powi(2)).sqrt();
                    // one-pixel soft face border
                    let inside = 1.0 - smoothstep(1.0 - 1.0 / rx.min(ry), 1.0, r);
                    let mut face = face_base[c] + contrast * face_waves[c].iter().map(|wv| wv.at(fy - fvy * tf, fx - fvx * tf)).sum::<f64>();
                    if seam {
                        let edge = (y - sy0).min(sy1 - y).min(x - sx0).min(sx1 - x);
                        let wgt = smoothstep(-0.75, 0.75, edge);
                        let altered = face_base[c] + (face - face_base[c]) * seam_gain + seam_shift;
                        face += wgt * (altered - face);
                    }
                    face += offset;
                    let mut v = inside * face + (1.0 - inside) * bg + light;
                    if noise_sd > 0.0 {
                        v += normal.sample(&mut rng);
                    }
                    data.push((v.clamp(0.0, 1.0) as f32) as f64);
                }
            }
        }
    }
    let frames = Tensor::new(g.shape(), data).expect("generated extents");
    Clip::new(frames, u8::from(fake), format!("synth_{index:05}")).expect("values are clamped")
}

/// Writes `count` clips plus `manifest.tsv` into `out_dir`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let io_err = |source| DataError::Io {
        path: out_dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(out_dir.join("clips")).map_err(io_err)?;
    let labels = spec.labels();
    let splits = split_labels(&labels, spec.ratios, spec.seed)?;
    let mut entries = Vec::with_capacity(spec.count);
    for (i, (&label, split)) in labels.iter().zip(splits).enumerate() {
        let clip = generate_clip(spec, i, label == 1);
        let rel = format!("clips/clip_{i:05}.vfcl");
        io::write_clip(&out_dir.join(&rel), &clip)?;
        entries.push(ManifestEntry { path: rel, label, split });
    }
    let manifest = Manifest::new(spec.geometry, entries, out_dir)?;
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mean_abs_frame_diff, Split};

    fn spec(count: usize) -> SynthSpec {
        SynthSpec {
            count,
            ..Default::default()
        }
    }

    #[test]
    fn label_balance() {
        let s = spec(100);
        assert_eq!(s.labels().iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = spec(10);
        s.strength = 0.0;
        assert!(matches!(s.validate(), Err(DataError::Config(_))));
        s.strength = 0.5;
        s.fake_fraction = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn values_in_range_and_deterministic() {
        let s = spec(4);
        let a = generate_clip(&s, 3, true);
        assert_eq!(a, generate_clip(&s, 3, true));
        assert_ne!(a.frames(), generate_clip(&s, 2, true).frames());
        assert!(a.frames().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn flicker_raises_frame_differences() {
        let s = SynthSpec {
            artifact: ArtifactKind::Flicker,
            ..spec(80)
        };
        let mask = face_mask(s.geometry.height, s.geometry.width);
        let stats = |fake: bool| -> Vec<f64> {
            (0..40)
                .map(|i| mean_abs_frame_diff(&generate_clip(&s, i + if fake { 40 } else { 0 }, fake), &mask))
                .collect()
        };
        let (real, fake) = (stats(false), stats(true));
        let wins = fake
            .iter()
            .flat_map(|f| real.iter().map(move |r| f > r))
            .filter(|&w| w)
            .count();
        assert!(wins as f64 >= 0.95 * (real.len() * fake.len()) as f64, "{wins}");
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(20);
        let m = synth_generate(&s, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 20);
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        for i in 0..20 {
            let clip = loaded.load_clip(i).unwrap();
            assert_eq!(clip.frames(), generate_clip(&s, i, clip.label == 1).frames());
        }
        assert!(!loaded.indices(Split::Test).is_empty());

        let other = tempfile::tempdir().unwrap();
        synth_generate(&s, other.path()).unwrap();
        for e in &m.entries {
            assert_eq!(
                std::fs::read(dir.path().join(&e.path)).unwrap(),
                std::fs::read(other.path().join(&e.path)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(dir.path().join("manifest.tsv")).unwrap(),
            std::fs::read(other.path().join("manifest.tsv")).unwrap()
        );
    }
}
