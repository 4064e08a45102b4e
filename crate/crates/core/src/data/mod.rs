//! Synthetic pulsating-chamber clips with analytically known ejection-
//! fraction labels, clip preprocessing (frame differences, grayscale
//! triplication), deterministic splits, and a binary clip-record format.

pub mod records;

pub use records::{read_records, write_records};

use crate::error::{Error, Result};
use crate::rng::{Prng, Stream};
use crate::tensor::Tensor;

/// One labeled clip: T x H x W x C pixels in the unit interval plus an EF
/// percentage.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: f64) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::ShapeMismatch {
                left: frames.shape().to_vec(),
                right: vec![0; 4],
                context: "clip frames must be (T,H,W,C)",
            });
        }
        if !(0.0..=100.0).contains(&label) {
            return Err(Error::InvalidConfig(format!(
                "EF label must be in [0,100], got {label}"
            )));
        }
        if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig(
                "clip pixels must lie in [0,1]".to_string(),
            ));
        }
        Ok(VideoClip { frames, label })
    }

    pub fn shape(&self) -> &[usize] {
        self.frames.shape()
    }
}

/// End-diastolic / end-systolic volume pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumePair {
    pub edv: f64,
    pub esv: f64,
}

/// EF% = 100 * (EDV - ESV) / EDV.
pub fn ef_from_volumes(v: VolumePair) -> Result<f64> {
    if v.edv <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "EDV must be positive, got {}",
            v.edv
        )));
    }
    if v.esv < 0.0 || v.esv > v.edv {
        return Err(Error::InvalidConfig(format!(
            "ESV must satisfy 0 <= ESV <= EDV, got ESV {} vs EDV {}",
            v.esv, v.edv
        )));
    }
    Ok(100.0 * (v.edv - v.esv) / v.edv)
}

/// Parameters of one synthetic clip. The rendered chamber is a bright
/// anti-aliased ellipse whose area oscillates sinusoidally so that the
/// area-ratio analog of EF equals `target_ef` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub target_ef: f64,
    /// Maximal semi-axis as a fraction of the half-width/half-height.
    pub base_radius: f64,
    /// Frames per full contraction cycle.
    pub cycle_period: usize,
    /// Scale of the uniform speckle noise added to every pixel.
    pub noise_std: f64,
    /// Per-frame center wobble, in pixels.
    pub center_jitter: f64,
    pub seed: u64,
    /// Stream index: distinct clips from one seed use distinct streams.
    pub stream: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            target_ef: 55.0,
            base_radius: 0.55,
            cycle_period: 28,
            noise_std: 0.0,
            center_jitter: 0.0,
            seed: 0,
            stream: 0,
            frames: 28,
            height: 112,
            width: 112,
        }
    }
}

/// Chamber brightness; the background stays dark speckle.
const CHAMBER_INTENSITY: f64 = 0.85;
/// Vertical elongation of the chamber ellipse.
const ASPECT: f64 = 1.15;

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if !(5.0..=90.0).contains(&self.target_ef) {
            return Err(Error::InvalidConfig(format!(
                "target_ef must be in [5,90], got {}",
                self.target_ef
            )));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.cycle_period == 0 {
            return Err(Error::InvalidConfig("clip extents must be positive".into()));
        }
        if self.noise_std < 0.0 || self.center_jitter < 0.0 || self.base_radius <= 0.0 {
            return Err(Error::InvalidConfig(
                "noise_std/center_jitter must be >= 0 and base_radius > 0".into(),
            ));
        }
        let (ax, ay) = self.semi_axes();
        let cx = self.width as f64 / 2.0;
        let cy = self.height as f64 / 2.0;
        let j = self.center_jitter;
        if cx - ax - j < 0.0
            || cx + ax + j > self.width as f64
            || cy - ay - j < 0.0
            || cy + ay + j > self.height as f64
        {
            return Err(Error::InvalidConfig(format!(
                "chamber exceeds frame bounds: semi-axes ({ax:.1},{ay:.1}) with jitter {j} in {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn semi_axes(&self) -> (f64, f64) {
        let ax = self.base_radius * self.width as f64 / 2.0;
        let ay = (self.base_radius * ASPECT * self.height as f64 / 2.0)
            .min(self.height as f64 / 2.0 - self.center_jitter - 0.5);
        (ax, ay)
    }
}

/// Render one clip. Pixel values and the label pass through single precision
/// so record files round-trip exactly.
pub fn generate_synthetic_clip(params: &SyntheticParams) -> Result<VideoClip> {
    params.validate()?;
    let mut rng = Prng::new(params.seed, Stream::Clip(params.stream));
    let (h, w, t_n) = (params.height, params.width, params.frames);
    let (ax_max, ay_max) = params.semi_axes();
    let cx0 = w as f64 / 2.0;
    let cy0 = h as f64 / 2.0;

    let mut data = vec![0.0f64; t_n * h * w];
    for t in 0..t_n {
        // Contraction phase: 0 at end-diastole, 1 at end-systole.
        let phase = (1.0 - (2.0 * std::f64::consts::PI * t as f64 / params.cycle_period as f64).cos())
            / 2.0;
        // Area shrinks linearly in phase; both semi-axes scale by sqrt.
        let scale = (1.0 - params.target_ef / 100.0 * phase).sqrt();
        let (ax, ay) = (ax_max * scale, ay_max * scale);
        let (jx, jy) = if params.center_jitter > 0.0 {
            (
                params.center_jitter * (2.0 * rng.uniform() - 1.0),
                params.center_jitter * (2.0 * rng.uniform() - 1.0),
            )
        } else {
            (0.0, 0.0)
        };
        let (cx, cy) = (cx0 + jx, cy0 + jy);

        let frame = &mut data[t * h * w..(t + 1) * h * w];
        // Coverage-weighted boundary: signed pixel distance to the ellipse
        // through a one-pixel linear edge filter. Only the bounding box
        // (plus the filter margin) needs visiting.
        let y_lo = (cy - ay - 1.0).floor().max(0.0) as usize;
        let y_hi = ((cy + ay + 1.0).ceil() as usize).min(h);
        let x_lo = (cx - ax - 1.0).floor().max(0.0) as usize;
        let x_hi = ((cx + ax + 1.0).ceil() as usize).min(w);
        for y in y_lo..y_hi {
            let dy = (y as f64 + 0.5 - cy) / ay;
            for x in x_lo..x_hi {
                let dx = (x as f64 + 0.5 - cx) / ax;
                let f = (dx * dx + dy * dy).sqrt();
                let coverage = if f < 0.5 {
                    1.0
                } else {
                    // |grad f| in pixel units turns (f - 1) into a distance.
                    let grad = (dx * dx / (ax * ax) + dy * dy / (ay * ay)).sqrt() / f;
                    let dist = (f - 1.0) / grad.max(1e-12);
                    (0.5 - dist).clamp(0.0, 1.0)
                };
                frame[y * w + x] = CHAMBER_INTENSITY * coverage;
            }
        }
        if params.noise_std > 0.0 {
            for px in frame.iter_mut() {
                *px = (*px + params.noise_std * rng.uniform()).clamp(0.0, 1.0);
            }
        }
    }
    // Quantize through f32 so disk round trips are bit-exact.
    for v in &mut data {
        *v = *v as f32 as f64;
    }
    let frames = Tensor::from_vec(vec![t_n, h, w, 1], data)?;
    VideoClip::new(frames, params.target_ef as f32 as f64)
}

/// d_t = f_{t+1} - f_t over the leading axis; values stay in [-1,1].
pub fn frame_difference(clip: &Tensor) -> Result<Tensor> {
    let shape = clip.shape();
    if shape.is_empty() || shape[0] < 2 {
        return Err(Error::InvalidConfig(format!(
            "frame differencing needs at least 2 frames, got shape {shape:?}"
        )));
    }
    let t_n = shape[0];
    let rest: usize = shape[1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[0] = t_n - 1;
    let mut out = Vec::with_capacity((t_n - 1) * rest);
    for t in 0..t_n - 1 {
        let cur = &clip.data()[t * rest..(t + 1) * rest];
        let next = &clip.data()[(t + 1) * rest..(t + 2) * rest];
        out.extend(next.iter().zip(cur).map(|(&n, &c)| n - c));
    }
    Tensor::from_vec(out_shape, out)
}

/// (T,H,W,1) -> (T,H,W,3) by repeating the grayscale channel.
pub fn triplicate_grayscale(clip: &Tensor) -> Result<Tensor> {
    let shape = clip.shape();
    if shape.len() != 4 || shape[3] != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            got: *shape.last().unwrap_or(&0),
        });
    }
    let mut out_shape = shape.to_vec();
    out_shape[3] = 3;
    let mut out = Vec::with_capacity(clip.numel() * 3);
    for &v in clip.data() {
        out.extend_from_slice(&[v, v, v]);
    }
    Ok(Tensor::new_unchecked(out_shape, out))
}

/// Deterministic train/val/test split of `n` indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle 0..n with the seeded split stream, then cut at the cumulative
/// ratio boundaries floor(r0*n) and floor((r0+r1)*n); the remainder becomes
/// the test set. Every split size lands within one of its exact share.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 samples to split, got {n}"
        )));
    }
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Prng::new(seed, Stream::DataSplit);
    rng.shuffle(&mut indices);
    let cut_train = (ratios[0] * n as f64).floor() as usize;
    let cut_val = ((ratios[0] + ratios[1]) * n as f64).floor() as usize;
    let train = indices[..cut_train].to_vec();
    let val = indices[cut_train..cut_val].to_vec();
    let test = indices[cut_val..].to_vec();
    Ok(DatasetSplit { train, val, test })
}

/// Generate `n` clips with labels drawn uniformly from `ef_range`. Clip `i`
/// uses stream `i` of `seed`, so generation is order-independent.
pub fn generate_labeled_clips(
    n: usize,
    ef_range: (f64, f64),
    template: &SyntheticParams,
    seed: u64,
) -> Result<Vec<VideoClip>> {
    let mut label_rng = Prng::new(seed, Stream::DataLabels);
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let label = label_rng.uniform_in(ef_range.0, ef_range.1);
        let params = SyntheticParams {
            target_ef: label,
            seed,
            stream: i as u64,
            ..template.clone()
        };
        clips.push(generate_synthetic_clip(&params)?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ef_examples() {
        assert_eq!(ef_from_volumes(VolumePair { edv: 100.0, esv: 40.0 }).unwrap(), 60.0);
        assert_eq!(ef_from_volumes(VolumePair { edv: 70.0, esv: 70.0 }).unwrap(), 0.0);
        assert!(ef_from_volumes(VolumePair { edv: 0.0, esv: 0.0 }).is_err());
        assert!(ef_from_volumes(VolumePair { edv: 50.0, esv: 60.0 }).is_err());
    }

    #[test]
    fn clip_has_declared_shape_and_unit_range() {
        let clip = generate_synthetic_clip(&SyntheticParams {
            target_ef: 60.0,
            noise_std: 0.05,
            center_jitter: 2.0,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(clip.shape(), &[28, 112, 112, 1]);
        assert!(clip.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(clip.label, 60.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SyntheticParams {
            target_ef: 47.5,
            noise_std: 0.1,
            center_jitter: 1.5,
            seed: 99,
            stream: 4,
            ..Default::default()
        };
        let a = generate_synthetic_clip(&params).unwrap();
        let b = generate_synthetic_clip(&params).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.label, b.label);
        // A different stream draws a different clip.
        let c = generate_synthetic_clip(&SyntheticParams { stream: 5, ..params }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    /// Pixel-count area oracle: sum of coverage-scaled intensities per frame.
    fn pixel_area_ef(clip: &VideoClip) -> f64 {
        let shape = clip.shape();
        let per_frame: usize = shape[1..].iter().product();
        let areas: Vec<f64> = (0..shape[0])
            .map(|t| {
                clip.frames.data()[t * per_frame..(t + 1) * per_frame]
                    .iter()
                    .sum::<f64>()
                    / CHAMBER_INTENSITY
            })
            .collect();
        let a_max = areas.iter().cloned().fold(f64::MIN, f64::max);
        let a_min = areas.iter().cloned().fold(f64::MAX, f64::min);
        100.0 * (a_max - a_min) / a_max
    }

    #[test]
    fn pixel_count_oracle_recovers_target_ef() {
        for target in [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0] {
            let clip = generate_synthetic_clip(&SyntheticParams {
                target_ef: target,
                noise_std: 0.0,
                center_jitter: 0.0,
                seed: 1,
                ..Default::default()
            })
            .unwrap();
            let est = pixel_area_ef(&clip);
            assert!(
                (est - target).abs() < 2.0,
                "target {target}, pixel-count estimate {est}"
            );
        }
    }

    #[test]
    fn near_static_chamber_has_tiny_frame_differences() {
        let clip = generate_synthetic_clip(&SyntheticParams {
            target_ef: 5.0,
            noise_std: 0.0,
            center_jitter: 0.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let d = frame_difference(&clip.frames).unwrap();
        let max_abs = d.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_abs < 0.1, "max |diff| {max_abs}");
    }

    #[test]
    fn band_requests_stay_in_band() {
        let clips = generate_labeled_clips(
            32,
            (40.0, 50.0),
            &SyntheticParams {
                height: 32,
                width: 32,
                ..Default::default()
            },
            11,
        )
        .unwrap();
        assert!(clips.iter().all(|c| (40.0..=50.0).contains(&c.label)));
    }

    #[test]
    fn frame_difference_examples() {
        let clip = generate_synthetic_clip(&SyntheticParams {
            height: 32,
            width: 32,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let d = frame_difference(&clip.frames).unwrap();
        assert_eq!(d.shape(), &[27, 32, 32, 1]);

        let constant = Tensor::full(&[4, 2, 2, 1], 0.3);
        let dc = frame_difference(&constant).unwrap();
        assert!(dc.data().iter().all(|&v| v == 0.0));

        // Definitional subtraction oracle, bit-exact.
        let mut rng = Prng::new(8, Stream::Init);
        let random = Tensor::from_fn(&[5, 3, 2, 1], |_| rng.uniform());
        let dr = frame_difference(&random).unwrap();
        for t in 0..4 {
            for i in 0..6 {
                let want = random.data()[(t + 1) * 6 + i] - random.data()[t * 6 + i];
                assert_eq!(dr.data()[t * 6 + i], want);
            }
        }
        assert!(frame_difference(&Tensor::ones(&[1, 2, 2, 1])).is_err());
    }

    #[test]
    fn triplicate_copies_channels_exactly() {
        // Single-precision pixels, as every real clip carries.
        let mut rng = Prng::new(9, Stream::Init);
        let clip = Tensor::from_fn(&[3, 4, 4, 1], |_| rng.uniform() as f32 as f64);
        let rgb = triplicate_grayscale(&clip).unwrap();
        assert_eq!(rgb.shape(), &[3, 4, 4, 3]);
        for (i, &v) in clip.data().iter().enumerate() {
            for c in 0..3 {
                assert_eq!(rgb.data()[i * 3 + c], v);
            }
        }
        // Channel mean inverts the triplication bit-exactly.
        let back = rgb.mean_axis(3).unwrap();
        assert_eq!(back.data(), clip.data());
        assert!(triplicate_grayscale(&rgb).is_err());
    }

    #[test]
    fn difference_and_triplication_commute() {
        let mut rng = Prng::new(10, Stream::Init);
        let clip = Tensor::from_fn(&[6, 3, 3, 1], |_| rng.uniform());
        let d_then_t = triplicate_grayscale(&frame_difference(&clip).unwrap()).unwrap();
        let t_then_d = frame_difference(&triplicate_grayscale(&clip).unwrap()).unwrap();
        assert_eq!(d_then_t, t_then_d);
    }

    #[test]
    fn split_is_a_deterministic_partition_with_floor_sizes() {
        let s = split_dataset(1000, [0.744, 0.128, 0.128], 42).unwrap();
        assert_eq!(s.train.len(), 744);
        assert_eq!(s.val.len(), 128);
        assert_eq!(s.test.len(), 128);
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_dataset(1000, [0.744, 0.128, 0.128], 42).unwrap(), s);
        assert_ne!(split_dataset(1000, [0.744, 0.128, 0.128], 43).unwrap(), s);
    }

    #[test]
    fn split_sizes_within_one_of_exact_ratio() {
        for n in [10usize, 37, 100, 999] {
            let ratios = [0.7, 0.15, 0.15];
            let s = split_dataset(n, ratios, 7).unwrap();
            for (len, r) in [
                (s.train.len(), ratios[0]),
                (s.val.len(), ratios[1]),
                (s.test.len(), ratios[2]),
            ] {
                assert!((len as f64 - r * n as f64).abs() <= 1.0 + 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn split_rejects_bad_arguments() {
        assert!(split_dataset(2, [0.5, 0.25, 0.25], 1).is_err());
        assert!(split_dataset(10, [0.5, 0.25, 0.3], 1).is_err());
        assert!(split_dataset(10, [1.0, 0.0, 0.0], 1).is_err());
    }
}
