//! Synthetic heterogeneous video generation.
//!
//! Each class is a distinct spatiotemporal prototype: a Gaussian blob moving
//! along a class-specific linear trajectory with a class-specific amplitude
//! pulse, over a class-specific spatial grating. Heterogeneity is injected
//! on top: per-source style transforms (contrast / brightness / noise),
//! per-sample smooth monotone time warps, and a fraction of hard samples
//! with amplified style and drift but unchanged labels.
//!
//! Content randomness is keyed by `(seed, class, slot)` where `slot` is the
//! sample's index within its (class, source) stream. Sources are therefore
//! parallel copies of the same underlying samples, differing only by the
//! style transform; with zero style shift, drift, and hard fraction, the
//! per-source pixel statistics agree exactly. Every sample's randomness is
//! derived independently, so generation may be sharded by index without
//! changing the output.

use rand_chacha::ChaCha8Rng;

use heterovid_core::init::{rng_for, standard_normal, uniform01};
use heterovid_core::tensor::Tensor;

use crate::{HarnessError, Result};

/// Per-source style magnitudes. `blur` acts in the spatial frequency
/// domain: positive values smooth (compression-like), negative values
/// sharpen (edge-enhanced sources).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceStyle {
    pub contrast: f64,
    pub brightness: f64,
    pub noise: f64,
    pub blur: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Samples per class; unequal entries give class imbalance.
    pub per_class: Vec<usize>,
    pub time_steps: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_sources: usize,
    /// Global style strength; per-source magnitudes scale with it.
    pub style_shift: f64,
    /// Per-source contrast/brightness/noise magnitudes.
    pub styles: Vec<SourceStyle>,
    /// Time-warp strength in [0, 1].
    pub temporal_drift: f64,
    /// Fraction of label-preserving strongly perturbed samples.
    pub hard_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk-scale default: 4 classes, 3 sources, 8 frames of 32x32.
    pub fn desk_default(per_class: usize, seed: u64) -> Self {
        let mut spec = SyntheticSpec {
            num_classes: 4,
            per_class: vec![per_class; 4],
            time_steps: 8,
            channels: 1,
            height: 32,
            width: 32,
            num_sources: 3,
            style_shift: 1.25,
            styles: Vec::new(),
            temporal_drift: 0.5,
            hard_fraction: 0.2,
            seed,
        };
        spec.styles = derive_styles(spec.num_sources, seed);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HarnessError::Data("need at least two classes".into()));
        }
        if self.time_steps < 2 {
            return Err(HarnessError::Data("need at least two frames".into()));
        }
        if self.per_class.len() != self.num_classes {
            return Err(HarnessError::Data(format!(
                "{} per-class counts for {} classes",
                self.per_class.len(),
                self.num_classes
            )));
        }
        if self.per_class.iter().any(|&n| n == 0) {
            return Err(HarnessError::Data("every class needs at least one sample".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.num_sources == 0 {
            return Err(HarnessError::Data("extents and source count must be positive".into()));
        }
        if self.styles.len() != self.num_sources {
            return Err(HarnessError::Data(format!(
                "{} style entries for {} sources",
                self.styles.len(),
                self.num_sources
            )));
        }
        if !(0.0..=1.0).contains(&self.temporal_drift) {
            return Err(HarnessError::Data("temporal drift must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(HarnessError::Data("hard fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.per_class.iter().sum()
    }

    /// The companion evaluation spec: same geometry and heterogeneity,
    /// different sample counts and a decorrelated seed.
    pub fn eval_spec(&self, per_class: usize) -> SyntheticSpec {
        SyntheticSpec {
            per_class: vec![per_class; self.num_classes],
            seed: self.seed.wrapping_add(1_000_003),
            ..self.clone()
        }
    }
}

/// Source style magnitudes drawn once per source from the run seed.
pub fn derive_styles(num_sources: usize, seed: u64) -> Vec<SourceStyle> {
    (0..num_sources)
        .map(|s| {
            let mut rng = rng_for(seed, &format!("style.source{s}"));
            SourceStyle {
                contrast: 0.6 * (uniform01(&mut rng) - 0.5),
                brightness: 0.5 * (uniform01(&mut rng) - 0.5),
                noise: 0.08 + 0.15 * uniform01(&mut rng),
                blur: 1.6 * (uniform01(&mut rng) - 0.5),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T, C, H, W]` activations.
    pub video: Tensor<f32>,
    pub label: usize,
    pub source: usize,
    pub hard: bool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct ClassPrototype {
    /// Unit direction of the blob trajectory.
    dir: (f64, f64),
    /// Spatial grating frequencies.
    freq: (f64, f64),
    /// Phase of the amplitude pulse.
    pulse_phase: f64,
}

fn prototype(k: usize, num_classes: usize) -> ClassPrototype {
    let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
    ClassPrototype {
        dir: (angle.cos(), angle.sin()),
        freq: (1.0 + (k % 2) as f64, 1.0 + (k / 2 % 2) as f64),
        pulse_phase: std::f64::consts::PI * k as f64 / num_classes as f64,
    }
}

/// Smooth monotone time reparameterization `u -> (1 - m) u + m u^gamma`.
fn warp(u: f64, m: f64, gamma: f64) -> f64 {
    (1.0 - m) * u + m * u.powf(gamma)
}

struct ContentParams {
    start_jitter: (f64, f64),
    blob_sigma: f64,
    texture_phase: f64,
    amp_jitter: f64,
    warp_gamma: f64,
    warp_strength: f64,
}

fn content_params(spec: &SyntheticSpec, class: usize, slot: usize) -> ContentParams {
    let mut rng: ChaCha8Rng =
        rng_for(spec.seed, &format!("content.class{class}.slot{slot}"));
    let start_jitter = (0.1 * (uniform01(&mut rng) - 0.5), 0.1 * (uniform01(&mut rng) - 0.5));
    let blob_sigma = 0.10 + 0.04 * uniform01(&mut rng);
    let texture_phase = std::f64::consts::TAU * uniform01(&mut rng);
    let amp_jitter = 0.85 + 0.3 * uniform01(&mut rng);
    // expansion or compression of the early timeline, never degenerate
    let warp_gamma =
        if uniform01(&mut rng) < 0.5 { 0.45 + 0.2 * uniform01(&mut rng) } else { 1.8 + 0.4 * uniform01(&mut rng) };
    let warp_strength = 0.6 + 0.4 * uniform01(&mut rng);
    ContentParams { start_jitter, blob_sigma, texture_phase, amp_jitter, warp_gamma, warp_strength }
}

fn render_sample(
    spec: &SyntheticSpec,
    class: usize,
    slot: usize,
    source: usize,
    instance: usize,
    hard: bool,
) -> Tensor<f32> {
    let proto = prototype(class, spec.num_classes);
    let p = content_params(spec, class, slot);
    let (t_n, c_n, h_n, w_n) = (spec.time_steps, spec.channels, spec.height, spec.width);

    let hard_mult = if hard { 4.0 } else { 1.0 };
    let drift = (spec.temporal_drift * p.warp_strength * hard_mult).min(1.0);
    let style = &spec.styles[source];
    let style_strength = spec.style_shift * hard_mult;
    let contrast = 1.0 + style.contrast * style_strength;
    let brightness = style.brightness * style_strength;
    let noise_sigma = style.noise * style_strength;
    let mut noise_rng =
        rng_for(spec.seed, &format!("noise.class{class}.instance{instance}"));

    // spectral style: interpolate toward (blur) or extrapolate away from
    // (sharpen) a 3x3 binomial smoothing of the clean frame
    let kappa = (style.blur * style_strength).clamp(-0.85, 0.85);

    let mut data = vec![0f32; t_n * c_n * h_n * w_n];
    let mut clean_frame = vec![0f64; h_n * w_n];
    let mut filtered = vec![0f64; h_n * w_n];
    for t in 0..t_n {
        let u_raw = t as f64 / (t_n - 1) as f64;
        let u = warp(u_raw, drift, p.warp_gamma);
        // blob sweeps through the frame center along the class direction
        let cx = 0.5 + 0.30 * (u - 0.5) * proto.dir.0 + p.start_jitter.0;
        let cy = 0.5 + 0.30 * (u - 0.5) * proto.dir.1 + p.start_jitter.1;
        let amp = 0.9
            * p.amp_jitter
            * (0.7 + 0.3 * (std::f64::consts::PI * u + proto.pulse_phase).sin());
        let sigma2 = 2.0 * p.blob_sigma * p.blob_sigma;
        for c in 0..c_n {
            let phase = p.texture_phase + c as f64 * std::f64::consts::FRAC_PI_4;
            for hy in 0..h_n {
                let y = (hy as f64 + 0.5) / h_n as f64;
                for wx in 0..w_n {
                    let x = (wx as f64 + 0.5) / w_n as f64;
                    let blob =
                        amp * (-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / sigma2).exp();
                    let texture = 0.35
                        * (std::f64::consts::TAU * (proto.freq.0 * x + proto.freq.1 * y) + phase)
                            .sin();
                    clean_frame[hy * w_n + wx] = blob + texture;
                }
            }
            binomial_3x3(&clean_frame, &mut filtered, h_n, w_n);
            for i in 0..h_n * w_n {
                let spectral = (1.0 - kappa) * clean_frame[i] + kappa * filtered[i];
                let styled = contrast * spectral
                    + brightness
                    + noise_sigma * standard_normal(&mut noise_rng);
                data[(t * c_n + c) * h_n * w_n + i] = styled as f32;
            }
        }
    }
    Tensor::from_vec(&[t_n, c_n, h_n, w_n], data)
}

/// 3x3 binomial smoothing with clamped borders.
fn binomial_3x3(src: &[f64], dst: &mut [f64], h: usize, w: usize) {
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[y * w + x]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (dy, wy) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                for (dx, wx) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    acc += wy * wx * at(y + dy, x + dx);
                }
            }
            dst[(y * w as isize + x) as usize] = acc / 16.0;
        }
    }
}

/// Generates the full dataset. Deterministic in `(spec, seed)`; samples are
/// ordered class-major, index-minor.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.total_samples());
    let mut instance = 0usize;
    for class in 0..spec.num_classes {
        for idx in 0..spec.per_class[class] {
            let source = idx % spec.num_sources;
            let slot = idx / spec.num_sources;
            let mut hard_rng = rng_for(spec.seed, &format!("hard.class{class}.idx{idx}"));
            let hard = uniform01(&mut hard_rng) < spec.hard_fraction;
            let video = render_sample(spec, class, slot, source, instance, hard);
            samples.push(Sample { video, label: class, source, hard });
            instance += 1;
        }
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SyntheticSpec {
        let mut spec = SyntheticSpec {
            num_classes: 3,
            per_class: vec![6, 6, 6],
            time_steps: 4,
            channels: 1,
            height: 8,
            width: 8,
            num_sources: 3,
            style_shift: 1.25,
            styles: Vec::new(),
            temporal_drift: 0.5,
            hard_fraction: 0.25,
            seed,
        };
        spec.styles = derive_styles(3, seed);
        spec
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = small_spec(1);
        spec.num_classes = 1;
        spec.per_class = vec![4];
        assert!(generate(&spec).is_err());
        let mut spec = small_spec(1);
        spec.time_steps = 1;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(9);
        let d1 = generate(&spec).unwrap();
        let d2 = generate(&spec).unwrap();
        assert_eq!(d1.len(), d2.len());
        for (a, b) in d1.samples.iter().zip(&d2.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.source, b.source);
            assert_eq!(a.hard, b.hard);
            for (x, y) in a.video.data().iter().zip(b.video.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn no_heterogeneity_makes_sources_statistically_identical() {
        let mut spec = small_spec(3);
        spec.style_shift = 0.0;
        spec.temporal_drift = 0.0;
        spec.hard_fraction = 0.0;
        let data = generate(&spec).unwrap();
        // per-source pixel mean and std over all samples of each source
        let stats = |source: usize| -> (f64, f64) {
            let mut n = 0usize;
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for sample in data.samples.iter().filter(|s| s.source == source) {
                for &v in sample.video.data() {
                    n += 1;
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let mean = s / n as f64;
            (mean, (s2 / n as f64 - mean * mean).sqrt())
        };
        let (m0, d0) = stats(0);
        for source in 1..3 {
            let (m, d) = stats(source);
            assert!((m - m0).abs() < 1e-6, "mean {m} vs {m0}");
            assert!((d - d0).abs() < 1e-6, "std {d} vs {d0}");
        }
    }

    #[test]
    fn style_shift_separates_source_statistics() {
        let mut spec = small_spec(4);
        spec.per_class = vec![30, 30, 30];
        spec.style_shift = 1.0;
        spec.temporal_drift = 0.0;
        spec.hard_fraction = 0.0;
        let data = generate(&spec).unwrap();
        let mean_of = |source: usize| -> f64 {
            let mut n = 0usize;
            let mut s = 0.0f64;
            for sample in data.samples.iter().filter(|s| s.source == source) {
                for &v in sample.video.data() {
                    n += 1;
                    s += v as f64;
                }
            }
            s / n as f64
        };
        let means: Vec<f64> = (0..3).map(mean_of).collect();
        let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - means.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.01, "means {means:?}");
    }

    #[test]
    fn drift_shifts_the_local_difference_distribution() {
        let mut base = small_spec(5);
        base.per_class = vec![12, 12, 12];
        base.style_shift = 0.0;
        base.hard_fraction = 0.0;
        base.temporal_drift = 0.0;
        let mut drifted = base.clone();
        drifted.temporal_drift = 1.0;

        // frame-mean descriptors, then mean |a[t] - a[t-1]| per dataset
        let mean_local_diff = |data: &Dataset| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for s in &data.samples {
                let t_n = s.video.shape()[0];
                let frame: usize = s.video.shape()[1..].iter().product();
                let a: Vec<f64> = (0..t_n)
                    .map(|t| {
                        s.video.data()[t * frame..(t + 1) * frame]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>()
                            / frame as f64
                    })
                    .collect();
                for t in 1..t_n {
                    total += (a[t] - a[t - 1]).abs();
                    count += 1;
                }
            }
            total / count as f64
        };
        let d0 = mean_local_diff(&generate(&base).unwrap());
        let d1 = mean_local_diff(&generate(&drifted).unwrap());
        let rel = (d1 - d0).abs() / d0.max(1e-12);
        assert!(rel > 0.05, "drift changed local differences by only {rel:.4}");
    }

    #[test]
    fn hard_fraction_is_roughly_respected() {
        let mut spec = small_spec(6);
        spec.per_class = vec![100, 100, 100];
        spec.hard_fraction = 0.2;
        let data = generate(&spec).unwrap();
        let hard = data.samples.iter().filter(|s| s.hard).count() as f64;
        let frac = hard / data.len() as f64;
        assert!((frac - 0.2).abs() < 0.06, "hard fraction {frac}");
        // labels unchanged by hardness: every class still has its count
        for k in 0..3 {
            assert_eq!(data.samples.iter().filter(|s| s.label == k).count(), 100);
        }
    }

    #[test]
    fn imbalanced_counts_follow_the_ratio_list() {
        let mut spec = small_spec(7);
        spec.per_class = vec![9, 3, 6];
        let data = generate(&spec).unwrap();
        for (k, &want) in spec.per_class.iter().enumerate() {
            assert_eq!(data.samples.iter().filter(|s| s.label == k).count(), want);
        }
    }
}
