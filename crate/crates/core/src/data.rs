//! Synthetic 16×16 grayscale shapes.
//!
//! Four classes: `0` circle (an outline ring), `1` square, `2` cross,
//! `3` horizontal stripes. Samples jitter the position by up to one pixel in
//! each direction and shift brightness by up to ±0.1, clamped to `[0, 1]`.

use crate::dit::Cond;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const CLASS_COUNT: usize = 4;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["circle", "square", "cross", "stripes"];

pub const MAX_SHIFT: i64 = 1;
pub const BRIGHTNESS_JITTER: f64 = 0.1;
pub const NOISE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jitter {
    /// Row shift in pixels.
    pub dy: i64,
    /// Column shift in pixels.
    pub dx: i64,
    /// Added to every pixel before clamping.
    pub brightness: f64,
}

fn inside(class: usize, i: f64, j: f64) -> bool {
    match class {
        0 => {
            let r2 = (i - 7.5).powi(2) + (j - 7.5).powi(2);
            (12.25..=36.0).contains(&r2)
        }
        1 => (4.0..12.0).contains(&i) && (4.0..12.0).contains(&j),
        2 => {
            ((6.0..10.0).contains(&i) && (2.0..14.0).contains(&j))
                || ((6.0..10.0).contains(&j) && (2.0..14.0).contains(&i))
        }
        _ => (i as usize) % 4 < 2,
    }
}

/// Renders `class` with explicit nuisance parameters; zero jitter gives the
/// clean template.
pub fn render(class: usize, jitter: Jitter) -> Result<Tensor> {
    if class >= CLASS_COUNT {
        return Err(Error::InvalidClass(class));
    }
    let n = IMAGE_SIZE as i64;
    let mut img = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = (i - jitter.dy, j - jitter.dx);
            let base = if (0..n).contains(&si) && (0..n).contains(&sj) && inside(class, si as f64, sj as f64) {
                1.0
            } else {
                0.0
            };
            img.set(i as usize, j as usize, (base + jitter.brightness).clamp(0.0, 1.0));
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthOptions {
    /// Add `N(0, 0.05²)` pixel noise (clamped) after rendering.
    pub noise: bool,
}

pub fn gen_sample(class: usize, seed: u64) -> Result<Tensor> {
    gen_sample_with(class, seed, SynthOptions::default())
}

/// Deterministic sample for `(class, seed)`; draws `dy`, `dx`, brightness and
/// then (optionally) noise, in that order.
pub fn gen_sample_with(class: usize, seed: u64, opts: SynthOptions) -> Result<Tensor> {
    if class >= CLASS_COUNT {
        return Err(Error::InvalidClass(class));
    }
    let mut rng = Rng::new(seed);
    let span = (2 * MAX_SHIFT + 1) as usize;
    let jitter = Jitter {
        dy: rng.below(span) as i64 - MAX_SHIFT,
        dx: rng.below(span) as i64 - MAX_SHIFT,
        brightness: rng.uniform_range(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER),
    };
    let mut img = render(class, jitter)?;
    if opts.noise {
        for v in img.data_mut() {
            *v = (*v + NOISE_STD * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// The four clean class templates.
pub fn templates() -> Vec<Tensor> {
    (0..CLASS_COUNT)
        .map(|c| render(c, Jitter::default()).expect("valid class"))
        .collect()
}

/// `count` labelled samples, classes cycling `0, 1, 2, 3, ...`; sample `i`
/// uses seed `seed * 1_000_003 + i`.
pub fn dataset(count: usize, seed: u64, noise: bool) -> Result<Vec<(Tensor, Cond)>> {
    (0..count)
        .map(|i| {
            let class = i % CLASS_COUNT;
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            Ok((gen_sample_with(class, s, SynthOptions { noise })?, Some(class)))
        })
        .collect()
}

/// `(index, class, seed)` rows matching [`dataset`].
pub fn dataset_manifest(count: usize, seed: u64) -> Vec<(usize, usize, u64)> {
    (0..count)
        .map(|i| (i, i % CLASS_COUNT, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{pearson, score, ObjectiveId};

    #[test]
    fn square_template_is_centered_block() {
        let sq = render(1, Jitter::default()).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let expect = if (4..12).contains(&i) && (4..12).contains(&j) { 1.0 } else { 0.0 };
                assert_eq!(sq.get(i, j), expect);
            }
        }
        assert_eq!(sq.sum(), 64.0);
    }

    #[test]
    fn samples_are_deterministic_and_in_range() {
        for class in 0..4 {
            for seed in 0..20 {
                let a = gen_sample_with(class, seed, SynthOptions { noise: true }).unwrap();
                let b = gen_sample_with(class, seed, SynthOptions { noise: true }).unwrap();
                assert!(a.bit_eq(&b));
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(matches!(gen_sample(4, 0), Err(Error::InvalidClass(4))));
    }

    #[test]
    fn circle_sample_mean_brightness_tracks_template() {
        let template_mean = templates()[0].mean();
        let mean = (0..1000).map(|s| gen_sample(0, s).unwrap().mean()).sum::<f64>() / 1000.0;
        assert!((mean - template_mean).abs() <= 0.02, "{mean} vs {template_mean}");
    }

    #[test]
    fn template_properties() {
        let t = templates();
        assert_eq!(score(ObjectiveId::HSymmetry, &t[2], None).unwrap(), 0.0);
        let sharp: Vec<f64> = t
            .iter()
            .map(|img| score(ObjectiveId::Sharpness, img, None).unwrap())
            .collect();
        let best = (0..4).max_by(|&a, &b| sharp[a].total_cmp(&sharp[b])).unwrap();
        assert_eq!(best, 3, "{sharp:?}");
        for a in 0..4 {
            for b in a + 1..4 {
                let r = pearson(&t[a], &t[b]);
                assert!(r < 0.8, "classes {a},{b}: {r}");
            }
        }
        // frozen regression values of the pairwise correlations
        let r01 = pearson(&t[0], &t[1]);
        let r02 = pearson(&t[0], &t[2]);
        let r12 = pearson(&t[1], &t[2]);
        assert!((r01 - 0.234).abs() < 5e-4, "{r01}");
        assert!((r02 - 0.418).abs() < 5e-4, "{r02}");
        assert!((r12 - 0.545).abs() < 5e-4, "{r12}");
    }

    #[test]
    fn templates_round_trip_through_class_consistency() {
        for (c, t) in templates().iter().enumerate() {
            assert_eq!(score(ObjectiveId::ClassConsistency, t, Some(c)).unwrap(), 1.0);
        }
    }

    #[test]
    fn dataset_matches_manifest() {
        let data = dataset(9, 3, false).unwrap();
        for ((img, cond), (i, class, seed)) in data.iter().zip(dataset_manifest(9, 3)) {
            assert_eq!(*cond, Some(class));
            assert!(img.bit_eq(&gen_sample(class, seed).unwrap()), "sample {i}");
        }
    }
}
