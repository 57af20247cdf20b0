//! Training-time stochastic augmentation and the deterministic TTA set.
//!
//! A [`Transform`] carries fully resolved parameters (cutout hole positions,
//! noise seed, shift offsets), so `apply` is a pure function. Randomness
//! lives in [`AugmentPolicy`], which resolves candidate specs into concrete
//! transforms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    Transpose,
    Rot90,
    Rot180,
    Rot270,
    /// Center-crop to `fraction` of each side, then resize back.
    Zoom { fraction: f64 },
    Brightness { delta: f64 },
    Contrast { factor: f64 },
    GaussNoise { std: f64, seed: u64 },
    /// Square holes zeroed at the given top-left corners.
    Cutout { corners: Vec<(usize, usize)>, size: usize },
    Shift { dx: i64, dy: i64 },
    /// Rescale content by `factor`, then center-crop or zero-pad back.
    Scale { factor: f64 },
}

impl Transform {
    /// Deterministic transforms usable for TTA (fixed pixel-grid ops plus
    /// fixed-fraction zoom).
    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            Transform::Identity
                | Transform::HFlip
                | Transform::VFlip
                | Transform::Transpose
                | Transform::Rot90
                | Transform::Rot180
                | Transform::Rot270
                | Transform::Zoom { .. }
        )
    }

    pub fn name(&self) -> String {
        match self {
            Transform::Identity => "identity".into(),
            Transform::HFlip => "hflip".into(),
            Transform::VFlip => "vflip".into(),
            Transform::Transpose => "transpose".into(),
            Transform::Rot90 => "rot90".into(),
            Transform::Rot180 => "rot180".into(),
            Transform::Rot270 => "rot270".into(),
            Transform::Zoom { fraction } => format!("zoom:{fraction}"),
            Transform::Brightness { .. } => "brightness".into(),
            Transform::Contrast { .. } => "contrast".into(),
            Transform::GaussNoise { .. } => "gauss_noise".into(),
            Transform::Cutout { .. } => "cutout".into(),
            Transform::Shift { .. } => "shift".into(),
            Transform::Scale { .. } => "scale".into(),
        }
    }
}

fn remap<S: Scalar>(
    image: &Tensor<S>,
    f: impl Fn(usize, usize, usize, usize) -> (usize, usize),
) -> Tensor<S> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(image.shape());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x, h, w);
                out.data_mut()[(c * h + y) * w + x] = image.data()[(c * h + sy) * w + sx];
            }
        }
    }
    out
}

pub fn apply<S: Scalar>(transform: &Transform, image: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let out = match transform {
        Transform::Identity => image.clone(),
        Transform::HFlip => remap(image, |y, x, _, w| (y, w - 1 - x)),
        Transform::VFlip => remap(image, |y, x, h, _| (h - 1 - y, x)),
        Transform::Transpose => {
            let t = transpose_exact(image);
            if t.shape() == image.shape() {
                t
            } else {
                resize(&t, (h, w))?
            }
        }
        Transform::Rot90 => {
            let t = rot90_exact(image);
            if t.shape() == image.shape() {
                t
            } else {
                resize(&t, (h, w))?
            }
        }
        Transform::Rot180 => remap(image, |y, x, h, w| (h - 1 - y, w - 1 - x)),
        Transform::Rot270 => {
            let t = rot90_exact(&remap(image, |y, x, h, w| (h - 1 - y, w - 1 - x)));
            if t.shape() == image.shape() {
                t
            } else {
                resize(&t, (h, w))?
            }
        }
        Transform::Zoom { fraction } => {
            if *fraction <= 0.0 || *fraction > 1.0 {
                return Err(Error::Config(format!("zoom fraction {fraction} not in (0,1]")));
            }
            let ch = ((h as f64 * fraction).round() as usize).clamp(2, h);
            let cw = ((w as f64 * fraction).round() as usize).clamp(2, w);
            let y0 = (h - ch) / 2;
            let x0 = (w - cw) / 2;
            let mut crop = Tensor::zeros(&[3, ch, cw]);
            for c in 0..3 {
                for y in 0..ch {
                    for x in 0..cw {
                        crop.data_mut()[(c * ch + y) * cw + x] =
                            image.data()[(c * h + y0 + y) * w + x0 + x];
                    }
                }
            }
            resize(&crop, (h, w))?
        }
        Transform::Brightness { delta } => {
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = S::of_f64((v.as_f64() + delta).clamp(0.0, 1.0));
            }
            out
        }
        Transform::Contrast { factor } => {
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = S::of_f64(((v.as_f64() - 0.5) * factor + 0.5).clamp(0.0, 1.0));
            }
            out
        }
        Transform::GaussNoise { std, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out = image.clone();
            for v in out.data_mut() {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let n = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *v = S::of_f64((v.as_f64() + n).clamp(0.0, 1.0));
            }
            out
        }
        Transform::Cutout { corners, size } => {
            let mut out = image.clone();
            for &(cy, cx) in corners {
                for c in 0..3 {
                    for y in cy..(cy + size).min(h) {
                        for x in cx..(cx + size).min(w) {
                            out.data_mut()[(c * h + y) * w + x] = S::zero();
                        }
                    }
                }
            }
            out
        }
        Transform::Shift { dx, dy } => {
            let mut out = Tensor::zeros(image.shape());
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as i64 - dy;
                        let sx = x as i64 - dx;
                        if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                            out.data_mut()[(c * h + y) * w + x] =
                                image.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
            out
        }
        Transform::Scale { factor } => {
            if *factor <= 0.0 {
                return Err(Error::Config(format!("scale factor {factor} must be > 0")));
            }
            let sh = ((h as f64 * factor).round() as usize).max(2);
            let sw = ((w as f64 * factor).round() as usize).max(2);
            let scaled = resize(image, (sh, sw))?;
            let mut out = Tensor::zeros(image.shape());
            // Center-align: crop when larger, zero-pad when smaller.
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as i64 + (sh as i64 - h as i64) / 2;
                        let sx = x as i64 + (sw as i64 - w as i64) / 2;
                        if (0..sh as i64).contains(&sy) && (0..sw as i64).contains(&sx) {
                            out.data_mut()[(c * h + y) * w + x] =
                                scaled.data()[(c * sh + sy as usize) * sw + sx as usize];
                        }
                    }
                }
            }
            out
        }
    };
    Ok(out)
}

fn transpose_exact<S: Scalar>(image: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[3, w, h]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(c * w + x) * h + y] = image.data()[(c * h + y) * w + x];
            }
        }
    }
    out
}

/// 90° counter-clockwise: out[y][x] = in[x][W_out - 1 - y] with swapped dims.
fn rot90_exact<S: Scalar>(image: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[3, w, h]);
    for c in 0..3 {
        for oy in 0..w {
            for ox in 0..h {
                out.data_mut()[(c * w + oy) * h + ox] =
                    image.data()[(c * h + ox) * w + (w - 1 - oy)];
            }
        }
    }
    out
}

/// A candidate augmentation with randomness still unresolved.
#[derive(Clone, Debug, PartialEq)]
pub enum CandidateKind {
    Identity,
    HFlip,
    VFlip,
    Transpose,
    /// Uniform pick among rot90/rot180/rot270.
    Rotate,
    Zoom { min_fraction: f64, max_fraction: f64 },
    Brightness { max_delta: f64 },
    Contrast { min_factor: f64, max_factor: f64 },
    GaussNoise { max_std: f64 },
    Cutout { n_holes: usize, hole_size: usize },
    Shift { max_pixels: usize },
    Scale { min_factor: f64, max_factor: f64 },
}

#[derive(Clone, Debug)]
pub struct CandidateSpec {
    pub kind: CandidateKind,
    pub probability: f64,
}

pub struct AugmentPolicy {
    candidates: Vec<CandidateSpec>,
    min_applied: usize,
    rng: ChaCha8Rng,
}

impl AugmentPolicy {
    pub fn new(candidates: Vec<CandidateSpec>, min_applied: usize, seed: u64) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Config("augmentation candidate list is empty".into()));
        }
        if min_applied < 1 {
            return Err(Error::Config("min_applied must be >= 1".into()));
        }
        for c in &candidates {
            if !(0.0..=1.0).contains(&c.probability) {
                return Err(Error::Config(format!(
                    "candidate probability {} not in [0,1]",
                    c.probability
                )));
            }
        }
        Ok(AugmentPolicy {
            candidates,
            min_applied,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Geometric-only policy: flips, transpose, and rotations at probability
    /// 0.5 each. These are exactly the ops in the deterministic TTA group, so
    /// training with this policy makes TTA averaging well-founded. The
    /// identity candidate keeps the >=1 forcing rule from biasing the op
    /// rates upward.
    pub fn geometric(seed: u64) -> Self {
        let candidates = vec![
            CandidateSpec { kind: CandidateKind::Identity, probability: 1.0 },
            CandidateSpec { kind: CandidateKind::HFlip, probability: 0.5 },
            CandidateSpec { kind: CandidateKind::VFlip, probability: 0.5 },
            CandidateSpec { kind: CandidateKind::Transpose, probability: 0.5 },
            CandidateSpec { kind: CandidateKind::Rotate, probability: 0.5 },
        ];
        AugmentPolicy::new(candidates, 1, seed).unwrap()
    }

    /// Default training policy: the flip/rotate/shift/scale/intensity set
    /// plus cutout, each at probability 0.5.
    pub fn default_training(seed: u64) -> Self {
        let candidates = vec![
            CandidateSpec { kind: CandidateKind::HFlip, probability: 0.5 },
            CandidateSpec { kind: CandidateKind::VFlip, probability: 0.5 },
            CandidateSpec { kind: CandidateKind::Rotate, probability: 0.5 },
            CandidateSpec { kind: CandidateKind::Shift { max_pixels: 4 }, probability: 0.5 },
            CandidateSpec {
                kind: CandidateKind::Scale { min_factor: 0.9, max_factor: 1.1 },
                probability: 0.5,
            },
            CandidateSpec {
                kind: CandidateKind::Brightness { max_delta: 0.1 },
                probability: 0.5,
            },
            CandidateSpec {
                kind: CandidateKind::Contrast { min_factor: 0.8, max_factor: 1.2 },
                probability: 0.5,
            },
            CandidateSpec {
                kind: CandidateKind::GaussNoise { max_std: 0.03 },
                probability: 0.5,
            },
            CandidateSpec {
                kind: CandidateKind::Cutout { n_holes: 1, hole_size: 8 },
                probability: 0.5,
            },
        ];
        AugmentPolicy::new(candidates, 1, seed).unwrap()
    }

    fn resolve(&mut self, kind: &CandidateKind, h: usize, w: usize) -> Transform {
        match kind {
            CandidateKind::Identity => Transform::Identity,
            CandidateKind::HFlip => Transform::HFlip,
            CandidateKind::VFlip => Transform::VFlip,
            CandidateKind::Transpose => Transform::Transpose,
            CandidateKind::Rotate => match self.rng.gen_range(0..3) {
                0 => Transform::Rot90,
                1 => Transform::Rot180,
                _ => Transform::Rot270,
            },
            CandidateKind::Zoom { min_fraction, max_fraction } => Transform::Zoom {
                fraction: self.rng.gen_range(*min_fraction..=*max_fraction),
            },
            CandidateKind::Brightness { max_delta } => Transform::Brightness {
                delta: self.rng.gen_range(-max_delta..=*max_delta),
            },
            CandidateKind::Contrast { min_factor, max_factor } => Transform::Contrast {
                factor: self.rng.gen_range(*min_factor..=*max_factor),
            },
            CandidateKind::GaussNoise { max_std } => Transform::GaussNoise {
                std: self.rng.gen_range(0.0..=*max_std),
                seed: self.rng.gen(),
            },
            CandidateKind::Cutout { n_holes, hole_size } => {
                let size = *hole_size.min(&h).min(&w);
                let corners = (0..*n_holes)
                    .map(|_| {
                        (
                            self.rng.gen_range(0..=h - size),
                            self.rng.gen_range(0..=w - size),
                        )
                    })
                    .collect();
                Transform::Cutout { corners, size }
            }
            CandidateKind::Shift { max_pixels } => {
                let m = *max_pixels as i64;
                Transform::Shift {
                    dx: self.rng.gen_range(-m..=m),
                    dy: self.rng.gen_range(-m..=m),
                }
            }
            CandidateKind::Scale { min_factor, max_factor } => Transform::Scale {
                factor: self.rng.gen_range(*min_factor..=*max_factor),
            },
        }
    }

    /// Applies each candidate independently with its probability, forcing
    /// extra draws so at least `min_applied` transforms run.
    pub fn sample_augmentation<S: Scalar>(&mut self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (applied, out) = self.sample_augmentation_traced(image)?;
        debug_assert!(applied >= self.min_applied);
        Ok(out)
    }

    pub fn sample_augmentation_traced<S: Scalar>(
        &mut self,
        image: &Tensor<S>,
    ) -> Result<(usize, Tensor<S>)> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mut out = image.clone();
        let mut applied = 0usize;
        for i in 0..self.candidates.len() {
            let p = self.candidates[i].probability;
            if self.rng.gen_range(0.0..1.0) < p {
                let kind = self.candidates[i].kind.clone();
                let t = self.resolve(&kind, h, w);
                out = apply(&t, &out)?;
                applied += 1;
            }
        }
        while applied < self.min_applied {
            let i = self.rng.gen_range(0..self.candidates.len());
            let kind = self.candidates[i].kind.clone();
            let t = self.resolve(&kind, h, w);
            out = apply(&t, &out)?;
            applied += 1;
        }
        Ok((applied, out))
    }
}

/// Default TTA set: identity plus the flip/transpose/rotate group. Zoom is
/// deliberately excluded: cropping changes global intensity statistics that
/// grading models rely on, so it is opt-in rather than a default.
pub fn default_tta_kinds() -> Vec<Transform> {
    vec![
        Transform::HFlip,
        Transform::VFlip,
        Transform::Transpose,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
    ]
}

/// Builds the ordered deterministic TTA list. Identity is always element 0;
/// the configured order is preserved otherwise.
pub fn tta_set(config: &[Transform]) -> Result<Vec<Transform>> {
    let mut out = vec![Transform::Identity];
    for t in config {
        if !t.is_deterministic() {
            return Err(Error::Config(format!(
                "transform `{}` has random parameters and cannot be used for TTA",
                t.name()
            )));
        }
        if let Transform::Zoom { fraction } = t {
            if *fraction <= 0.0 || *fraction > 1.0 {
                return Err(Error::Config(format!("zoom fraction {fraction} not in (0,1]")));
            }
        }
        if *t != Transform::Identity {
            out.push(t.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> Tensor<f64> {
        // Asymmetric gradient pattern; distinct under every dihedral op.
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    t.data_mut()[(c * h + y) * w + x] =
                        ((c + 1) * (y * w + x * x + 3)) as f64 % 97.0 / 97.0;
                }
            }
        }
        t
    }

    #[test]
    fn hflip_is_involution() {
        let img = test_image(16, 16);
        let once = apply(&Transform::HFlip, &img).unwrap();
        let twice = apply(&Transform::HFlip, &once).unwrap();
        assert_eq!(img, twice);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let img = test_image(16, 16);
        let mut t = img.clone();
        for _ in 0..4 {
            t = apply(&Transform::Rot90, &t).unwrap();
        }
        assert_eq!(img, t);
    }

    #[test]
    fn rot270_is_rot90_cubed() {
        let img = test_image(16, 16);
        let mut r = img.clone();
        for _ in 0..3 {
            r = apply(&Transform::Rot90, &r).unwrap();
        }
        assert_eq!(r, apply(&Transform::Rot270, &img).unwrap());
    }

    #[test]
    fn cutout_zeroes_exact_pixel_count() {
        let mut img = Tensor::<f64>::zeros(&[3, 64, 64]);
        img.data_mut().fill(1.0);
        let t = Transform::Cutout { corners: vec![(10, 20)], size: 8 };
        let out = apply(&t, &img).unwrap();
        let zeroed = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 64 * 3);
    }

    #[test]
    fn zoom_rejects_bad_fraction() {
        let img = test_image(16, 16);
        assert!(apply(&Transform::Zoom { fraction: 0.0 }, &img).is_err());
        assert!(apply(&Transform::Zoom { fraction: 1.5 }, &img).is_err());
    }

    #[test]
    fn flips_commute_with_brightness() {
        let img = test_image(12, 12);
        let b = Transform::Brightness { delta: 0.13 };
        let a1 = apply(&Transform::HFlip, &apply(&b, &img).unwrap()).unwrap();
        let a2 = apply(&b, &apply(&Transform::HFlip, &img).unwrap()).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn identity_only_policy_is_identity() {
        let img = test_image(16, 16);
        let mut policy = AugmentPolicy::new(
            vec![CandidateSpec { kind: CandidateKind::Identity, probability: 1.0 }],
            1,
            0,
        )
        .unwrap();
        let out = policy.sample_augmentation(&img).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn policy_is_reproducible_per_seed() {
        let img = test_image(32, 32);
        let mut p1 = AugmentPolicy::default_training(99);
        let mut p2 = AugmentPolicy::default_training(99);
        for _ in 0..5 {
            let a = p1.sample_augmentation(&img).unwrap();
            let b = p2.sample_augmentation(&img).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(AugmentPolicy::new(vec![], 1, 0).is_err());
    }

    #[test]
    fn application_rate_near_probability() {
        // 6 candidates at p = 0.5 over 1000 draws; the >=1 forcing rule
        // perturbs the rate by < 0.003, well inside 3 sigma.
        let kinds = [
            CandidateKind::HFlip,
            CandidateKind::VFlip,
            CandidateKind::Transpose,
            CandidateKind::Rotate,
            CandidateKind::Brightness { max_delta: 0.05 },
            CandidateKind::Contrast { min_factor: 0.9, max_factor: 1.1 },
        ];
        let candidates: Vec<_> = kinds
            .iter()
            .map(|k| CandidateSpec { kind: k.clone(), probability: 0.5 })
            .collect();
        let mut policy = AugmentPolicy::new(candidates, 1, 2024).unwrap();
        let img = test_image(8, 8);
        let n = 1000;
        let mut total_applied = 0usize;
        for _ in 0..n {
            let (applied, _) = policy.sample_augmentation_traced(&img).unwrap();
            assert!(applied >= 1);
            total_applied += applied;
        }
        let rate = total_applied as f64 / (n as f64 * 6.0);
        let sigma = (0.25 / (n as f64 * 6.0)).sqrt();
        assert!((rate - 0.5).abs() <= 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn tta_default_set_shape() {
        let set = tta_set(&default_tta_kinds()).unwrap();
        assert_eq!(set.len(), 7);
        assert_eq!(set[0], Transform::Identity);
        assert_eq!(set[6], Transform::Rot270);
    }

    #[test]
    fn tta_empty_config_is_identity_only() {
        let set = tta_set(&[]).unwrap();
        assert_eq!(set, vec![Transform::Identity]);
    }

    #[test]
    fn tta_rejects_random_kinds() {
        assert!(tta_set(&[Transform::GaussNoise { std: 0.1, seed: 0 }]).is_err());
    }

    #[test]
    fn tta_transforms_pairwise_distinct_on_asymmetric_image() {
        let img = test_image(16, 16);
        let set = tta_set(&default_tta_kinds()).unwrap();
        let outputs: Vec<_> = set.iter().map(|t| apply(t, &img).unwrap()).collect();
        for i in 0..outputs.len() {
            for j in (i + 1)..outputs.len() {
                assert_ne!(outputs[i], outputs[j], "{i} vs {j}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn augmented_outputs_stay_in_unit_range(seed in 0u64..1000) {
                let mut policy = AugmentPolicy::default_training(seed);
                let img = test_image(16, 16);
                let out = policy.sample_augmentation(&img).unwrap();
                prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            }
        }
    }
}
