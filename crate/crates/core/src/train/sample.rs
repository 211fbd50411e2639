use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training-time random transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Independent flip probability per spatial axis.
    pub flip_prob: f64,
    /// Probability of the intensity transform `x·u + v`.
    pub intensity_prob: f64,
    pub scale: [f32; 2],
    pub shift: [f32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, intensity_prob: 0.2, scale: [0.9, 1.1], shift: [-0.1, 0.1] }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("intensity_prob", self.intensity_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment: {name} must lie in [0, 1], got {p}")));
            }
        }
        if self.scale[0] > self.scale[1] || self.shift[0] > self.shift[1] {
            return Err(Error::Config("augment: scale and shift ranges must be ordered".into()));
        }
        Ok(())
    }
}

/// Balanced crop sampling for one case, with its foreground and background
/// voxel lists precomputed.
pub struct CropSampler<'a> {
    image: &'a Tensor<f32>,
    mask: &'a Tensor<f32>,
    extents: [usize; 3],
    foreground: Vec<usize>,
    background: Vec<usize>,
}

/// A sampled window: stacked image and mask crops.
pub struct Crop {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub positive: bool,
}

impl<'a> CropSampler<'a> {
    /// `image` is `[C_in, D, H, W]`, `mask` is `[C_out, D, H, W]`; a voxel is
    /// foreground when any mask channel is set there.
    pub fn new(image: &'a Tensor<f32>, mask: &'a Tensor<f32>) -> Result<Self> {
        let (si, sm) = (image.shape(), mask.shape());
        if si.len() != 4 || sm.len() != 4 || si[1..] != sm[1..] {
            return Err(Error::Data(format!("crop: image {si:?} and mask {sm:?} must be [C, D, H, W] on one grid")));
        }
        let extents = [si[1], si[2], si[3]];
        let n: usize = extents.iter().product();
        let (mut foreground, mut background) = (Vec::new(), Vec::new());
        for v in 0..n {
            if (0..sm[0]).any(|c| mask.data()[c * n + v] > 0.5) {
                foreground.push(v);
            } else {
                background.push(v);
            }
        }
        Ok(CropSampler { image, mask, extents, foreground, background })
    }

    /// Centres the crop on a foreground voxel with probability 1/2 and on a
    /// background voxel otherwise. The window is shifted to stay inside the
    /// volume; axes shorter than the crop are zero-padded at the far end.
    pub fn sample<R: Rng>(&self, crop: [usize; 3], rng: &mut R) -> Crop {
        let want_positive = rng.random_bool(0.5);
        let positive = want_positive && !self.foreground.is_empty();
        if want_positive && !positive {
            log::warn!("crop: case has an empty mask, using a background-centred crop");
        }
        let pool = if positive || self.background.is_empty() { &self.foreground } else { &self.background };
        let centre = pool[rng.random_range(0..pool.len())];
        let [_, h, w] = self.extents;
        let c = [centre / (h * w), (centre / w) % h, centre % w];
        let origin: [usize; 3] = std::array::from_fn(|a| {
            let e = self.extents[a];
            if e <= crop[a] {
                0
            } else {
                c[a].saturating_sub(crop[a] / 2).min(e - crop[a])
            }
        });
        Crop { image: extract(self.image, origin, crop), mask: extract(self.mask, origin, crop), positive }
    }
}

/// Copies the `[C, crop]` window at `origin`, zero-filling outside the source.
pub fn extract(src: &Tensor<f32>, origin: [usize; 3], crop: [usize; 3]) -> Tensor<f32> {
    let s = src.shape();
    let (ch, e) = (s[0], [s[1], s[2], s[3]]);
    let mut out = Tensor::zeros(vec![ch, crop[0], crop[1], crop[2]]);
    let data = out.data_mut();
    for c in 0..ch {
        for z in 0..crop[0] {
            let sz = origin[0] + z;
            if sz >= e[0] {
                break;
            }
            for y in 0..crop[1] {
                let sy = origin[1] + y;
                if sy >= e[1] {
                    break;
                }
                let len = crop[2].min(e[2].saturating_sub(origin[2]));
                let from = ((c * e[0] + sz) * e[1] + sy) * e[2] + origin[2];
                let to = ((c * crop[0] + z) * crop[1] + y) * crop[2];
                data[to..to + len].copy_from_slice(&src.data()[from..from + len]);
            }
        }
    }
    out
}

/// Reverses a `[C, D, H, W]` tensor along spatial axis `axis` (0 = depth).
pub fn flip(t: &mut Tensor<f32>, axis: usize) {
    let s = t.shape().to_vec();
    let e = [s[1], s[2], s[3]];
    let src = t.data().to_vec();
    let data = t.data_mut();
    for c in 0..s[0] {
        for z in 0..e[0] {
            for y in 0..e[1] {
                for x in 0..e[2] {
                    let mut p = [z, y, x];
                    p[axis] = e[axis] - 1 - p[axis];
                    let from = ((c * e[0] + p[0]) * e[1] + p[1]) * e[2] + p[2];
                    data[((c * e[0] + z) * e[1] + y) * e[2] + x] = src[from];
                }
            }
        }
    }
}

/// Random per-axis flips of image and mask together, then with probability
/// `intensity_prob` a per-channel `x·u + v` on the image alone.
pub fn augment<R: Rng>(image: &mut Tensor<f32>, mask: &mut Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) {
    for axis in 0..3 {
        if rng.random_bool(cfg.flip_prob) {
            flip(image, axis);
            flip(mask, axis);
        }
    }
    if rng.random_bool(cfg.intensity_prob) {
        let channels = image.shape()[0];
        let per = image.numel() / channels;
        for c in 0..channels {
            let u = rng.random_range(cfg.scale[0]..=cfg.scale[1]);
            let v = rng.random_range(cfg.shift[0]..=cfg.shift[1]);
            for x in &mut image.data_mut()[c * per..][..per] {
                *x = *x * u + v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case() -> (Tensor<f32>, Tensor<f32>) {
        let image = Tensor::from_fn(vec![2, 12, 10, 8], |i| i as f32);
        let mask = Tensor::from_fn(vec![1, 12, 10, 8], |i| {
            let (z, y, x) = (i / 80, (i / 8) % 10, i % 8);
            (z < 3 && y < 3 && x < 3) as u8 as f32
        });
        (image, mask)
    }

    #[test]
    fn positive_fraction_is_balanced() {
        let (image, mask) = case();
        let sampler = CropSampler::new(&image, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positives = (0..1000).filter(|_| sampler.sample([4, 4, 4], &mut rng).positive).count();
        assert!((450..=550).contains(&positives), "{positives}");
    }

    #[test]
    fn positive_crops_contain_foreground() {
        let (image, mask) = case();
        let sampler = CropSampler::new(&image, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let c = sampler.sample([4, 4, 4], &mut rng);
            if c.positive {
                assert!(c.mask.data().iter().any(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn empty_mask_gives_background_crops() {
        let (image, _) = case();
        let mask = Tensor::zeros(vec![1, 12, 10, 8]);
        let sampler = CropSampler::new(&image, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..50).all(|_| !sampler.sample([4, 4, 4], &mut rng).positive));
    }

    #[test]
    fn inside_crop_is_the_source_subarray() {
        let (image, mask) = case();
        let sampler = CropSampler::new(&image, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let c = sampler.sample([4, 6, 8], &mut rng);
            // Recover the origin from the first voxel value of channel 0.
            let first = c.image.data()[0] as usize;
            let o = [first / 80, (first / 8) % 10, first % 8];
            for ch in 0..2 {
                for z in 0..4 {
                    for y in 0..6 {
                        for x in 0..8 {
                            let src = ((ch * 12 + o[0] + z) * 10 + o[1] + y) * 8 + o[2] + x;
                            assert_eq!(c.image.data()[((ch * 4 + z) * 6 + y) * 8 + x], image.data()[src]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn small_volume_is_zero_padded() {
        let image = Tensor::full(vec![1, 2, 2, 2], 1.0);
        let mask = Tensor::full(vec![1, 2, 2, 2], 1.0);
        let c = CropSampler::new(&image, &mask).unwrap().sample([4, 2, 2], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.image.data().iter().sum::<f32>(), 8.0);
        assert_eq!(c.image.data()[8..], [0.0; 8]);
    }

    #[test]
    fn flip_is_an_involution() {
        let (mut image, _) = case();
        let orig = image.clone();
        for axis in 0..3 {
            flip(&mut image, axis);
            assert_ne!(image, orig);
            flip(&mut image, axis);
            assert_eq!(image, orig);
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let (mut image, mut mask) = case();
        let (i0, m0) = (image.clone(), mask.clone());
        let cfg = AugmentConfig { flip_prob: 0.0, intensity_prob: 0.0, ..AugmentConfig::default() };
        augment(&mut image, &mut mask, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(image, i0);
        assert_eq!(mask, m0);
    }

    proptest! {
        #[test]
        fn masks_stay_binary_and_aligned(seed in any::<u64>()) {
            let (mut image, mut mask) = case();
            let cfg = AugmentConfig { flip_prob: 0.5, intensity_prob: 1.0, ..AugmentConfig::default() };
            // Tie the image to the mask so that joint flips can be checked.
            image.data_mut()[..960].copy_from_slice(mask.data());
            augment(&mut image, &mut mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let lo = image.data()[..960].iter().cloned().fold(f32::INFINITY, f32::min);
            for (i, &m) in mask.data().iter().enumerate() {
                prop_assert_eq!(m == 1.0, image.data()[i] > lo);
            }
        }
    }
}
