use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{split_dataset, write_volume, CaseRecord, Manifest, ManifestEntry, Split, Volume};
use crate::error::{Error, Result};

/// Recipe for synthetic multimodal cases with ellipsoidal lesions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub modalities: usize,
    /// Inclusive range of the lesion count.
    pub lesions: [usize; 2],
    /// Range of the per-axis semi-axis length, in voxels.
    pub radius: [f64; 2],
    /// Background level per modality.
    pub intensity: Vec<f32>,
    /// Lesion minus background per modality.
    pub contrast: Vec<f32>,
    /// Rigid integer shift of each modality, emulating misregistration.
    pub offsets: Vec<[i32; 3]>,
    pub noise: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [32, 32, 16],
            spacing: [1.0; 3],
            modalities: 2,
            lesions: [1, 2],
            radius: [2.5, 5.0],
            intensity: vec![0.0, 0.2],
            contrast: vec![1.0, -0.8],
            offsets: vec![[0, 0, 0], [1, 1, 0]],
            noise: 0.1,
        }
    }
}

/// An axis-aligned ellipsoid in the frame of the first modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Lesion {
    pub fn contains(&self, p: [usize; 3], offset: [i32; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - offset[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.modalities == 0 {
            return fail("at least one modality is required".into());
        }
        for (name, len) in [("intensity", self.intensity.len()), ("contrast", self.contrast.len()), ("offsets", self.offsets.len())] {
            if len != self.modalities {
                return fail(format!("{name} has {len} entries for {} modalities", self.modalities));
            }
        }
        if self.lesions[0] > self.lesions[1] {
            return fail(format!("lesion range {:?} is empty", self.lesions));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return fail(format!("radius range {:?} must be positive and ordered", self.radius));
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Spacing(self.spacing));
        }
        for axis in 0..3 {
            if self.max_radius(axis) < self.radius[0] {
                return fail(format!(
                    "a lesion of radius {} does not fit axis {axis} of extent {} with offsets {:?}",
                    self.radius[0], self.extents[axis], self.offsets
                ));
            }
        }
        Ok(())
    }

    fn offset_range(&self, axis: usize) -> (f64, f64) {
        let it = self.offsets.iter().map(|o| o[axis] as f64);
        (it.clone().fold(f64::INFINITY, f64::min), it.fold(f64::NEG_INFINITY, f64::max))
    }

    /// Largest semi-axis along `axis` that stays inside the volume under every offset.
    fn max_radius(&self, axis: usize) -> f64 {
        let (lo, hi) = self.offset_range(axis);
        (self.extents[axis] as f64 - 1.0 - (hi - lo)) / 2.0
    }

    pub fn label(&self, m: usize) -> String {
        format!("modality-{m}")
    }
}

/// The lesions of the case generated by [`generate_phantom`] with the same seed.
pub fn phantom_lesions(spec: &PhantomSpec, seed: u64) -> Result<Vec<Lesion>> {
    spec.validate()?;
    Ok(sample_lesions(spec, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn sample_lesions(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Lesion> {
    let count = rng.random_range(spec.lesions[0]..=spec.lesions[1]);
    (0..count)
        .map(|_| {
            let radii: [f64; 3] = std::array::from_fn(|a| {
                let r = if spec.radius[0] < spec.radius[1] { rng.random_range(spec.radius[0]..spec.radius[1]) } else { spec.radius[0] };
                r.min(spec.max_radius(a))
            });
            let center = std::array::from_fn(|a| {
                let (lo_off, hi_off) = spec.offset_range(a);
                let lo = radii[a] - lo_off;
                let hi = spec.extents[a] as f64 - 1.0 - radii[a] - hi_off;
                if lo < hi { rng.random_range(lo..=hi) } else { lo }
            });
            Lesion { center, radii }
        })
        .collect()
}

/// Builds one synthetic case: a smooth per-modality background, lesions of
/// per-modality contrast shifted by each modality's rigid offset, and
/// Gaussian noise. Masks mark exactly the shifted lesion voxels.
pub fn generate_phantom(spec: &PhantomSpec, id: &str, seed: u64) -> Result<CaseRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesions = sample_lesions(spec, &mut rng);
    let noise = Normal::new(0.0f32, spec.noise).map_err(|e| Error::Config(format!("phantom: {e}")))?;
    let [d, h, w] = spec.extents;
    let mut images = Vec::with_capacity(spec.modalities);
    let mut masks = Vec::with_capacity(spec.modalities);
    for m in 0..spec.modalities {
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let mut image = Volume::zeros(spec.extents, spec.spacing, spec.label(m));
        let mut mask = Volume::zeros(spec.extents, spec.spacing, format!("{}-mask", spec.label(m)));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = image.index(z, y, x);
                    let texture = 0.1
                        * ((z as f64 * 0.3 + phase[0]).sin() + (y as f64 * 0.25 + phase[1]).sin() + (x as f64 * 0.2 + phase[2]).sin())
                        / 3.0;
                    let inside = lesions.iter().any(|l| l.contains([z, y, x], spec.offsets[m]));
                    let mut v = spec.intensity[m] + texture as f32;
                    if inside {
                        v += spec.contrast[m];
                        mask.voxels[i] = 1.0;
                    }
                    if spec.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    image.voxels[i] = v;
                }
            }
        }
        images.push(image);
        masks.push(mask);
    }
    let case = CaseRecord { id: id.to_string(), images, masks, split: Split::Unassigned };
    case.validate()?;
    Ok(case)
}

/// Per-case seed derived from the dataset seed.
fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Writes `n` phantom cases under `dir` plus a split `manifest.txt`.
pub fn write_phantom_dataset(dir: &Path, n: usize, spec: &PhantomSpec, seed: u64) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("case-{i:03}");
        let case = generate_phantom(spec, &id, case_seed(seed, i))?;
        std::fs::create_dir_all(dir.join(&id))?;
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for m in 0..spec.modalities {
            let img: PathBuf = [id.as_str(), &format!("image{m}.hwav")].iter().collect();
            let msk: PathBuf = [id.as_str(), &format!("mask{m}.hwav")].iter().collect();
            write_volume(&dir.join(&img), &case.images[m])?;
            write_volume(&dir.join(&msk), &case.masks[m])?;
            images.push(img);
            masks.push(msk);
        }
        entries.push(ManifestEntry { id, split: Split::Unassigned, images, masks });
    }
    let manifest = split_dataset(&Manifest { seed, entries, base: dir.to_path_buf() }, seed);
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
