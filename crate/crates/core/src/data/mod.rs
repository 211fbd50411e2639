//! Volume files, case records, manifests with dataset splits, and the
//! synthetic phantom generator.

mod manifest;
mod phantom;
mod volume;

pub use manifest::{split_counts, split_dataset, Manifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, phantom_lesions, write_phantom_dataset, Lesion, PhantomSpec};
pub use volume::{decode_volume, encode_volume, read_volume, write_volume, Volume, VOLUME_MAGIC, VOLUME_VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One patient: co-indexed modality volumes and their lesion masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub images: Vec<Volume>,
    pub masks: Vec<Volume>,
    pub split: Split,
}

impl CaseRecord {
    /// Checks that every mask is binary and shares extents and spacing with its image.
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.masks.len() {
            return Err(Error::Data(format!(
                "case {}: {} images but {} masks",
                self.id,
                self.images.len(),
                self.masks.len()
            )));
        }
        let extents = self.images[0].extents;
        for (i, (img, mask)) in self.images.iter().zip(&self.masks).enumerate() {
            if img.extents != extents {
                return Err(Error::Data(format!("case {}: modality {i} extents {:?} differ from {extents:?}", self.id, img.extents)));
            }
            if mask.extents != img.extents || mask.spacing != img.spacing {
                return Err(Error::Data(format!("case {}: mask {i} geometry differs from its image", self.id)));
            }
            if mask.voxels.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("case {}: mask {i} is not binary", self.id)));
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> [usize; 3] {
        self.images[0].extents
    }

    /// Images stacked as `[C_in, D, H, W]`.
    pub fn image_tensor(&self) -> Result<Tensor<f32>> {
        stack_volumes(&self.images)
    }

    /// Masks stacked as `[C_out, D, H, W]`.
    pub fn mask_tensor(&self) -> Result<Tensor<f32>> {
        stack_volumes(&self.masks)
    }
}

/// Stacks equally sized volumes as `[N, D, H, W]`.
pub fn stack_volumes(vols: &[Volume]) -> Result<Tensor<f32>> {
    let [d, h, w] = vols.first().ok_or_else(|| Error::Data("no volumes to stack".into()))?.extents;
    let mut data = Vec::with_capacity(vols.len() * d * h * w);
    for v in vols {
        if v.extents != [d, h, w] {
            return Err(Error::Data(format!("cannot stack extents {:?} with {:?}", v.extents, [d, h, w])));
        }
        data.extend_from_slice(&v.voxels);
    }
    Tensor::new(vec![vols.len(), d, h, w], data)
}
