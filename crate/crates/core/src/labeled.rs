//! The 4-channel image+mask sample that every stage passes around.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three color channels plus one mask channel, `[4, H, W]`, values in
/// `[-1, 1]`. The mask channel is `+1` on the label region and `-1` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    tensor: Tensor<f32>,
}

pub const COLOR_CHANNELS: usize = 3;
pub const MASK_CHANNEL: usize = 3;

impl LabeledImage {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        let d = tensor.dims();
        if d.len() != 3 || d[0] != 4 {
            return Err(Error::shape("labeled_image", format!("{d:?}, want [4, H, W]")));
        }
        if tensor.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::invalid("labeled image values must lie in [-1, 1]"));
        }
        Ok(Self { tensor })
    }

    /// Clamps to `[-1, 1]` before validating.
    pub fn from_clamped(tensor: Tensor<f32>) -> Result<Self> {
        Self::new(tensor.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Stacks `[3, H, W]` color and `[1, H, W]` (or `[H, W]`) mask.
    pub fn from_parts(color: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Self> {
        let cd = color.dims();
        if cd.len() != 3 || cd[0] != 3 {
            return Err(Error::shape("labeled_image", format!("color {cd:?}")));
        }
        let plane = cd[1] * cd[2];
        if mask.numel() != plane {
            return Err(Error::shape(
                "labeled_image",
                format!("color {cd:?} vs mask {:?}", mask.dims()),
            ));
        }
        let mut data = color.data().to_vec();
        data.extend_from_slice(mask.data());
        Self::new(Tensor::new(vec![4, cd[1], cd[2]], data)?)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn plane(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.tensor.data()[c * p..(c + 1) * p]
    }

    pub fn color(&self) -> Tensor<f32> {
        let p = self.plane();
        Tensor::from_parts(
            vec![3, self.height(), self.width()],
            self.tensor.data()[..3 * p].to_vec(),
        )
    }

    pub fn mask(&self) -> &[f32] {
        self.channel(MASK_CHANNEL)
    }

    /// Mask as `{0, 1}` with the label region at 1.
    pub fn mask01(&self) -> Vec<f32> {
        self.mask().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
    }

    /// Replaces the mask channel with `±1` thresholded at 0.
    pub fn rebinarize_mask(&self) -> Self {
        let p = self.plane();
        let mut data = self.tensor.data().to_vec();
        for v in &mut data[3 * p..] {
            *v = if *v > 0.0 { 1.0 } else { -1.0 };
        }
        Self {
            tensor: Tensor::from_parts(self.tensor.dims().to_vec(), data),
        }
    }
}

/// A sample with its dataset identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: LabeledImage,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: LabeledImage) -> Self {
        Self {
            id: id.into(),
            image,
        }
    }
}

/// Stacks images into a `[N, 4, H, W]` batch.
pub fn batch<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<Tensor<f32>> {
    let ts: Vec<Tensor<f32>> = images.into_iter().map(|i| i.tensor.clone()).collect();
    Tensor::stack(&ts)
}

/// Hex SHA-256 over the DTF1 encoding of each image, in order.
pub fn hash_images(images: &[LabeledImage]) -> String {
    let mut h = Sha256::new();
    h.update((images.len() as u64).to_le_bytes());
    for img in images {
        h.update(img.tensor.to_dtf1_bytes());
    }
    hex(&h.finalize())
}

/// Like [`hash_images`] but also covers the sample ids.
pub fn hash_samples(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        h.update(s.image.tensor.to_dtf1_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
