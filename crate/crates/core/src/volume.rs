//! Domain types shared across the pipeline.
//!
//! Volumes are channels-first `(C, D, H, W)`; logits and one-hot encodings
//! are channels-last `(D, H, W, K)`. All arrays are flat C-order buffers.

use serde::{Deserialize, Serialize};
pub use voxshield_tensor::Dims3;

use crate::error::{Error, Result};

/// Logical extent of a channels-first volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeShape {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeShape {
    pub fn new(channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            depth,
            height,
            width,
        }
    }

    pub fn dims(&self) -> Dims3 {
        Dims3::new(self.depth, self.height, self.width)
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.channels, self.depth, self.height, self.width]
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidShape("volume needs at least one channel".into()));
        }
        if self.depth < 2 || self.height < 2 || self.width < 2 {
            return Err(Error::InvalidShape(format!(
                "spatial extents must be >= 2, got {}x{}x{}",
                self.depth, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn check_unit_range(data: &[f32], what: &str) -> Result<()> {
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::OutOfRange(format!("{what}[{i}] = {v} is outside [0, 1]")));
    }
    Ok(())
}

/// A clean image volume with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    shape: VolumeShape,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, shape: VolumeShape, data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(id, shape, [1.0; 3], data)
    }

    pub fn with_spacing(
        id: impl Into<String>,
        shape: VolumeShape,
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                shape.as_array()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::OutOfRange(format!("spacing must be positive, got {spacing:?}")));
        }
        check_unit_range(&data, "volume")?;
        Ok(Self {
            id: id.into(),
            shape,
            spacing,
            data,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One `(H, W)` slice of one channel.
    pub fn slice(&self, channel: usize, z: usize) -> &[f32] {
        let plane = self.shape.height * self.shape.width;
        let start = channel * self.shape.voxels() + z * plane;
        &self.data[start..start + plane]
    }
}

/// Per-voxel integer class annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims3,
    num_classes: usize,
    classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims3, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::OutOfRange(format!("num_classes must be in 2..=256, got {num_classes}")));
        }
        if classes.len() != dims.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for grid {dims:?}",
                classes.len()
            )));
        }
        if let Some(v) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::OutOfRange(format!("label {v} >= num_classes {num_classes}")));
        }
        Ok(Self {
            dims,
            num_classes,
            classes,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    /// Binary mask of voxels carrying `class`.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.classes.iter().map(|&c| c == class).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }

    pub fn matches(&self, shape: VolumeShape) -> bool {
        self.dims == shape.dims()
    }
}

/// Expands a label map into a channels-last `(D, H, W, K)` indicator array.
pub fn one_hot(label: &LabelMap) -> Vec<f32> {
    let k = label.num_classes;
    let mut out = vec![0.0f32; label.classes.len() * k];
    for (v, &c) in label.classes.iter().enumerate() {
        out[v * k + c as usize] = 1.0;
    }
    out
}

/// Element-wise projection onto `[0, 1]`. NaN is rejected.
pub fn clamp_unit(data: &[f32]) -> Result<Vec<f32>> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::NotANumber("clamp_unit input"));
    }
    Ok(data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// The additive noise `delta`, bounded by `epsilon` in the max norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    shape: VolumeShape,
    epsilon: f32,
    delta: Vec<f32>,
}

impl PerturbationField {
    pub fn new(shape: VolumeShape, epsilon: f32, delta: Vec<f32>) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::OutOfRange(format!("epsilon must be positive, got {epsilon}")));
        }
        if delta.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {:?}",
                delta.len(),
                shape.as_array()
            )));
        }
        if delta.iter().any(|v| v.is_nan()) {
            return Err(Error::NotANumber("perturbation"));
        }
        let max = delta.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if max as f64 > epsilon as f64 + 1e-9 {
            return Err(Error::OutOfRange(format!("|delta| = {max} exceeds epsilon {epsilon}")));
        }
        Ok(Self {
            shape,
            epsilon,
            delta,
        })
    }

    pub fn zeros(shape: VolumeShape, epsilon: f32) -> Result<Self> {
        Self::new(shape, epsilon, vec![0.0; shape.len()])
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn delta(&self) -> &[f32] {
        &self.delta
    }

    pub fn max_abs(&self) -> f32 {
        self.delta.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Binary region-of-interest mask over the spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    dims: Dims3,
    mask: Vec<u8>,
}

impl RoiMask {
    pub fn new(dims: Dims3, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != dims.voxels() {
            return Err(Error::ShapeMismatch(format!("{} mask values for {dims:?}", mask.len())));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::OutOfRange("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, mask })
    }

    pub fn ones(dims: Dims3) -> Self {
        Self {
            dims,
            mask: vec![1; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| m as f32).collect()
    }
}

/// A released volume: `clamp_unit(x + delta)` plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectedVolume {
    id: String,
    shape: VolumeShape,
    spacing: [f32; 3],
    data: Vec<f32>,
    source_id: String,
    generator_fingerprint: Option<String>,
}

impl ProtectedVolume {
    /// Applies `delta` to `source`, enforcing the budget and the unit range.
    pub fn protect(
        source: &Volume,
        delta: &PerturbationField,
        generator_fingerprint: Option<String>,
    ) -> Result<Self> {
        if delta.shape() != source.shape() {
            return Err(Error::ShapeMismatch(format!(
                "perturbation {:?} vs volume {:?}",
                delta.shape().as_array(),
                source.shape().as_array()
            )));
        }
        let summed: Vec<f32> = source
            .data()
            .iter()
            .zip(delta.delta())
            .map(|(x, d)| x + d)
            .collect();
        let data = clamp_unit(&summed)?;
        Ok(Self {
            id: source.id().to_string(),
            shape: source.shape(),
            spacing: source.spacing(),
            data,
            source_id: source.id().to_string(),
            generator_fingerprint,
        })
    }

    /// Rebuilds a protected volume from stored data. The budget cannot be
    /// checked without the source; see [`ProtectedVolume::max_deviation`].
    pub fn from_stored(
        image: Volume,
        source_id: impl Into<String>,
        generator_fingerprint: Option<String>,
    ) -> Self {
        Self {
            id: image.id,
            shape: image.shape,
            spacing: image.spacing,
            data: image.data,
            source_id: source_id.into(),
            generator_fingerprint,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn generator_fingerprint(&self) -> Option<&str> {
        self.generator_fingerprint.as_deref()
    }

    /// `max |x_p - x|` against the clean source.
    pub fn max_deviation(&self, source: &Volume) -> Result<f32> {
        if source.shape() != self.shape {
            return Err(Error::ShapeMismatch("protected vs source".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(source.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    /// The protected image viewed as an ordinary volume (for training victims).
    pub fn to_volume(&self) -> Volume {
        Volume {
            id: self.id.clone(),
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.clone(),
        }
    }
}

/// Channels-last `(D, H, W, K)` network output. Stored in `f64` so loss
/// evaluation and its finite-difference checks are not limited by `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVolume {
    dims: Dims3,
    num_classes: usize,
    logits: Vec<f64>,
}

impl LogitVolume {
    pub fn new(dims: Dims3, num_classes: usize, logits: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::OutOfRange("logits need at least two classes".into()));
        }
        if logits.len() != dims.voxels() * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {dims:?} x {num_classes}",
                logits.len()
            )));
        }
        Ok(Self {
            dims,
            num_classes,
            logits,
        })
    }

    /// Converts a channels-first `(K, D, H, W)` buffer.
    pub fn from_channels_first(dims: Dims3, num_classes: usize, data: &[f32]) -> Result<Self> {
        let n = dims.voxels();
        if data.len() != n * num_classes {
            return Err(Error::ShapeMismatch("channels-first logits".into()));
        }
        let mut logits = vec![0.0f64; data.len()];
        for k in 0..num_classes {
            for v in 0..n {
                logits[v * num_classes + k] = data[k * n + v] as f64;
            }
        }
        Self::new(dims, num_classes, logits)
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|v| v.is_finite())
    }

    /// Per-voxel argmax decode (ties resolve to the lower class index).
    pub fn argmax(&self) -> Vec<u8> {
        self.logits
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Transposes a channels-last `(N, K)` buffer to channels-first `(K, N)`.
pub(crate) fn to_channels_first(data: &[f64], k: usize) -> Vec<f32> {
    let n = data.len() / k;
    let mut out = vec![0.0f32; data.len()];
    for v in 0..n {
        for c in 0..k {
            out[c * n + v] = data[v * k + c] as f32;
        }
    }
    out
}
