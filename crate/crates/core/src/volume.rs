//! Intensity volumes, HU windowing and artifact-slice classification.

use std::fmt;

use ndarray::{Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Kvct,
    Mvct,
}

impl Modality {
    /// Normalisation window used when none is given explicitly.
    pub fn default_window(self) -> HuWindow {
        match self {
            Modality::Kvct => HuWindow { min: -1024.0, max: 3071.0 },
            Modality::Mvct => HuWindow { min: -1024.0, max: 2000.0 },
        }
    }

    /// Slices holding any voxel above this value are artifact slices.
    pub fn artifact_threshold(self) -> f64 {
        match self {
            Modality::Kvct => 2000.0,
            Modality::Mvct => 1000.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Modality::Kvct => 0,
            Modality::Mvct => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Kvct),
            1 => Some(Modality::Mvct),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Kvct => "kvct",
            Modality::Mvct => "mvct",
        })
    }
}

/// Closed HU interval mapped linearly onto [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuWindow {
    pub min: f64,
    pub max: f64,
}

impl HuWindow {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min >= max {
            return Err(Error::Config(format!("invalid HU window [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    /// HU to [-1, 1], clipping outside the window.
    pub fn normalize(&self, hu: f64) -> f64 {
        (2.0 * (hu - self.min) / self.span() - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, n: f64) -> f64 {
        (n + 1.0) * 0.5 * self.span() + self.min
    }

    /// Size of one HU in normalised units.
    pub fn scale(&self) -> f64 {
        2.0 / self.span()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    Hu,
    Normalized,
}

/// A (C, D, H, W) intensity volume with its calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array4<f32>,
    pub modality: Modality,
    pub window: HuWindow,
    pub units: Units,
    pub id: String,
}

impl Volume {
    /// Wraps HU data. H and W must be even; D at least 1.
    pub fn from_hu(data: Array4<f32>, modality: Modality, window: HuWindow) -> Result<Self> {
        Self::new(data, modality, window, Units::Hu)
    }

    pub fn new(data: Array4<f32>, modality: Modality, window: HuWindow, units: Units) -> Result<Self> {
        let (c, d, h, w) = data.dim();
        if c == 0 || d == 0 || h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("volume dims ({c},{d},{h},{w}) must be non-empty with even H and W")));
        }
        HuWindow::new(window.min, window.max)?;
        Ok(Self { data, modality, window, units, id: String::new() })
    }

    /// Single-channel HU volume from a (D, H, W) array, using the default window.
    pub fn from_hu3(data: Array3<f32>, modality: Modality) -> Result<Self> {
        Self::from_hu(data.insert_axis(Axis(0)), modality, modality.default_window())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn depth(&self) -> usize {
        self.data.dim().1
    }

    /// First channel as (D, H, W).
    pub fn channel0(&self) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), 0)
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), 0).index_axis_move(Axis(0), z)
    }

    /// Requires H and W divisible by `multiple` and at least 16.
    pub fn check_model_dims(&self, multiple: usize) -> Result<()> {
        let (_, _, h, w) = self.dims();
        if h < 16 || w < 16 || h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Shape(format!("H={h}, W={w} must be >= 16 and divisible by {multiple}")));
        }
        Ok(())
    }

    pub fn normalize_hu(&self) -> Result<Volume> {
        let win = HuWindow::new(self.window.min, self.window.max)?;
        match self.units {
            Units::Normalized => Ok(self.clone()),
            Units::Hu => Ok(Volume {
                data: self.data.mapv(|v| win.normalize(v as f64) as f32),
                units: Units::Normalized,
                ..self.clone()
            }),
        }
    }

    pub fn denormalize_hu(&self) -> Result<Volume> {
        let win = HuWindow::new(self.window.min, self.window.max)?;
        match self.units {
            Units::Hu => Ok(self.clone()),
            Units::Normalized => Ok(Volume {
                data: self.data.mapv(|v| win.denormalize(v as f64) as f32),
                units: Units::Hu,
                ..self.clone()
            }),
        }
    }

    /// Same calibration, different payload.
    pub fn with_data(&self, data: Array4<f32>) -> Result<Volume> {
        Volume::new(data, self.modality, self.window, self.units).map(|v| v.with_id(self.id.clone()))
    }
}

/// Indices of slices with any voxel above the modality's artifact threshold.
pub fn classify_artifact_slices(v: &Volume) -> Vec<usize> {
    let threshold = v.modality.artifact_threshold();
    let to_hu = |x: f32| match v.units {
        Units::Hu => x as f64,
        Units::Normalized => v.window.denormalize(x as f64),
    };
    (0..v.depth())
        .filter(|&z| {
            v.data.index_axis(Axis(1), z).iter().any(|&x| to_hu(x) > threshold)
        })
        .collect()
}
