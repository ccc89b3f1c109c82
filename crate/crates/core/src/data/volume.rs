use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Modality {
    T1,
    T2,
    T1Flair,
    T2Flair,
    Other(String),
}

impl Modality {
    pub fn is_whitelisted(&self) -> bool {
        !matches!(self, Modality::Other(_))
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::T1Flair => "T1FLAIR",
            Modality::T2Flair => "T2FLAIR",
            Modality::Other(s) => s,
        })
    }
}

impl FromStr for Modality {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "T1" => Modality::T1,
            "T2" => Modality::T2,
            "T1FLAIR" => Modality::T1Flair,
            "T2FLAIR" => Modality::T2Flair,
            other => Modality::Other(other.to_string()),
        })
    }
}

impl From<String> for Modality {
    fn from(s: String) -> Self {
        s.parse().expect("infallible")
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> Self {
        m.to_string()
    }
}

/// A multi-channel image volume in C/D/H/W order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    /// Voxel size in mm along (z, y, x).
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    pub modality: Modality,
    pub source: String,
}

impl Volume {
    pub fn new(
        channels: usize,
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f32>,
        modality: Modality,
        source: impl Into<String>,
    ) -> Result<Self> {
        let v = Volume {
            channels,
            dims,
            spacing,
            data,
            modality,
            source: source.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "volume {}: channels {} dims {:?} must be >= 1",
                self.source, self.channels, self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("volume {}: spacing {:?} must be > 0", self.source, self.spacing)));
        }
        if self.data.len() != self.channels * self.voxels() {
            return Err(Error::shape("Volume data", self.channels * self.voxels(), self.data.len()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Physical extent per axis in mm.
    pub fn fov(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn to_tensor(&self) -> Tensor5<f32> {
        let [d, h, w] = self.dims;
        Tensor5::from_vec(Shape5::new(1, self.channels, d, h, w), self.data.clone()).expect("validated volume")
    }

    /// Single-channel view of channel `c`.
    pub fn select_channel(&self, c: usize) -> Volume {
        Volume {
            channels: 1,
            data: self.channel(c).to_vec(),
            ..self.clone()
        }
    }
}
