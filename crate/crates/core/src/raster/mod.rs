//! Raster types, synthetic scene generation, reduced-resolution degradation,
//! interpolation and the dataset container.

mod dataset;
mod degrade;
mod resample;
mod synth;

pub use dataset::{
    default_root, load_dataset, read_array, save_dataset, write_array, DatasetManifest, Split,
    ARRAY_MAGIC, DATA_ROOT_ENV,
};
pub use degrade::{
    decimate, degrade_pan, mtf_blur, mtf_kernel, mtf_response, wald_degrade, WaldConfig,
};
pub use resample::upsample;
pub use synth::generate_synthetic_scene;

use ndarray::Array3;

use crate::{Error, Result};

/// Sensor conventions used to tag rasters. Values are normalised to [0, 1];
/// the native bit depth is carried as provenance only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sensor {
    /// WorldView-3 style, 8 bands.
    Wv3,
    /// QuickBird style, 4 bands.
    Qb,
    /// GaoFen-2 style, 4 bands.
    Gf2,
}

impl Sensor {
    pub fn bands(self) -> usize {
        match self {
            Sensor::Wv3 => 8,
            Sensor::Qb | Sensor::Gf2 => 4,
        }
    }

    pub fn bit_depth(self) -> u32 {
        match self {
            Sensor::Wv3 | Sensor::Qb => 11,
            Sensor::Gf2 => 10,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Sensor::Wv3 => "wv3",
            Sensor::Qb => "qb",
            Sensor::Gf2 => "gf2",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "wv3" => Ok(Sensor::Wv3),
            "qb" => Ok(Sensor::Qb),
            "gf2" => Ok(Sensor::Gf2),
            other => Err(Error::InvalidArgument(format!("unknown sensor tag `{other}`"))),
        }
    }

    /// Default synthetic stand-in for a band count.
    pub fn for_bands(bands: usize) -> Result<Self> {
        match bands {
            8 => Ok(Sensor::Wv3),
            4 => Ok(Sensor::Qb),
            b => Err(Error::Dimension(format!("unsupported band count {b}, expected 4 or 8"))),
        }
    }
}

/// Multispectral raster, layout bands × height × width, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MsImage {
    data: Array3<f32>,
    sensor: Sensor,
}

impl MsImage {
    pub fn new(data: Array3<f32>, sensor: Sensor) -> Result<Self> {
        let bands = data.dim().0;
        if bands != sensor.bands() {
            return Err(Error::Dimension(format!(
                "sensor `{}` expects {} bands, got {bands}",
                sensor.tag(),
                sensor.bands()
            )));
        }
        check_unit_range(&data, "MS image")?;
        Ok(Self { data, sensor })
    }

    /// Builds an image from data that may have left [0, 1] (network output),
    /// clipping into range. Non-finite values are rejected.
    pub fn from_clipped(mut data: Array3<f32>, sensor: Sensor) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite raster value".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data, sensor)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn sensor(&self) -> Sensor {
        self.sensor
    }

    pub fn sensor_tag(&self) -> &'static str {
        self.sensor.tag()
    }

    pub fn bit_depth(&self) -> u32 {
        self.sensor.bit_depth()
    }

    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Single-band panchromatic raster, layout 1 × height × width.
#[derive(Debug, Clone, PartialEq)]
pub struct PanImage {
    data: Array3<f32>,
    ratio: usize,
}

impl PanImage {
    pub fn new(data: Array3<f32>, ratio: usize) -> Result<Self> {
        if data.dim().0 != 1 {
            return Err(Error::Dimension(format!(
                "PAN must have one band, got {}",
                data.dim().0
            )));
        }
        if ratio < 2 {
            return Err(Error::InvalidArgument(format!("ratio must be >= 2, got {ratio}")));
        }
        check_unit_range(&data, "PAN image")?;
        Ok(Self { data, ratio })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Reduced-resolution training unit: `gt`, `lms` and `pan` are co-registered,
/// `ms` is `ratio` times smaller.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub gt: MsImage,
    pub ms: MsImage,
    pub lms: MsImage,
    pub pan: PanImage,
}

impl SamplePair {
    pub fn new(gt: MsImage, ms: MsImage, lms: MsImage, pan: PanImage) -> Result<Self> {
        let pair = Self { gt, ms, lms, pan };
        pair.validate()?;
        Ok(pair)
    }

    pub fn ratio(&self) -> usize {
        self.pan.ratio()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.gt.height(), self.gt.width());
        let r = self.pan.ratio();
        if (self.lms.height(), self.lms.width()) != (h, w)
            || (self.pan.height(), self.pan.width()) != (h, w)
        {
            return Err(Error::Dimension(format!(
                "gt {h}x{w}, lms {}x{}, pan {}x{} must share spatial size",
                self.lms.height(),
                self.lms.width(),
                self.pan.height(),
                self.pan.width()
            )));
        }
        if self.ms.height() * r != h || self.ms.width() * r != w {
            return Err(Error::Dimension(format!(
                "ms {}x{} is not gt {h}x{w} reduced by {r}",
                self.ms.height(),
                self.ms.width()
            )));
        }
        if self.gt.bands() != self.ms.bands() || self.gt.bands() != self.lms.bands() {
            return Err(Error::Dimension("band count differs within pair".into()));
        }
        Ok(())
    }

    /// Signed diffusion target `gt - lms`.
    pub fn residual(&self) -> Array3<f32> {
        self.gt.data() - self.lms.data()
    }
}

fn check_unit_range(data: &Array3<f32>, what: &str) -> Result<()> {
    if let Some(v) = data
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::InvalidArgument(format!(
            "{what} value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensor_band_convention() {
        assert!(MsImage::new(Array3::zeros((4, 4, 4)), Sensor::Wv3).is_err());
        assert!(MsImage::new(Array3::zeros((8, 4, 4)), Sensor::Wv3).is_ok());
        assert_eq!(Sensor::Gf2.bit_depth(), 10);
        assert_eq!(Sensor::from_tag("WV3").unwrap(), Sensor::Wv3);
    }

    #[test]
    fn rejects_out_of_range() {
        let mut a = Array3::<f32>::zeros((4, 2, 2));
        a[[0, 0, 0]] = 1.5;
        assert!(MsImage::new(a.clone(), Sensor::Qb).is_err());
        let clipped = MsImage::from_clipped(a, Sensor::Qb).unwrap();
        assert_eq!(clipped.data()[[0, 0, 0]], 1.0);
    }
}
