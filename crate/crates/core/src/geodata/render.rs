//! PNG rendering of raster bands and label masks.

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use super::raster::BandedRaster;
use super::GeodataError;

/// Maps `v` from `[lo, hi]` onto `0..=255`, rounding half up and clamping.
pub fn to_display_u8(v: f64, lo: f64, hi: f64) -> u8 {
    let t = (v - lo) / (hi - lo) * 255.0;
    if t.is_nan() {
        return 0;
    }
    (t + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Composes three named bands into an RGB image.
pub fn rgb_image(
    raster: &BandedRaster,
    band_names: [&str; 3],
    ranges: [(f64, f64); 3],
) -> Result<RgbImage, GeodataError> {
    let channels =
        [raster.band_values(band_names[0])?, raster.band_values(band_names[1])?, raster.band_values(band_names[2])?];
    let mut buf = Vec::with_capacity(raster.width() * raster.height() * 3);
    for i in 0..raster.width() * raster.height() {
        for (values, &(lo, hi)) in channels.iter().zip(&ranges) {
            buf.push(to_display_u8(values[i] as f64, lo, hi));
        }
    }
    Ok(RgbImage::from_raw(raster.width() as u32, raster.height() as u32, buf).expect("buffer sized to image"))
}

pub fn render_rgb_png(
    raster: &BandedRaster,
    band_names: [&str; 3],
    out: impl AsRef<Path>,
    ranges: [(f64, f64); 3],
) -> Result<(), GeodataError> {
    let img = rgb_image(raster, band_names, ranges)?;
    save_rgb(&img, out)
}

pub fn save_rgb(img: &RgbImage, out: impl AsRef<Path>) -> Result<(), GeodataError> {
    img.save_with_format(out.as_ref(), ImageFormat::Png)
        .map_err(|e| GeodataError::Image { path: out.as_ref().display().to_string(), reason: e.to_string() })
}

pub fn save_gray(img: &GrayImage, out: impl AsRef<Path>) -> Result<(), GeodataError> {
    img.save_with_format(out.as_ref(), ImageFormat::Png)
        .map_err(|e| GeodataError::Image { path: out.as_ref().display().to_string(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::raster::{Band, GeoTransform};
    use proptest::prelude::*;

    fn const_raster(v: f32) -> BandedRaster {
        let bands = ["r", "g", "b"].iter().map(|n| Band { name: n.to_string(), values: vec![v; 6] }).collect();
        BandedRaster::new(3, 2, bands, GeoTransform::IDENTITY).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(to_display_u8(-1.0, -1.0, 1.0), 0);
        assert_eq!(to_display_u8(1.0, -1.0, 1.0), 255);
        assert_eq!(to_display_u8(0.5, 0.0, 1.0), 128);
        assert_eq!(to_display_u8(7.0, 0.0, 1.0), 255);
        assert_eq!(to_display_u8(-7.0, 0.0, 1.0), 0);
    }

    #[test]
    fn constant_bands_at_range_ends() {
        let lo = rgb_image(&const_raster(10.0), ["r", "g", "b"], [(10.0, 20.0); 3]).unwrap();
        assert!(lo.as_raw().iter().all(|&v| v == 0));
        let hi = rgb_image(&const_raster(20.0), ["r", "g", "b"], [(10.0, 20.0); 3]).unwrap();
        assert!(hi.as_raw().iter().all(|&v| v == 255));
        assert_eq!(hi.dimensions(), (3, 2));
    }

    #[test]
    fn unknown_band_is_rejected() {
        let err = rgb_image(&const_raster(0.0), ["r", "g", "nir"], [(0.0, 1.0); 3]).unwrap_err();
        assert!(matches!(err, GeodataError::UnknownBand(ref b) if b == "nir"));
    }

    proptest! {
        #[test]
        fn display_map_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, lo in -5.0f64..0.0, span in 0.1f64..5.0) {
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(to_display_u8(x, lo, lo + span) <= to_display_u8(y, lo, lo + span));
        }
    }
}
