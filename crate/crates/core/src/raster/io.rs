use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, Rational, TiffEncoder};
use tiff::tags::{ResolutionUnit, Tag};
use tiff::{ColorType, TiffError};

use super::{LinearRaster, RasterError, SourceTag};

/// How stored integer samples relate to linear transmittance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// `sample / max`; the name reflects the preferred 16-bit linear capture.
    Linear16,
    /// `(sample / max)^gamma`.
    GammaEncoded(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub encoding: Encoding,
    #[serde(default)]
    pub ppi_override: Option<f64>,
    pub source_tag: SourceTag,
}

impl LoadOptions {
    pub fn linear(source_tag: SourceTag) -> Self {
        Self {
            encoding: Encoding::Linear16,
            ppi_override: None,
            source_tag,
        }
    }
}

/// A decoded raster plus load-time diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedRaster {
    pub raster: LinearRaster,
    /// Fraction of samples sitting at the encoding's extremes.
    pub clipped_fraction: f64,
    pub warnings: Vec<String>,
}

/// Share of clipped samples above which dynamic-range damage is reported.
pub const CLIP_WARNING_FRACTION: f64 = 0.001;

const LOSSLESS_COMPRESSION: [u16; 5] = [1, 5, 8, 32946, 32773];

fn tiff_err(e: TiffError) -> RasterError {
    match e {
        TiffError::UnsupportedError(u) => RasterError::UnsupportedEncoding(u.to_string()),
        TiffError::IoError(io) => RasterError::CorruptFile(io.to_string()),
        other => RasterError::CorruptFile(other.to_string()),
    }
}

fn read_ppi<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>) -> Option<f64> {
    let res = match dec.find_tag(Tag::XResolution).ok()?? {
        tiff::decoder::ifd::Value::Rational(n, d) if d != 0 => n as f64 / d as f64,
        _ => return None,
    };
    let unit = dec
        .find_tag_unsigned::<u16>(Tag::ResolutionUnit)
        .ok()
        .flatten()
        .unwrap_or(2);
    let ppi = match unit {
        2 => res,
        3 => res * 2.54,
        _ => return None,
    };
    (ppi.is_finite() && ppi > 0.0).then_some(ppi)
}

pub fn load_raster(path: &Path, opts: &LoadOptions) -> Result<LoadedRaster, RasterError> {
    let file = File::open(path)?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(tiff_err)?
        .with_limits(Limits::unlimited());

    let compression = dec
        .find_tag_unsigned::<u16>(Tag::Compression)
        .map_err(tiff_err)?
        .unwrap_or(1);
    if !LOSSLESS_COMPRESSION.contains(&compression) {
        return Err(RasterError::UnsupportedEncoding(format!(
            "compression scheme {compression} is lossy or unsupported"
        )));
    }

    let (width, height) = dec.dimensions().map_err(tiff_err)?;
    let (channels, depth) = match dec.colortype().map_err(tiff_err)? {
        ColorType::Gray(d @ (8 | 16)) => (1, d),
        ColorType::RGB(d @ (8 | 16)) => (3, d),
        other => {
            return Err(RasterError::UnsupportedEncoding(format!(
                "color type {other:?}"
            )))
        }
    };

    let ppi = match opts.ppi_override {
        Some(p) => p,
        None => read_ppi(&mut dec).ok_or(RasterError::MissingPpi)?,
    };

    let mut warnings = Vec::new();
    let (values, max): (Vec<u32>, u32) = match dec.read_image().map_err(tiff_err)? {
        DecodingResult::U8(v) if depth == 8 => (v.into_iter().map(u32::from).collect(), 255),
        DecodingResult::U16(v) if depth == 16 => {
            (v.into_iter().map(u32::from).collect(), 65535)
        }
        _ => return Err(RasterError::UnsupportedEncoding("unexpected sample type".into())),
    };
    let expected = width as usize * height as usize * channels;
    if values.len() != expected {
        return Err(RasterError::CorruptFile(format!(
            "{} samples decoded, {expected} expected",
            values.len()
        )));
    }

    if depth == 8 && opts.encoding == Encoding::Linear16 {
        warnings.push("8-bit data decoded as linear; 16-bit linear capture preferred".into());
    }
    let clipped = values.iter().filter(|&&v| v == 0 || v == max).count();
    let clipped_fraction = clipped as f64 / values.len() as f64;
    if clipped_fraction > CLIP_WARNING_FRACTION {
        warnings.push(format!(
            "{:.3}% of samples clipped; highlight or shadow information may be lost",
            clipped_fraction * 100.0
        ));
    }

    let maxf = max as f64;
    let samples: Vec<f32> = match opts.encoding {
        Encoding::Linear16 => values.iter().map(|&v| (v as f64 / maxf) as f32).collect(),
        Encoding::GammaEncoded(g) => {
            if !(g.is_finite() && g > 0.0) {
                return Err(RasterError::BadGamma(g));
            }
            values
                .iter()
                .map(|&v| (v as f64 / maxf).powf(g) as f32)
                .collect()
        }
    };

    let raster = LinearRaster::new(
        width as usize,
        height as usize,
        channels,
        samples,
        ppi,
        opts.source_tag,
    )?;
    Ok(LoadedRaster {
        raster,
        clipped_fraction,
        warnings,
    })
}

fn ppi_rational(ppi: f64) -> Rational {
    if ppi.fract() == 0.0 && ppi <= u32::MAX as f64 {
        Rational {
            n: ppi as u32,
            d: 1,
        }
    } else {
        Rational {
            n: (ppi * 1000.0).round() as u32,
            d: 1000,
        }
    }
}

pub(crate) fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

/// Writes an uncompressed 16-bit TIFF with inch resolution tags.
pub fn save_tiff16(raster: &LinearRaster, path: &Path) -> Result<(), RasterError> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = TiffEncoder::new(file).map_err(tiff_err)?;
    let data: Vec<u16> = raster.samples().iter().map(|&v| quantize16(v)).collect();
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let res = ppi_rational(raster.ppi());
    if raster.channels() == 1 {
        let mut img = enc.new_image::<colortype::Gray16>(w, h).map_err(tiff_err)?;
        img.resolution(ResolutionUnit::Inch, res);
        img.write_data(&data).map_err(tiff_err)?;
    } else {
        let mut img = enc.new_image::<colortype::RGB16>(w, h).map_err(tiff_err)?;
        img.resolution(ResolutionUnit::Inch, res);
        img.write_data(&data).map_err(tiff_err)?;
    }
    Ok(())
}

/// Encodes an 8-bit PNG. Samples are written as-is; callers apply any
/// display transfer curve beforehand.
pub fn encode_png(raster: &LinearRaster) -> Result<Vec<u8>, RasterError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, raster.width() as u32, raster.height() as u32);
        enc.set_color(if raster.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| RasterError::Invalid(e.to_string()))?;
        let data: Vec<u8> = raster
            .samples()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer
            .write_image_data(&data)
            .map_err(|e| RasterError::Invalid(e.to_string()))?;
    }
    Ok(buf)
}

pub fn save_png_preview(raster: &LinearRaster, path: &Path) -> Result<(), RasterError> {
    let bytes = encode_png(raster)?;
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tiff::encoder::colortype::{Gray16, Gray8, RGB16};

    fn write_gray16(path: &Path, w: u32, h: u32, data: &[u16], ppi: Option<u32>) {
        let mut enc = TiffEncoder::new(File::create(path).unwrap()).unwrap();
        let mut img = enc.new_image::<Gray16>(w, h).unwrap();
        if let Some(p) = ppi {
            img.resolution(ResolutionUnit::Inch, Rational { n: p, d: 1 });
        }
        img.write_data(data).unwrap();
    }

    #[test]
    fn linear16_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.tif");
        write_gray16(&p, 4, 3, &[32768; 12], Some(2000));
        let loaded = load_raster(&p, &LoadOptions::linear(SourceTag::Negative)).unwrap();
        assert_eq!(loaded.raster.ppi(), 2000.0);
        for &s in loaded.raster.samples() {
            assert!((s as f64 - 0.50001).abs() < 1e-5);
        }
        assert_eq!(loaded.clipped_fraction, 0.0);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn gamma_encoded_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tif");
        let mut enc = TiffEncoder::new(File::create(&p).unwrap()).unwrap();
        let mut img = enc.new_image::<Gray8>(1, 1).unwrap();
        img.resolution(ResolutionUnit::Centimeter, Rational { n: 1000, d: 1 });
        img.write_data(&[128u8]).unwrap();
        let opts = LoadOptions {
            encoding: Encoding::GammaEncoded(2.2),
            ppi_override: None,
            source_tag: SourceTag::PositiveTransparency,
        };
        let loaded = load_raster(&p, &opts).unwrap();
        let v = loaded.raster.get(0, 0, 0) as f64;
        assert!((v - (128.0f64 / 255.0).powf(2.2)).abs() < 1e-6);
        assert!((v - 0.2195).abs() < 1e-4);
        assert!((loaded.raster.ppi() - 2540.0).abs() < 1e-9);
    }

    #[test]
    fn rgb_without_ppi_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.tif");
        let mut enc = TiffEncoder::new(File::create(&p).unwrap()).unwrap();
        enc.write_image::<RGB16>(2, 2, &[1000u16; 12]).unwrap();
        let err = load_raster(&p, &LoadOptions::linear(SourceTag::PositiveTransparency));
        assert!(matches!(err, Err(RasterError::MissingPpi)));
        let ok = load_raster(
            &p,
            &LoadOptions {
                ppi_override: Some(1200.0),
                ..LoadOptions::linear(SourceTag::PositiveTransparency)
            },
        )
        .unwrap();
        assert_eq!(ok.raster.channels(), 3);
    }

    #[test]
    fn garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tif");
        std::fs::write(&p, b"II*\0this is not a tiff at all").unwrap();
        assert!(matches!(
            load_raster(&p, &LoadOptions::linear(SourceTag::Negative)),
            Err(RasterError::CorruptFile(_))
        ));
    }

    #[test]
    fn lossless_deflate_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deflate.tif");
        let enc = TiffEncoder::new(File::create(&p).unwrap()).unwrap();
        let mut enc = enc.with_compression(tiff::encoder::Compression::Deflate(
            tiff::encoder::DeflateLevel::Balanced,
        ));
        let mut img = enc.new_image::<Gray16>(3, 1).unwrap();
        img.resolution(ResolutionUnit::Inch, Rational { n: 300, d: 1 });
        img.write_data(&[0u16, 100, 65535]).unwrap();
        let loaded = load_raster(&p, &LoadOptions::linear(SourceTag::Negative)).unwrap();
        assert_eq!(loaded.raster.samples()[2], 1.0);
        // Two of three samples at the extremes.
        assert!(!loaded.warnings.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn tiff16_round_trip_is_sample_exact(
            data in proptest::collection::vec(any::<u16>(), 6 * 5),
            ppi in 100u32..5000,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.tif");
            let b = dir.path().join("b.tif");
            write_gray16(&a, 6, 5, &data, Some(ppi));
            let opts = LoadOptions::linear(SourceTag::Negative);
            let first = load_raster(&a, &opts).unwrap().raster;
            save_tiff16(&first, &b).unwrap();
            let second = load_raster(&b, &opts).unwrap().raster;
            prop_assert_eq!(&first, &second);
            let q: Vec<u16> = second.samples().iter().map(|&v| quantize16(v)).collect();
            prop_assert_eq!(q, data);
        }
    }
}
