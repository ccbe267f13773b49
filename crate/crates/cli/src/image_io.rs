use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use locogs::render::Image;

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width, image.height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(&image.to_rgb8())?;
    w.finish()?;
    Ok(())
}

/// Reads an 8-bit PNG as linear RGB in `[0, 1]`. Grey is replicated and
/// alpha dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let size = reader.output_buffer_size().context("PNG too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let px = (info.width * info.height) as usize;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!("unsupported PNG colour type {other:?}"),
    };
    let rgb: Vec<u8> = buf[..px * channels]
        .chunks(channels)
        .flat_map(|c| if channels < 3 { [c[0]; 3] } else { [c[0], c[1], c[2]] })
        .collect();
    Ok(Image::from_rgb8(info.width, info.height, &rgb))
}
