//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Gray,
    Rgb,
}

impl Channels {
    fn count(self) -> usize {
        match self {
            Channels::Gray => 1,
            Channels::Rgb => 3,
        }
    }
}

/// Decoded 8-bit image, interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: Channels,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Image8) -> Result<Vec<u8>> {
    if img.pixels.len() != img.width * img.height * img.channels.count() {
        return Err(Error::InvalidArgument("pixel buffer does not match image size".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(match img.channels {
            Channels::Gray => png::ColorType::Grayscale,
            Channels::Rgb => png::ColorType::Rgb,
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        w.write_image_data(&img.pixels)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn write(path: &Path, img: &Image8) -> Result<()> {
    let bytes = encode(img)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(path, e))
}

/// Decodes an 8-bit grayscale or RGB PNG. Checksums are verified by the decoder.
pub fn decode(bytes: &[u8]) -> Result<Image8> {
    decode_from(Cursor::new(bytes))
}

fn decode_from<R: std::io::BufRead + std::io::Seek>(r: R) -> Result<Image8> {
    let mut limits = png::Limits::default();
    limits.bytes = 64 << 20;
    let dec = png::Decoder::new_with_limits(r, limits);
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("png: unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => Channels::Gray,
        png::ColorType::Rgb => Channels::Rgb,
        other => return Err(Error::Format(format!("png: unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    if buf.len() != width * height * channels.count() {
        return Err(Error::Format("png: unexpected row layout".into()));
    }
    Ok(Image8 {
        width,
        height,
        channels,
        pixels: buf,
    })
}

pub fn read(path: &Path) -> Result<Image8> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_from(BufReader::new(f)).map_err(|e| Error::corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_and_corruption() {
        let img = Image8 {
            width: 5,
            height: 3,
            channels: Channels::Rgb,
            pixels: (0..45).map(|i| (i * 5) as u8).collect(),
        };
        let bytes = encode(&img).unwrap();
        assert_eq!(decode(&bytes).unwrap(), img);
        assert_eq!(encode(&img).unwrap(), bytes);
        // IHDR field, IDAT payload, IDAT checksum.
        for pos in [20, bytes.len() / 2, bytes.len() - 14] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(decode(&bad).is_err(), "flip at {pos} not detected");
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"not a png").is_err());
        assert!(decode(&[]).is_err());
    }
}
