//! Heatmap rendering: grayscale map export, colour overlays and box outlines.

use crate::error::{Error, Result};
use crate::localization::BBox;
use crate::pngio::{Channels, Image8};
use crate::tensor::{Scalar, Tensor};

/// Jet-style colour table indexed by the 8-bit map value.
#[rustfmt::skip]
pub const COLORMAP: [[u8; 3]; 256] = [
    [0, 0, 128], [0, 0, 132], [0, 0, 136], [0, 0, 140],
    [0, 0, 144], [0, 0, 147], [0, 0, 152], [0, 0, 156],
    [0, 0, 160], [0, 0, 163], [0, 0, 168], [0, 0, 172],
    [0, 0, 176], [0, 0, 179], [0, 0, 184], [0, 0, 188],
    [0, 0, 192], [0, 0, 195], [0, 0, 200], [0, 0, 204],
    [0, 0, 208], [0, 0, 211], [0, 0, 216], [0, 0, 220],
    [0, 0, 224], [0, 0, 227], [0, 0, 232], [0, 0, 236],
    [0, 0, 240], [0, 0, 243], [0, 0, 248], [0, 0, 252],
    [0, 0, 255], [0, 4, 255], [0, 8, 255], [0, 13, 255],
    [0, 16, 255], [0, 21, 255], [0, 25, 255], [0, 29, 255],
    [0, 32, 255], [0, 36, 255], [0, 40, 255], [0, 45, 255],
    [0, 48, 255], [0, 53, 255], [0, 57, 255], [0, 61, 255],
    [0, 64, 255], [0, 68, 255], [0, 72, 255], [0, 77, 255],
    [0, 80, 255], [0, 85, 255], [0, 89, 255], [0, 93, 255],
    [0, 96, 255], [0, 100, 255], [0, 104, 255], [0, 109, 255],
    [0, 112, 255], [0, 117, 255], [0, 121, 255], [0, 125, 255],
    [0, 128, 255], [0, 132, 255], [0, 137, 255], [0, 140, 255],
    [0, 144, 255], [0, 148, 255], [0, 153, 255], [0, 156, 255],
    [0, 160, 255], [0, 164, 255], [0, 169, 255], [0, 172, 255],
    [0, 176, 255], [0, 180, 255], [0, 185, 255], [0, 188, 255],
    [0, 192, 255], [0, 196, 255], [0, 201, 255], [0, 204, 255],
    [0, 208, 255], [0, 212, 255], [0, 217, 255], [0, 220, 255],
    [0, 224, 255], [0, 228, 255], [0, 233, 255], [0, 236, 255],
    [0, 240, 255], [0, 244, 255], [0, 249, 255], [0, 252, 255],
    [1, 255, 254], [5, 255, 250], [10, 255, 245], [14, 255, 242],
    [17, 255, 238], [21, 255, 234], [26, 255, 229], [30, 255, 226],
    [33, 255, 222], [37, 255, 218], [42, 255, 213], [46, 255, 210],
    [49, 255, 206], [53, 255, 202], [58, 255, 197], [62, 255, 194],
    [66, 255, 190], [69, 255, 186], [74, 255, 181], [78, 255, 178],
    [82, 255, 174], [85, 255, 170], [90, 255, 165], [94, 255, 162],
    [98, 255, 158], [101, 255, 154], [106, 255, 149], [110, 255, 146],
    [114, 255, 142], [117, 255, 138], [122, 255, 133], [126, 255, 130],
    [130, 255, 126], [133, 255, 122], [137, 255, 118], [141, 255, 114],
    [146, 255, 109], [150, 255, 105], [154, 255, 101], [158, 255, 98],
    [162, 255, 94], [165, 255, 90], [169, 255, 86], [173, 255, 82],
    [178, 255, 77], [182, 255, 73], [186, 255, 69], [190, 255, 66],
    [194, 255, 62], [197, 255, 58], [201, 255, 54], [205, 255, 50],
    [210, 255, 45], [214, 255, 41], [218, 255, 37], [222, 255, 33],
    [226, 255, 30], [229, 255, 26], [233, 255, 22], [237, 255, 18],
    [242, 255, 13], [246, 255, 9], [250, 255, 5], [254, 255, 1],
    [255, 252, 0], [255, 249, 0], [255, 245, 0], [255, 241, 0],
    [255, 236, 0], [255, 232, 0], [255, 228, 0], [255, 224, 0],
    [255, 220, 0], [255, 217, 0], [255, 213, 0], [255, 209, 0],
    [255, 204, 0], [255, 200, 0], [255, 196, 0], [255, 192, 0],
    [255, 188, 0], [255, 185, 0], [255, 181, 0], [255, 177, 0],
    [255, 172, 0], [255, 168, 0], [255, 164, 0], [255, 160, 0],
    [255, 156, 0], [255, 153, 0], [255, 149, 0], [255, 145, 0],
    [255, 140, 0], [255, 136, 0], [255, 132, 0], [255, 128, 0],
    [255, 125, 0], [255, 121, 0], [255, 117, 0], [255, 113, 0],
    [255, 108, 0], [255, 104, 0], [255, 100, 0], [255, 96, 0],
    [255, 93, 0], [255, 89, 0], [255, 85, 0], [255, 81, 0],
    [255, 76, 0], [255, 72, 0], [255, 68, 0], [255, 64, 0],
    [255, 61, 0], [255, 57, 0], [255, 53, 0], [255, 49, 0],
    [255, 44, 0], [255, 40, 0], [255, 36, 0], [255, 32, 0],
    [255, 29, 0], [255, 25, 0], [255, 21, 0], [255, 17, 0],
    [255, 12, 0], [255, 8, 0], [255, 4, 0], [255, 0, 0],
    [252, 0, 0], [248, 0, 0], [244, 0, 0], [240, 0, 0],
    [235, 0, 0], [231, 0, 0], [227, 0, 0], [224, 0, 0],
    [220, 0, 0], [216, 0, 0], [212, 0, 0], [208, 0, 0],
    [203, 0, 0], [199, 0, 0], [195, 0, 0], [192, 0, 0],
    [188, 0, 0], [184, 0, 0], [180, 0, 0], [176, 0, 0],
    [171, 0, 0], [167, 0, 0], [163, 0, 0], [160, 0, 0],
    [156, 0, 0], [152, 0, 0], [148, 0, 0], [144, 0, 0],
    [139, 0, 0], [135, 0, 0], [132, 0, 0], [128, 0, 0],
];

pub const PREDICTED_COLOR: [u8; 3] = [0, 255, 0];
pub const GROUND_TRUTH_COLOR: [u8; 3] = [255, 0, 0];

/// Weight of the colour layer when compositing an overlay.
pub const OVERLAY_ALPHA: u32 = 128;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn map_dims<T: Scalar>(map: &Tensor<T>) -> Result<(usize, usize)> {
    match map.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::shape("heatmap", &[0, 0], s)),
    }
}

/// 8-bit grayscale rendering of a map with values in `[0, 1]`.
pub fn grayscale<T: Scalar>(map: &Tensor<T>) -> Result<Image8> {
    let (h, w) = map_dims(map)?;
    Ok(Image8 {
        width: w,
        height: h,
        channels: Channels::Gray,
        pixels: map.data().iter().map(|v| to_byte(Scalar::to_f64(*v))).collect(),
    })
}

/// Composites the colour-mapped `map` over an RGB image of the same size.
pub fn overlay<T: Scalar>(image: &Image8, map: &Tensor<T>) -> Result<Image8> {
    let (h, w) = map_dims(map)?;
    if image.channels != Channels::Rgb || image.width != w || image.height != h {
        return Err(Error::InvalidArgument(format!(
            "overlay needs an RGB image of {w}x{h}, got {}x{} {:?}",
            image.width, image.height, image.channels
        )));
    }
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for (i, v) in map.data().iter().enumerate() {
        let color = COLORMAP[to_byte(Scalar::to_f64(*v)) as usize];
        for ch in 0..3 {
            let base = image.pixels[3 * i + ch] as u32;
            let top = color[ch] as u32;
            pixels.push(((base * (256 - OVERLAY_ALPHA) + top * OVERLAY_ALPHA + 128) >> 8) as u8);
        }
    }
    Ok(Image8 {
        width: w,
        height: h,
        channels: Channels::Rgb,
        pixels,
    })
}

/// Draws a one-pixel outline along the inside edge of `b`.
pub fn draw_box(image: &mut Image8, b: &BBox, color: [u8; 3]) -> Result<()> {
    if image.channels != Channels::Rgb {
        return Err(Error::InvalidArgument("boxes are drawn on RGB images".into()));
    }
    if !b.fits_within(image.width as u32, image.height as u32) {
        return Err(Error::InvalidArgument(format!(
            "box {b:?} exceeds a {}x{} image",
            image.width, image.height
        )));
    }
    let w = image.width;
    let mut put = |x: u32, y: u32| {
        let at = 3 * (y as usize * w + x as usize);
        image.pixels[at..at + 3].copy_from_slice(&color);
    };
    for x in b.x0..b.x1 {
        put(x, b.y0);
        put(x, b.y1 - 1);
    }
    for y in b.y0..b.y1 {
        put(b.x0, y);
        put(b.x1 - 1, y);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_runs_blue_to_red() {
        assert_eq!(COLORMAP[0], [0, 0, 128]);
        assert_eq!(COLORMAP[255], [128, 0, 0]);
        let mid = COLORMAP[128];
        assert!(mid[1] == 255 && mid[0] > 100 && mid[2] > 100);
    }

    #[test]
    fn grayscale_quantizes_and_clamps() {
        let m = Tensor::from_vec(vec![1, 4], vec![0.0f64, 0.5, 1.0, 2.0]).unwrap();
        assert_eq!(grayscale(&m).unwrap().pixels, vec![0, 128, 255, 255]);
        assert!(grayscale(&Tensor::<f64>::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn overlay_blends_halfway() {
        let img = Image8 { width: 1, height: 1, channels: Channels::Rgb, pixels: vec![200, 100, 0] };
        let m = Tensor::from_vec(vec![1, 1], vec![0.0f32]).unwrap();
        let o = overlay(&img, &m).unwrap();
        assert_eq!(o.pixels, vec![100, 50, 64]);
        assert!(overlay(&img, &Tensor::<f32>::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn box_outline_only_touches_edges() {
        let mut img = Image8 { width: 6, height: 5, channels: Channels::Rgb, pixels: vec![0; 90] };
        let b = BBox { x0: 1, y0: 1, x1: 5, y1: 4 };
        draw_box(&mut img, &b, PREDICTED_COLOR).unwrap();
        for y in 0..5u32 {
            for x in 0..6u32 {
                let edge = b.contains(x, y) && (x == 1 || x == 4 || y == 1 || y == 3);
                let g = img.pixels[3 * (y as usize * 6 + x as usize) + 1];
                assert_eq!(g == 255, edge, "({x}, {y})");
            }
        }
        assert!(draw_box(&mut img, &BBox { x0: 0, y0: 0, x1: 7, y1: 1 }, GROUND_TRUTH_COLOR).is_err());
    }
}
