//! Pixel-level preprocessing operations.

use super::{GrayImage, RgbImage};

/// 255 - v on every channel; an involution.
pub fn invert_colors(image: &RgbImage) -> RgbImage {
    RgbImage {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&v| 255 - v).collect(),
    }
}

/// BT.601 luminance, rounded half-up. Integer arithmetic keeps it exact:
/// y = (299 R + 587 G + 114 B + 500) / 1000.
pub fn to_grayscale(image: &RgbImage) -> GrayImage {
    let mut data = Vec::with_capacity(image.width * image.height);
    for px in image.data.chunks_exact(3) {
        let sum = 299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32;
        data.push(((sum + 500) / 1000) as u8);
    }
    GrayImage { width: image.width, height: image.height, data }
}

/// Sample with bilinear interpolation at a fractional position; positions
/// or neighbours outside the image read as `fill`.
fn sample_bilinear(image: &GrayImage, x: f64, y: f64, fill: u8) -> f64 {
    let (w, h) = (image.width as isize, image.height as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |ix: isize, iy: isize| -> f64 {
        if ix < 0 || iy < 0 || ix >= w || iy >= h {
            fill as f64
        } else {
            image.data[iy as usize * image.width + ix as usize] as f64
        }
    };
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotate about the image centre by `angle_deg` (counter-clockwise positive),
/// bilinear interpolation, out-of-support pixels set to `fill`. Zero angle
/// is a bit-exact identity.
pub fn rotate_with_fill(image: &GrayImage, angle_deg: f64, fill: u8) -> GrayImage {
    if angle_deg == 0.0 {
        return image.clone();
    }
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (image.width as f64 - 1.0) / 2.0;
    let cy = (image.height as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            // Inverse map: rotate the output position by -theta.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let v = sample_bilinear(image, sx, sy, fill);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage { width: image.width, height: image.height, data }
}

/// Bilinear resize with half-pixel centre alignment. Identity when the size
/// already matches.
pub fn resize_bilinear(image: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    if out_w == image.width && out_h == image.height {
        return image.clone();
    }
    let sx = image.width as f64 / out_w as f64;
    let sy = image.height as f64 / out_h as f64;
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            // Clamp to the support so edges replicate instead of darkening.
            let src_x = src_x.clamp(0.0, image.width as f64 - 1.0);
            let src_y = src_y.clamp(0.0, image.height as f64 - 1.0);
            let v = sample_bilinear(image, src_x, src_y, 0);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage { width: out_w, height: out_h, data }
}

/// 8-bit to [0, 1] floats.
pub fn to_unit_floats(image: &GrayImage) -> Vec<f32> {
    image.data.iter().map(|&v| v as f32 / 255.0).collect()
}
