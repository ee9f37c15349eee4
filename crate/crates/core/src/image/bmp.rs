//! Uncompressed 24-bit BMP decode and encode.
//!
//! Accepts BITMAPINFOHEADER and its V4/V5 extensions, BI_RGB only. Rows are
//! stored bottom-up unless the height is negative; either way the decoded
//! image is normalized top-down with channels reordered BGR -> RGB.

use super::RgbImage;
use crate::error::{Error, Result};

const FILE_HEADER_LEN: usize = 14;
const INFO_HEADER_SIZES: [u32; 3] = [40, 108, 124];

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn i32_at(bytes: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn row_stride(width: usize) -> usize {
    (width * 3).div_ceil(4) * 4
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < FILE_HEADER_LEN + 4 {
        return Err(Error::data(format!(
            "bmp: file truncated at {} bytes, header needs {}",
            bytes.len(),
            FILE_HEADER_LEN + 4
        )));
    }
    if &bytes[0..2] != b"BM" {
        return Err(Error::data(format!(
            "bmp: bad magic {:02x}{:02x}, expected 424d (\"BM\")",
            bytes[0], bytes[1]
        )));
    }
    let data_offset = u32_at(bytes, 10) as usize;

    let header_size = u32_at(bytes, FILE_HEADER_LEN);
    if !INFO_HEADER_SIZES.contains(&header_size) {
        return Err(Error::data(format!(
            "bmp: unsupported header size {header_size} (core/OS2 headers are not supported)"
        )));
    }
    if bytes.len() < FILE_HEADER_LEN + header_size as usize {
        return Err(Error::data("bmp: file truncated inside the info header".to_string()));
    }
    let h = &bytes[FILE_HEADER_LEN..];
    let width = i32_at(h, 4);
    let raw_height = i32_at(h, 8);
    let planes = u16_at(h, 12);
    let bit_count = u16_at(h, 14);
    let compression = u32_at(h, 16);

    if width <= 0 || raw_height == 0 {
        return Err(Error::data(format!("bmp: invalid dimensions {width}x{raw_height}")));
    }
    if planes != 1 {
        return Err(Error::data(format!("bmp: planes field is {planes}, expected 1")));
    }
    if bit_count != 24 {
        return Err(Error::data(format!("bmp: bit count {bit_count} unsupported, expected 24")));
    }
    if compression != 0 {
        return Err(Error::data(format!(
            "bmp: compression field {compression} unsupported, expected 0 (BI_RGB)"
        )));
    }

    let bottom_up = raw_height > 0;
    let width = width as usize;
    let height = raw_height.unsigned_abs() as usize;
    let stride = row_stride(width);
    let need = data_offset + stride * height;
    if bytes.len() < need {
        return Err(Error::data(format!(
            "bmp: pixel data truncated, need {need} bytes, have {}",
            bytes.len()
        )));
    }

    let mut data = vec![0u8; width * height * 3];
    for y in 0..height {
        let src_row = if bottom_up { height - 1 - y } else { y };
        let src = &bytes[data_offset + src_row * stride..];
        let dst = &mut data[y * width * 3..(y + 1) * width * 3];
        for x in 0..width {
            dst[x * 3] = src[x * 3 + 2];
            dst[x * 3 + 1] = src[x * 3 + 1];
            dst[x * 3 + 2] = src[x * 3];
        }
    }
    RgbImage::new(width, height, data)
}

/// Encode as a bottom-up 24-bit BI_RGB file with a plain BITMAPINFOHEADER.
pub fn encode(image: &RgbImage) -> Vec<u8> {
    let stride = row_stride(image.width);
    let pixel_bytes = stride * image.height;
    let data_offset = FILE_HEADER_LEN + 40;
    let file_size = data_offset + pixel_bytes;

    let mut out = Vec::with_capacity(file_size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(file_size as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(data_offset as u32).to_le_bytes());

    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(image.width as i32).to_le_bytes());
    out.extend_from_slice(&(image.height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(pixel_bytes as u32).to_le_bytes());
    // 2835 pixels/metre = 72 DPI; readers ignore it, some tools want it set.
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());

    for y in (0..image.height).rev() {
        let row_start = out.len();
        for x in 0..image.width {
            let [r, g, b] = image.pixel(x, y);
            out.push(b);
            out.push(g);
            out.push(r);
        }
        while out.len() - row_start < stride {
            out.push(0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2x2 fixture authored byte-by-byte: top row red, green; bottom row
    /// blue, white. Stored bottom-up, so the blue/white row comes first.
    fn fixture_bottom_up() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"BM");
        b.extend_from_slice(&70u32.to_le_bytes()); // 14 + 40 + 2 rows * 8
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&54u32.to_le_bytes());
        b.extend_from_slice(&40u32.to_le_bytes());
        b.extend_from_slice(&2i32.to_le_bytes());
        b.extend_from_slice(&2i32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&24u16.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&[0u8; 16]); // resolutions + color counts
        // Bottom row: blue (BGR ff 00 00), white (ff ff ff), 2 pad bytes.
        b.extend_from_slice(&[0xff, 0x00, 0x00, 0xff, 0xff, 0xff, 0, 0]);
        // Top row: red (BGR 00 00 ff), green (00 ff 00), 2 pad bytes.
        b.extend_from_slice(&[0x00, 0x00, 0xff, 0x00, 0xff, 0x00, 0, 0]);
        b
    }

    /// Same image stored top-down (negative height): rows in display order.
    fn fixture_top_down() -> Vec<u8> {
        let mut b = fixture_bottom_up();
        b[22..26].copy_from_slice(&(-2i32).to_le_bytes());
        // Swap the two pixel rows into top-down order.
        let row0: Vec<u8> = b[54..62].to_vec();
        let row1: Vec<u8> = b[62..70].to_vec();
        b[54..62].copy_from_slice(&row1);
        b[62..70].copy_from_slice(&row0);
        b
    }

    #[test]
    fn decodes_known_pixels() {
        let img = decode(&fixture_bottom_up()).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        assert_eq!(img.pixel(1, 0), [0, 255, 0]);
        assert_eq!(img.pixel(0, 1), [0, 0, 255]);
        assert_eq!(img.pixel(1, 1), [255, 255, 255]);
    }

    #[test]
    fn bottom_up_and_top_down_decode_identically() {
        let a = decode(&fixture_bottom_up()).unwrap();
        let b = decode(&fixture_top_down()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let full = fixture_bottom_up();
        let err = decode(&full[..full.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let err = decode(&full[..10]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_named() {
        let mut b = fixture_bottom_up();
        b[0] = b'X';
        let err = decode(&b).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn unsupported_fields_name_the_field() {
        let mut b = fixture_bottom_up();
        b[28..30].copy_from_slice(&8u16.to_le_bytes());
        let err = decode(&b).unwrap_err();
        assert!(err.to_string().contains("bit count 8"), "{err}");

        let mut b = fixture_bottom_up();
        b[30..34].copy_from_slice(&1u32.to_le_bytes());
        let err = decode(&b).unwrap_err();
        assert!(err.to_string().contains("compression field 1"), "{err}");

        let mut b = fixture_bottom_up();
        b[14..18].copy_from_slice(&12u32.to_le_bytes());
        let err = decode(&b).unwrap_err();
        assert!(err.to_string().contains("header size 12"), "{err}");
    }

    #[test]
    fn v4_and_v5_header_sizes_are_accepted() {
        for size in [108u32, 124] {
            let mut b = fixture_bottom_up();
            let extra = (size - 40) as usize;
            b[14..18].copy_from_slice(&size.to_le_bytes());
            // Grow the header in place and shift the data offset to match.
            let offset = 54 + extra;
            b[10..14].copy_from_slice(&(offset as u32).to_le_bytes());
            for _ in 0..extra {
                b.insert(54, 0);
            }
            let img = decode(&b).unwrap();
            assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let img = RgbImage::new(
            3,
            2,
            vec![
                10, 20, 30, 40, 50, 60, 70, 80, 90, //
                1, 2, 3, 4, 5, 6, 7, 8, 9,
            ],
        )
        .unwrap();
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back, img);
    }
}
