//! 8-bit PNG contact sheets for human inspection.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::Image;

const GAP: usize = 2;

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Lays `rows` of equally sized images on a white canvas, row by row.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<(usize, usize, Vec<u8>)> {
    let size = rows
        .iter()
        .flatten()
        .next()
        .map(Image::size)
        .ok_or(Error::Empty("contact sheet"))?;
    if rows.iter().flatten().any(|i| i.size() != size) {
        return Err(Error::Image("contact sheet images differ in size".into()));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * size + (cols + 1) * GAP;
    let height = rows.len() * size + (rows.len() + 1) * GAP;
    let mut px = vec![255u8; width * height * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (ox, oy) = (GAP + c * (size + GAP), GAP + r * (size + GAP));
            for y in 0..size {
                for x in 0..size {
                    let o = ((oy + y) * width + ox + x) * 3;
                    for ch in 0..3 {
                        px[o + ch] = to_u8(img.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok((width, height, px))
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    w.write_image_data(rgb).map_err(|e| Error::Image(e.to_string()))
}

pub fn save_contact_sheet(path: &Path, rows: &[Vec<Image>]) -> Result<()> {
    let (w, h, px) = contact_sheet(rows)?;
    write_png(path, w, h, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sheet_geometry_and_pixel_mapping() {
        let a = Image::from_chw(2, vec![-1.0; 12]);
        let b = Image::from_chw(2, vec![1.0; 12]);
        let (w, h, px) = contact_sheet(&[vec![a.clone(), b], vec![a]]).unwrap();
        assert_eq!((w, h), (2 * 2 + 3 * GAP, 2 * 2 + 3 * GAP));
        assert_eq!(px[(GAP * w + GAP) * 3], 0);
        assert_eq!(px[(GAP * w + GAP + 2 + GAP) * 3], 255);
    }

    #[test]
    fn png_round_trips_through_the_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        save_contact_sheet(&path, &[vec![Image::from_chw(4, vec![0.0; 48])]]).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let reader = dec.read_info().unwrap();
        assert_eq!(reader.info().width, 4 + 2 * GAP as u32);
    }
}
