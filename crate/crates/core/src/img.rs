//! Float image container and PNG IO.
//!
//! Renders live as rgb f64 in [0, 1]; files are 8-bit PNG. Depth maps go
//! to 16-bit grayscale PNG with the linear near/far mapping recorded in a
//! sidecar text file next to the image.

use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("image io: {0}")]
    Io(#[from] io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

/// Interleaved rgb, f64 in [0, 1], row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn new(width: usize, height: usize) -> Self {
        ImageF {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luminance.
    pub fn luminance(&self) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|i| {
                0.299 * self.data[i * 3] + 0.587 * self.data[i * 3 + 1] + 0.114 * self.data[i * 3 + 2]
            })
            .collect()
    }
}

pub fn save_png_rgb(img: &ImageF, path: &Path) -> Result<(), ImgError> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(q));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_png_rgb(path: &Path) -> Result<ImageF, ImgError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageF::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32).0;
            out.set_pixel(x, y, [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]);
        }
    }
    Ok(out)
}

/// Writes a depth map as 16-bit PNG, mapping [near, far] linearly onto the
/// full range, plus a `<stem>.depth.txt` sidecar recording the mapping.
pub fn save_depth_png16(
    depths: &[f64],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    path: &Path,
) -> Result<(), ImgError> {
    assert_eq!(depths.len(), width * height);
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let d = depths[y * width + x];
            let t = ((d - near) / (far - near)).clamp(0.0, 1.0);
            buf.put_pixel(x as u32, y as u32, image::Luma([(t * 65535.0).round() as u16]));
        }
    }
    buf.save(path)?;
    let sidecar = path.with_extension("depth.txt");
    fs::write(
        sidecar,
        format!("near={near}\nfar={far}\nencoding=linear_u16\n"),
    )?;
    Ok(())
}
