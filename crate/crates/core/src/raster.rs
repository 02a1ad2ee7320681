//! RGB rasters and binary PPM I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One-pixel outline of the half-open rectangle `[x0, x1) × [y0, y1)`.
    pub fn stroke_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        for x in x0..x1 {
            self.put(x, y0, rgb);
            self.put(x, y1 - 1, rgb);
        }
        for y in y0..y1 {
            self.put(x0, y, rgb);
            self.put(x1 - 1, y, rgb);
        }
    }

    /// Encodes as binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::Format { offset: 0, msg: format!("PPM decode: {e}") })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_raw(w, h, img.into_raw())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.to_ppm())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}
