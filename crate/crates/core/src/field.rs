//! Real-valued H x W fields and their CSV / PGM forms.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;

/// Row-major H x W grid of reals; `x` is the column, `y` the row.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(h: usize, w: usize) -> Self {
        Field { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::InvalidArgument(format!("{h}x{w} field needs {} values, got {}", h * w, data.len())));
        }
        Ok(Field { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Field { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// One row per line, comma separated, shortest round-trip decimal form.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 12);
        for row in self.data.chunks(self.w.max(1)) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{v:?}").expect("write to String");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> std::result::Result<Field, String> {
        let mut data = Vec::new();
        let mut w = None;
        let mut h = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| format!("line {}: bad number '{}'", i + 1, t.trim())))
                .collect::<std::result::Result<_, _>>()?;
            match w {
                None => w = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(format!("line {}: {} columns, expected {w}", i + 1, row.len()))
                }
                _ => {}
            }
            data.extend(row);
            h += 1;
        }
        let w = w.ok_or_else(|| "empty CSV".to_string())?;
        Ok(Field { h, w, data })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Field> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Field::from_csv(&text).map_err(|m| Error::format(path, m))
    }

    /// 16-bit grey levels scaled so the maximum maps to 65535; negative
    /// values clamp to 0 and an all-nonpositive field maps to black.
    pub fn to_gray16(&self) -> Vec<u16> {
        let max = self.max();
        self.data
            .iter()
            .map(|&v| if max > 0.0 { ((v.max(0.0) / max) * 65535.0).round() as u16 } else { 0 })
            .collect()
    }

    pub fn write_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = pnm::encode_pgm16(self.w, self.h, &self.to_gray16());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
