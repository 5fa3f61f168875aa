//! First- and second-order pixel-sensitivity imbalance indices.
//!
//! `l1` averages `|R(x+1) - R(x)|` over all horizontal and vertical forward
//! differences; `l2` averages `|R(x+1) - 2R(x) + R(x-1)|` over all centred
//! second differences. On an H x W field there are `H(W-1) + W(H-1)` first
//! and `H(W-2) + W(H-2)` second differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceIndices {
    pub l1: f64,
    pub l2: f64,
    pub normalized: bool,
}

/// With `normalize`, the field is divided by its sum first (a zero-sum
/// field is left as is).
pub fn imbalance(field: &Field, normalize: bool) -> Result<ImbalanceIndices> {
    let (h, w) = (field.height(), field.width());
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!("imbalance needs at least 3x3, got {h}x{w}")));
    }
    let sum = field.sum();
    let scale = if normalize && sum != 0.0 { 1.0 / sum } else { 1.0 };
    let r = |y: usize, x: usize| field.get(y, x) * scale;

    let mut first = 0.0;
    let mut second = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                first += (r(y, x + 1) - r(y, x)).abs();
            }
            if y + 1 < h {
                first += (r(y + 1, x) - r(y, x)).abs();
            }
            if x >= 1 && x + 1 < w {
                second += (r(y, x + 1) - 2.0 * r(y, x) + r(y, x - 1)).abs();
            }
            if y >= 1 && y + 1 < h {
                second += (r(y + 1, x) - 2.0 * r(y, x) + r(y - 1, x)).abs();
            }
        }
    }
    let n1 = (h * (w - 1) + w * (h - 1)) as f64;
    let n2 = (h * (w - 2) + w * (h - 2)) as f64;
    Ok(ImbalanceIndices { l1: first / n1, l2: second / n2, normalized: normalize })
}
