//! Scalar reductions of an activation map, and their gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Channel mean at the spatial centre `(floor(H/2), floor(W/2))`.
    CenterChannelMean,
    /// Mean over all logits (channels of a 1x1 map).
    LogitMean,
    /// A single logit.
    LogitIndex(usize),
}

impl Reduction {
    /// 0-indexed centre used by [`Reduction::CenterChannelMean`]. For even
    /// extents this is the upper-left cell of the central 2x2.
    pub fn center(h: usize, w: usize) -> (usize, usize) {
        (h / 2, w / 2)
    }

    fn check(&self, act: &Tensor4) -> Result<()> {
        let s = act.shape();
        if s.c == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::InvalidArgument(format!("cannot reduce an empty activation {s}")));
        }
        if let Reduction::LogitIndex(k) = *self {
            if k >= s.item_len() {
                return Err(Error::InvalidArgument(format!("logit index {k} out of range for {} logits", s.item_len())));
            }
        }
        Ok(())
    }

    /// Per-item scalars.
    pub fn values(&self, act: &Tensor4) -> Result<Vec<f64>> {
        self.check(act)?;
        let s = act.shape();
        let (ch, cw) = Self::center(s.h, s.w);
        Ok((0..s.n)
            .map(|n| match *self {
                Reduction::CenterChannelMean => {
                    (0..s.c).map(|c| act[[n, c, ch, cw]]).sum::<f64>() / s.c as f64
                }
                Reduction::LogitMean => act.item(n).iter().sum::<f64>() / s.item_len() as f64,
                Reduction::LogitIndex(k) => act.item(n)[k],
            })
            .collect())
    }

    /// Sum over the batch of the per-item scalars.
    pub fn apply(&self, act: &Tensor4) -> Result<f64> {
        Ok(self.values(act)?.iter().sum())
    }

    /// Gradient of [`Reduction::apply`] w.r.t. the activation.
    pub fn seed(&self, act: &Tensor4) -> Result<Tensor4> {
        self.check(act)?;
        let s = act.shape();
        let mut g = Tensor4::zeros(s);
        let (ch, cw) = Self::center(s.h, s.w);
        for n in 0..s.n {
            match *self {
                Reduction::CenterChannelMean => {
                    for c in 0..s.c {
                        g[[n, c, ch, cw]] = 1.0 / s.c as f64;
                    }
                }
                Reduction::LogitMean => {
                    g.item_mut(n).fill(1.0 / s.item_len() as f64);
                }
                Reduction::LogitIndex(k) => g.item_mut(n)[k] = 1.0,
            }
        }
        Ok(g)
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reduction::CenterChannelMean => write!(f, "center"),
            Reduction::LogitMean => write!(f, "mean"),
            Reduction::LogitIndex(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Reduction::CenterChannelMean),
            "mean" => Ok(Reduction::LogitMean),
            _ => s
                .parse()
                .map(Reduction::LogitIndex)
                .map_err(|_| Error::InvalidArgument(format!("reduction must be 'center', 'mean' or an index, got '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_of_seven_is_three() {
        let act = Tensor4::from_fn([1, 4, 7, 7], |_, c, h, w| if (h, w) == (3, 3) { c as f64 } else { 100.0 });
        assert_eq!(Reduction::CenterChannelMean.apply(&act).unwrap(), 1.5);
    }

    #[test]
    fn zero_map_reduces_to_zero() {
        let act = Tensor4::zeros([1, 3, 5, 5]);
        for r in [Reduction::CenterChannelMean, Reduction::LogitMean, Reduction::LogitIndex(2)] {
            assert_eq!(r.apply(&act).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_channel_center_mean() {
        let act = Tensor4::from_fn([1, 2, 3, 3], |_, c, h, w| if (h, w) == (1, 1) { [1.0, 3.0][c] } else { 0.0 });
        assert_eq!(Reduction::CenterChannelMean.apply(&act).unwrap(), 2.0);
    }

    #[test]
    fn logit_index_out_of_range() {
        let act = Tensor4::zeros([1, 2, 1, 1]);
        assert!(Reduction::LogitIndex(2).apply(&act).is_err());
        assert!(Reduction::LogitIndex(1).seed(&act).is_ok());
    }

    #[test]
    fn parse_round_trip() {
        for r in [Reduction::CenterChannelMean, Reduction::LogitMean, Reduction::LogitIndex(7)] {
            assert_eq!(r.to_string().parse::<Reduction>().unwrap(), r);
        }
        assert!("middle".parse::<Reduction>().is_err());
    }
}
