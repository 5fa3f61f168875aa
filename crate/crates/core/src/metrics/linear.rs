//! The fixed linear model of a piecewise-linear network.
//!
//! A ReLU network is locally linear: `y(I) = sum(dy/dI * I) + C(I)`. Freezing
//! the slope at the ERF `R` and the intercept at the dataset mean of `C`
//! gives `y~(I) = sum_xy R_xy * sum_z I_xyz + E(C)`, under which a
//! perturbation `eps` at `(X, Y, Z)` moves the output by `eps * R_XY`.

use serde::{Deserialize, Serialize};

use crate::autograd::{input_gradient, Mode, NetGraph, Reduction};
use crate::erf::{output_target, ClassMode, ErfMap, ImageSource, Provenance, TargetDescriptor};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::parallel;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct FixedLinearModel {
    pub attribution: Field,
    pub intercept: f64,
    pub channels: usize,
    /// `C(n)` per image, in source order.
    pub intercepts: Vec<f64>,
    pub target: TargetDescriptor,
    pub provenance: Provenance,
}

/// A signed perturbation of one input sample, at column `x`, row `y`,
/// channel `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub epsilon: f64,
}

/// `C = y - sum(dy/dI * I)` for one image.
pub fn image_intercept(graph: &NetGraph, image: &Tensor4, reduction: Reduction) -> Result<f64> {
    let out = graph.topology().output();
    let (y, grads) = input_gradient(graph, image, out, reduction, Mode::Eval)?;
    let lin: f64 = grads.input.data().iter().zip(image.data()).map(|(g, i)| g * i).sum();
    Ok(y - lin)
}

pub fn build_linear_model(
    graph: &NetGraph,
    source: &ImageSource,
    erf: &ErfMap,
    class: ClassMode,
    workers: usize,
) -> Result<FixedLinearModel> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("linear model needs at least one image".into()));
    }
    let target = output_target(graph, class)?;
    let wanted = TargetDescriptor::of(graph, &target)?;
    if erf.target != wanted {
        return Err(Error::InvalidArgument(format!(
            "ERF was computed for {} ({}), model requested for {} ({})",
            erf.target.node, erf.target.reduction, wanted.node, wanted.reduction
        )));
    }
    let [c, h, w] = source.shape();
    if (erf.field.height(), erf.field.width()) != (h, w) {
        return Err(Error::InvalidArgument("ERF and image source differ in size".into()));
    }
    let intercepts =
        parallel::map_indexed(source.len(), workers, |i| image_intercept(graph, source.get(i), target.reduction))?;
    let intercept = intercepts.iter().sum::<f64>() / intercepts.len() as f64;
    Ok(FixedLinearModel {
        attribution: erf.field.clone(),
        intercept,
        channels: c,
        intercepts,
        target: wanted,
        provenance: erf.provenance.clone(),
    })
}

impl FixedLinearModel {
    pub fn predict_tilde(&self, image: &Tensor4) -> Result<f64> {
        let s = image.shape();
        let (h, w) = (self.attribution.height(), self.attribution.width());
        if (s.n, s.c, s.h, s.w) != (1, self.channels, h, w) {
            return Err(Error::InvalidArgument(format!(
                "image {s} does not match model 1x{}x{h}x{w}",
                self.channels
            )));
        }
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let channel_sum: f64 = (0..s.c).map(|z| image[[0, z, y, x]]).sum();
                acc += self.attribution.get(y, x) * channel_sum;
            }
        }
        Ok(acc + self.intercept)
    }

    pub fn perturbation_delta(&self, p: &PerturbationSpec) -> Result<f64> {
        let (h, w) = (self.attribution.height(), self.attribution.width());
        if p.x >= w || p.y >= h || p.z >= self.channels {
            return Err(Error::InvalidArgument(format!(
                "perturbation at ({}, {}, {}) outside {w}x{h}x{}",
                p.x, p.y, p.z, self.channels
            )));
        }
        Ok(p.epsilon * self.attribution.get(p.y, p.x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(r: Field, intercept: f64) -> FixedLinearModel {
        FixedLinearModel {
            attribution: r,
            intercept,
            channels: 3,
            intercepts: vec![intercept],
            target: TargetDescriptor {
                node: "fc1".into(),
                reduction: Reduction::LogitMean,
                center: None,
                feature_hw: [1, 1],
            },
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn zero_image_gives_intercept() {
        let m = model(Field::from_fn(4, 4, |y, x| (y * 4 + x) as f64), 0.75);
        assert_eq!(m.predict_tilde(&Tensor4::zeros([1, 3, 4, 4])).unwrap(), 0.75);
    }

    #[test]
    fn basis_image() {
        let m = model(Field::from_fn(4, 4, |y, x| 1.0 + (y * 4 + x) as f64), 0.0);
        let mut img = Tensor4::zeros([1, 3, 4, 4]);
        img[[0, 2, 1, 3]] = -0.5;
        assert_eq!(m.predict_tilde(&img).unwrap(), -0.5 * 8.0);
        let p = PerturbationSpec { x: 3, y: 1, z: 2, epsilon: -0.5 };
        assert_eq!(m.perturbation_delta(&p).unwrap(), -4.0);
    }

    #[test]
    fn bounds() {
        let m = model(Field::zeros(4, 5), 0.0);
        assert!(m.perturbation_delta(&PerturbationSpec { x: 5, y: 0, z: 0, epsilon: 1.0 }).is_err());
        assert!(m.perturbation_delta(&PerturbationSpec { x: 4, y: 3, z: 3, epsilon: 1.0 }).is_err());
        assert!(m.predict_tilde(&Tensor4::zeros([1, 3, 5, 4])).is_err());
    }
}
