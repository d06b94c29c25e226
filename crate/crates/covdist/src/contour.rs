//! Closed integration contours and adaptive trapezoidal quadrature.
//!
//! Every contour is traversed clockwise, so that for a function `g` analytic
//! inside, `(1/2 pi i) * integral g(w)/(x - w) dw = g(x)` for any enclosed `x`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContourShape {
    /// `z(t) = c + a cos t - i b sin t`.
    Ellipse,
    /// `z(t) = exp(c + a cos t - i b sin t)`: an ellipse in log coordinates.
    /// It hugs clusters of small eigenvalues much more tightly than a plain
    /// ellipse and never crosses the negative real axis when `b < pi`.
    LogEllipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub shape: ContourShape,
    pub center: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureOptions {
    pub initial_nodes: usize,
    pub max_nodes: usize,
    pub rel_tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self { initial_nodes: 256, max_nodes: 4096, rel_tol: 1e-8 }
    }
}

impl QuadratureOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_nodes >= 64
            && self.initial_nodes.is_multiple_of(2)
            && self.max_nodes >= self.initial_nodes
            && self.max_nodes.is_multiple_of(self.initial_nodes)
            && (self.max_nodes / self.initial_nodes).is_power_of_two()
            && self.rel_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid quadrature options {self:?}")))
        }
    }
}

/// One quadrature node. `index` locates the node on the finest grid allowed by
/// the options and `step` is the spacing of the current level on that grid, so
/// `index - step` (mod the finest size) is always a node of a coarser level.
#[derive(Debug, Clone, Copy)]
pub struct Node {
    pub z: Complex64,
    /// `z'(t) dt` including the `2 pi / Q` weight and the `1 / (2 pi i)` factor.
    pub weight: Complex64,
    pub index: usize,
    pub step: usize,
    pub finest: usize,
}

impl Contour {
    /// Plain ellipse whose real extent is `[lo, hi]` and imaginary semi-axis is `ratio` times the real one.
    pub fn ellipse(lo: f64, hi: f64, ratio: f64) -> Self {
        let a = 0.5 * (hi - lo);
        Self { shape: ContourShape::Ellipse, center: 0.5 * (hi + lo), a, b: ratio * a }
    }

    /// Log-space ellipse whose real extent is `[lo, hi]` (both positive).
    pub fn log_ellipse(lo: f64, hi: f64, b: f64) -> Self {
        let (l, h) = (lo.ln(), hi.ln());
        Self { shape: ContourShape::LogEllipse, center: 0.5 * (l + h), a: 0.5 * (h - l), b }
    }

    /// Point and derivative with respect to the parameter `t`.
    pub fn point(&self, t: f64) -> (Complex64, Complex64) {
        let (s, c) = t.sin_cos();
        let u = Complex64::new(self.center + self.a * c, -self.b * s);
        let du = Complex64::new(-self.a * s, -self.b * c);
        match self.shape {
            ContourShape::Ellipse => (u, du),
            ContourShape::LogEllipse => {
                let z = u.exp();
                (z, z * du)
            }
        }
    }

    /// Smallest and largest real points of the contour.
    pub fn real_extent(&self) -> (f64, f64) {
        match self.shape {
            ContourShape::Ellipse => (self.center - self.a, self.center + self.a),
            ContourShape::LogEllipse => ((self.center - self.a).exp(), (self.center + self.a).exp()),
        }
    }

    /// Whether the contour avoids the half-line `(-inf, floor]`.
    pub fn avoids_cut(&self, floor: f64) -> bool {
        match self.shape {
            ContourShape::Ellipse => self.real_extent().0 > floor,
            ContourShape::LogEllipse => floor < 0.0 || (self.b < PI && self.real_extent().0 > floor),
        }
    }

    /// Whether a real point lies strictly inside.
    pub fn encloses_real(&self, x: f64) -> bool {
        let (lo, hi) = self.real_extent();
        x > lo && x < hi
    }

    /// Quadrature nodes for `q` equally spaced parameters `t = 2 pi k / q`.
    pub fn nodes(&self, q: usize) -> Vec<Node> {
        (0..q).map(|k| self.node(k, 1, q)).collect()
    }

    fn node(&self, index: usize, step: usize, finest: usize) -> Node {
        let t = 2.0 * PI * index as f64 / finest as f64;
        let (z, dz) = self.point(t);
        let h = 2.0 * PI * step as f64 / finest as f64;
        Node { z, weight: dz * h / Complex64::new(0.0, 2.0 * PI), index, step, finest }
    }

    /// Computes `(1/2 pi i) * integral` of a vector-valued integrand.
    ///
    /// The closure receives a node and must add `integrand(z) * node.weight`
    /// into the supplied accumulator. Nodes are visited level by level; each
    /// refinement adds the midpoints of the previous level so the coarse sums
    /// are reused. Returns the integral and the final number of nodes.
    pub fn integrate<F>(&self, len: usize, opts: &QuadratureOptions, mut f: F) -> Result<(Vec<Complex64>, usize)>
    where
        F: FnMut(&Node, &mut [Complex64]) -> Result<()>,
    {
        opts.validate()?;
        let finest = opts.max_nodes;
        let mut q = opts.initial_nodes;
        let mut step = finest / q;
        let mut acc = vec![Complex64::new(0.0, 0.0); len];
        for k in 0..q {
            f(&self.node(k * step, step, finest), &mut acc)?;
        }
        if q >= finest {
            return Ok((acc, q));
        }
        let mut prev = acc;
        while q < finest {
            let half = step / 2;
            let mut mid = vec![Complex64::new(0.0, 0.0); len];
            for k in 0..q {
                f(&self.node(k * step + half, half, finest), &mut mid)?;
            }
            // Old sum used weights of spacing `step`; halve them and add midpoints.
            let next: Vec<Complex64> = prev.iter().zip(&mid).map(|(p, m)| 0.5 * p + m).collect();
            q *= 2;
            step = half;
            let scale = next.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let change = next.iter().zip(&prev).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prev = next;
            if change <= opts.rel_tol * scale.max(1e-300) {
                return Ok((prev, q));
            }
        }
        Err(Error::Quadrature(format!("no convergence with {finest} nodes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> QuadratureOptions {
        QuadratureOptions { initial_nodes: 64, max_nodes: 1024, rel_tol: 1e-12 }
    }

    #[test]
    fn cauchy_formula_clockwise() {
        for c in [Contour::ellipse(0.5, 4.0, 0.5), Contour::log_ellipse(0.5, 4.0, 0.8)] {
            let x = 1.7;
            let (v, _) = c
                .integrate(1, &opts(), |n, acc| {
                    acc[0] += n.z.ln() / (x - n.z) * n.weight;
                    Ok(())
                })
                .unwrap();
            assert!((v[0].re - x.ln()).abs() < 1e-12, "{c:?}: {}", v[0]);
            assert!(v[0].im.abs() < 1e-12);
        }
    }

    #[test]
    fn exterior_pole_contributes_nothing() {
        let c = Contour::log_ellipse(1.0, 2.0, 0.6);
        let (v, _) = c
            .integrate(2, &opts(), |n, acc| {
                acc[0] += n.weight / (1.5 - n.z);
                acc[1] += n.weight / (5.0 - n.z);
                Ok(())
            })
            .unwrap();
        assert!((v[0] - 1.0).norm() < 1e-12);
        assert!(v[1].norm() < 1e-12);
    }

    #[test]
    fn node_weights_sum_to_zero_and_nest() {
        let c = Contour::ellipse(-1.0, 3.0, 0.4);
        let total: Complex64 = c.nodes(128).iter().map(|n| n.weight).sum();
        assert!(total.norm() < 1e-13);
        assert!(c.avoids_cut(-2.0) && !c.avoids_cut(0.0));
        assert!(c.encloses_real(0.0));
    }

    #[test]
    fn bad_options_are_rejected() {
        let o = QuadratureOptions { initial_nodes: 100, max_nodes: 300, rel_tol: 1e-8 };
        assert!(o.validate().is_err());
    }
}
