//! Trainable quadratic activations `c1*x^2 + c2*x + c3` and the ReLU used by
//! teacher networks.
//!
//! A [`PolyActivation`] holds one coefficient triple per group; the
//! granularity decides how feature positions map onto groups:
//!
//! | granularity | groups    | coefficients |
//! |-------------|-----------|--------------|
//! | layer       | 1         | 3            |
//! | channel     | n         | 3n           |
//! | element     | n*H*W     | 3nHW         |

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Channel,
    Element,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Layer, Granularity::Channel, Granularity::Element];
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Layer => "layer",
            Granularity::Channel => "channel",
            Granularity::Element => "element",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Granularity::Layer),
            "channel" => Ok(Granularity::Channel),
            "element" => Ok(Granularity::Element),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

/// `(coefficients, activation functions)` for a layer of `n x h x w` features.
pub fn count_params(granularity: Granularity, n: usize, h: usize, w: usize) -> (usize, usize) {
    match granularity {
        Granularity::Layer => (3, n),
        Granularity::Channel => (3 * n, n),
        Granularity::Element => (3 * n * h * w, n * h * w),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyActivation {
    pub granularity: Granularity,
    /// Feature shape `(n, h, w)` this activation is sized for.
    pub shape: (usize, usize, usize),
    /// One row `[c1, c2, c3]` per group.
    pub coeffs: Array2<f64>,
}

impl PolyActivation {
    /// Identity start: `c1 = 0, c2 = 1, c3 = 0` everywhere.
    pub fn identity(granularity: Granularity, shape: (usize, usize, usize)) -> Self {
        let groups = Self::group_count(granularity, shape);
        let mut coeffs = Array2::zeros((groups, 3));
        coeffs.column_mut(1).fill(1.0);
        Self {
            granularity,
            shape,
            coeffs,
        }
    }

    /// Identity start perturbed by uniform noise in `[-noise, noise]`.
    pub fn identity_with_noise<R: Rng + ?Sized>(
        granularity: Granularity,
        shape: (usize, usize, usize),
        noise: f64,
        rng: &mut R,
    ) -> Self {
        let mut act = Self::identity(granularity, shape);
        if noise > 0.0 {
            act.coeffs.mapv_inplace(|c| c + rng.gen_range(-noise..=noise));
        }
        act
    }

    pub fn from_coeffs(granularity: Granularity, shape: (usize, usize, usize), coeffs: Array2<f64>) -> Result<Self> {
        let groups = Self::group_count(granularity, shape);
        if coeffs.dim() != (groups, 3) {
            return shape_err(format!(
                "{granularity} activation over {shape:?} needs ({groups}, 3) coefficients, got {:?}",
                coeffs.dim()
            ));
        }
        Ok(Self {
            granularity,
            shape,
            coeffs,
        })
    }

    pub fn group_count(granularity: Granularity, (n, h, w): (usize, usize, usize)) -> usize {
        match granularity {
            Granularity::Layer => 1,
            Granularity::Channel => n,
            Granularity::Element => n * h * w,
        }
    }

    pub fn group(&self, c: usize, i: usize, j: usize) -> usize {
        let (_, h, w) = self.shape;
        match self.granularity {
            Granularity::Layer => 0,
            Granularity::Channel => c,
            Granularity::Element => (c * h + i) * w + j,
        }
    }

    /// Coefficient triple applied at feature `(c, i, j)`.
    pub fn coeffs_at(&self, c: usize, i: usize, j: usize) -> [f64; 3] {
        let row = self.coeffs.row(self.group(c, i, j));
        [row[0], row[1], row[2]]
    }

    pub fn count_params(&self) -> (usize, usize) {
        let (n, h, w) = self.shape;
        count_params(self.granularity, n, h, w)
    }

    fn check(&self, x: &Array4<f64>) -> Result<()> {
        let (_, n, h, w) = x.dim();
        if (n, h, w) != self.shape {
            return shape_err(format!(
                "activation expects features {:?}, got {:?}",
                self.shape,
                (n, h, w)
            ));
        }
        Ok(())
    }

    /// Calls `f(group, index)` for every element of a batch.
    fn for_each<F>(&self, x: &Array4<f64>, mut f: F)
    where
        F: FnMut(usize, [usize; 4]),
    {
        let (m, n, h, w) = x.dim();
        for b in 0..m {
            for c in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        f(self.group(c, i, j), [b, c, i, j]);
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        self.check(x)?;
        let mut out = Array4::zeros(x.dim());
        self.for_each(x, |g, idx| {
            let v = x[idx];
            let c = self.coeffs.row(g);
            out[idx] = c[0] * v * v + c[1] * v + c[2];
        });
        Ok(out)
    }

    /// Gradient of `sum(upstream * p(x))` with respect to the coefficients,
    /// summed over the batch and over every position sharing a group.
    pub fn grad_coeffs(&self, x: &Array4<f64>, upstream: &Array4<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        if upstream.dim() != x.dim() {
            return shape_err("upstream gradient shape differs from input");
        }
        let mut g = Array2::zeros(self.coeffs.dim());
        self.for_each(x, |grp, idx| {
            let (v, u) = (x[idx], upstream[idx]);
            g[[grp, 0]] += u * v * v;
            g[[grp, 1]] += u * v;
            g[[grp, 2]] += u;
        });
        Ok(g)
    }

    /// `(2*c1*x + c2) * upstream`, elementwise.
    pub fn grad_input(&self, x: &Array4<f64>, upstream: &Array4<f64>) -> Result<Array4<f64>> {
        self.check(x)?;
        if upstream.dim() != x.dim() {
            return shape_err("upstream gradient shape differs from input");
        }
        let mut out = Array4::zeros(x.dim());
        self.for_each(x, |g, idx| {
            let c = self.coeffs.row(g);
            out[idx] = (2.0 * c[0] * x[idx] + c[1]) * upstream[idx];
        });
        Ok(out)
    }
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; zero elsewhere (including at 0).
pub fn relu_grad(x: &Array4<f64>, upstream: &Array4<f64>) -> Array4<f64> {
    let mut out = upstream.clone();
    Zip::from(&mut out).and(x).for_each(|o, &v| {
        if v <= 0.0 {
            *o = 0.0;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Array4<f64> {
        Array4::from_elem((1, 1, 1, 1), v)
    }

    fn layer(c: [f64; 3]) -> PolyActivation {
        PolyActivation::from_coeffs(Granularity::Layer, (1, 1, 1), array![[c[0], c[1], c[2]]]).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(layer([1.0, 0.0, 0.0]).eval(&scalar(3.0)).unwrap()[[0, 0, 0, 0]], 9.0);
        assert_eq!(
            layer([0.0, 1.0, 0.0]).eval(&scalar(-1.25)).unwrap()[[0, 0, 0, 0]],
            -1.25
        );
        assert_eq!(layer([0.5, -1.0, 2.0]).eval(&scalar(2.0)).unwrap()[[0, 0, 0, 0]], 2.0);
    }

    #[test]
    fn coefficient_gradient_examples() {
        let act = layer([0.3, 0.7, -0.1]);
        let g = act.grad_coeffs(&scalar(2.0), &scalar(1.0)).unwrap();
        assert_eq!(g.row(0).to_vec(), vec![4.0, 2.0, 1.0]);
        let g = act.grad_coeffs(&scalar(2.0), &scalar(0.0)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let x = Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 2.0]).unwrap();
        let g = act.grad_coeffs(&x, &Array4::ones(x.dim())).unwrap();
        assert_eq!(g[[0, 0]], 5.0);
        assert_eq!(g[[0, 1]], 3.0);
        assert_eq!(g[[0, 2]], 2.0);
    }

    #[test]
    fn input_gradient_examples() {
        assert_eq!(
            layer([1.0, 0.0, 0.0]).grad_input(&scalar(3.0), &scalar(1.0)).unwrap()[[0, 0, 0, 0]],
            6.0
        );
        assert_eq!(
            layer([0.0, 1.0, 0.0]).grad_input(&scalar(3.0), &scalar(0.4)).unwrap()[[0, 0, 0, 0]],
            0.4
        );
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        let up = Array4::from_elem(x.dim(), 0.7);
        assert_eq!(relu_grad(&x, &up).into_raw_vec_and_offset().0, vec![0.0, 0.7]);
        assert_eq!(relu(&x).into_raw_vec_and_offset().0, vec![0.0, 2.0]);
    }

    #[test]
    fn table_of_counts() {
        assert_eq!(count_params(Granularity::Layer, 64, 32, 32), (3, 64));
        assert_eq!(count_params(Granularity::Channel, 64, 32, 32), (192, 64));
        assert_eq!(count_params(Granularity::Element, 3, 32, 32), (9216, 3072));
        assert_eq!(
            PolyActivation::identity(Granularity::Element, (3, 32, 32)).coeffs.dim(),
            (3072, 3)
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let act = PolyActivation::identity(Granularity::Channel, (2, 3, 3));
        assert!(act.eval(&Array4::zeros((1, 3, 3, 3))).is_err());
        assert!(PolyActivation::from_coeffs(Granularity::Channel, (2, 3, 3), Array2::zeros((3, 3))).is_err());
    }

    fn batch(m: usize, shape: (usize, usize, usize), vals: &[f64]) -> Array4<f64> {
        let (n, h, w) = shape;
        Array4::from_shape_fn((m, n, h, w), |(a, b, c, d)| vals[((a * n + b) * h + c) * w + d])
    }

    fn probe() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        // 2 x (2, 2, 3) inputs, 12 groups x 3 coefficients at most
        let len = 2 * 2 * 2 * 3;
        (
            0usize..3,
            prop::collection::vec(-4.0..4.0f64, len),
            prop::collection::vec(-1.0..1.0f64, len),
            prop::collection::vec(-1.0..1.0f64, 36),
        )
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences((gi, xv, uv, cv) in probe()) {
            let shape = (2, 2, 3);
            let gran = Granularity::ALL[gi];
            let groups = PolyActivation::group_count(gran, shape);
            let coeffs = Array2::from_shape_vec((groups, 3), cv[..groups * 3].to_vec()).unwrap();
            let act = PolyActivation::from_coeffs(gran, shape, coeffs).unwrap();
            let x = batch(2, shape, &xv);
            let up = batch(2, shape, &uv);
            let loss = |a: &PolyActivation, x: &Array4<f64>| (a.eval(x).unwrap() * &up).sum();
            let h = 1e-4;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);

            let gc = act.grad_coeffs(&x, &up).unwrap();
            for g in 0..groups {
                for j in 0..3 {
                    let (mut p, mut m) = (act.clone(), act.clone());
                    p.coeffs[[g, j]] += h;
                    m.coeffs[[g, j]] -= h;
                    let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                    prop_assert!(rel(gc[[g, j]], num) < 1e-4);
                }
            }
            let gx = act.grad_input(&x, &up).unwrap();
            for (idx, &a) in gx.indexed_iter() {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[idx] += h;
                m[idx] -= h;
                let num = (loss(&act, &p) - loss(&act, &m)) / (2.0 * h);
                prop_assert!(rel(a, num) < 1e-4);
            }
        }

        #[test]
        fn element_granularity_nests_layer(c in prop::array::uniform3(-2.0..2.0f64), xv in prop::collection::vec(-4.0..4.0f64, 12)) {
            let shape = (3, 2, 2);
            let l = PolyActivation::from_coeffs(Granularity::Layer, shape, Array2::from_shape_vec((1, 3), c.to_vec()).unwrap()).unwrap();
            let mut e = PolyActivation::identity(Granularity::Element, shape);
            for mut row in e.coeffs.outer_iter_mut() {
                row.assign(&ndarray::arr1(&c));
            }
            let x = batch(1, shape, &xv);
            prop_assert_eq!(l.eval(&x).unwrap(), e.eval(&x).unwrap());
        }

        #[test]
        fn element_counts_scale_with_area(n in 1usize..128, h in 1usize..64, w in 1usize..64) {
            let (ce, _) = count_params(Granularity::Element, n, h, w);
            let (cc, _) = count_params(Granularity::Channel, n, h, w);
            prop_assert_eq!(ce, h * w * cc);
        }
    }
}
