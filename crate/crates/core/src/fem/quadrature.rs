//! Quadrature rules on the reference triangle and the reference interval.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("no quadrature rule of degree {0} (supported: 2, 4)")]
pub struct UnsupportedDegree(pub usize);

/// Points and weights on the reference triangle (0,0), (1,0), (0,1).
/// Weights sum to the reference area 1/2.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub degree: usize,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn quadrature(degree: usize) -> Result<QuadratureRule, UnsupportedDegree> {
    match degree {
        2 => {
            let (a, b) = (1.0 / 6.0, 2.0 / 3.0);
            Ok(QuadratureRule {
                degree,
                points: vec![[a, a], [b, a], [a, b]],
                weights: vec![1.0 / 6.0; 3],
            })
        }
        4 => {
            // Strang-Fix / Dunavant six-point rule
            let a = 0.445_948_490_915_964_886_3;
            let wa = 0.223_381_589_678_011_465_7 / 2.0;
            let b = 0.091_576_213_509_770_743_46;
            let wb = 0.109_951_743_655_321_867_6 / 2.0;
            Ok(QuadratureRule {
                degree,
                points: vec![
                    [a, a],
                    [1.0 - 2.0 * a, a],
                    [a, 1.0 - 2.0 * a],
                    [b, b],
                    [1.0 - 2.0 * b, b],
                    [b, 1.0 - 2.0 * b],
                ],
                weights: vec![wa, wa, wa, wb, wb, wb],
            })
        }
        d => Err(UnsupportedDegree(d)),
    }
}

/// Two-point Gauss-Legendre rule on [0, 1], exact for cubics.
pub fn edge_gauss() -> [(f64, f64); 2] {
    let d = 0.5 / 3f64.sqrt();
    [(0.5 - d, 0.5), (0.5 + d, 0.5)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn integrate(rule: &QuadratureRule, f: impl Fn(f64, f64) -> f64) -> f64 {
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| w * f(p[0], p[1]))
            .sum()
    }

    /// Exact integral of x^i y^j over the reference triangle: i! j! / (i+j+2)!
    fn monomial(i: u32, j: u32) -> f64 {
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        fact(i) * fact(j) / fact(i + j + 2)
    }

    #[test]
    fn weights_sum_to_reference_area() {
        for d in [2, 4] {
            let r = quadrature(d).unwrap();
            assert_relative_eq!(r.weights.iter().sum::<f64>(), 0.5, epsilon = 1e-15);
            assert!(r.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn frozen_monomial_values() {
        let r2 = quadrature(2).unwrap();
        assert_relative_eq!(integrate(&r2, |x, y| x * y), 1.0 / 24.0, epsilon = 1e-15);
        let r4 = quadrature(4).unwrap();
        assert_relative_eq!(integrate(&r4, |x, _| x.powi(4)), 1.0 / 30.0, epsilon = 1e-14);
    }

    #[test]
    fn exact_up_to_stated_degree() {
        for d in [2usize, 4] {
            let r = quadrature(d).unwrap();
            for i in 0..=d as u32 {
                for j in 0..=(d as u32 - i) {
                    let q = integrate(&r, |x, y| x.powi(i as i32) * y.powi(j as i32));
                    assert_relative_eq!(q, monomial(i, j), epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn unsupported_degree() {
        assert_eq!(quadrature(3), Err(UnsupportedDegree(3)));
    }

    #[test]
    fn edge_rule_is_exact_for_cubics() {
        let q: f64 = edge_gauss().iter().map(|(t, w)| w * t.powi(3)).sum();
        assert_relative_eq!(q, 0.25, epsilon = 1e-15);
    }
}
