//! Scalar activations that can be approximated by a [`PwlTable`](super::PwlTable).

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Exp,
    Cos,
    Gelu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Exp,
        Activation::Cos,
        Activation::Gelu,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
            Activation::Cos => x.cos(),
            Activation::Gelu => gelu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp",
            Activation::Cos => "cos",
            Activation::Gelu => "gelu",
        }
    }

    /// Conventional input clip range.
    ///
    /// sigmoid/tanh: outside it the function is within 1e-6 of its
    /// asymptote. exp is used after the softmax max-shift, so its domain
    /// ends at 0.
    pub fn input_range(self) -> (f64, f64) {
        match self {
            Activation::Sigmoid => (-14.0, 14.0),
            Activation::Tanh => (-8.0, 8.0),
            Activation::Exp => (-10.0, 0.0),
            Activation::Cos => (-PI, PI),
            Activation::Gelu => (-2.0, 2.0),
        }
    }

    /// Output range covering the image of [`Self::input_range`], widened to
    /// contain zero.
    pub fn output_range(self) -> (f64, f64) {
        match self {
            Activation::Sigmoid => (0.0, 1.0),
            Activation::Tanh => (-1.0, 1.0),
            Activation::Exp => (0.0, 1.0),
            Activation::Cos => (-1.0, 1.0),
            // min of x*Phi(x) is about -0.16997 at x = -0.7518
            Activation::Gelu => (-0.17, 2.0),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownActivation(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup() {
        for a in Activation::ALL {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
        assert!(matches!(
            "relu".parse::<Activation>(),
            Err(Error::UnknownActivation(_))
        ));
    }

    #[test]
    fn saturating_ranges() {
        let (lo, hi) = Activation::Tanh.input_range();
        assert_eq!((lo, hi), (-8.0, 8.0));
        assert!(hi.tanh() > 1.0 - 1e-6 && lo.tanh() < -1.0 + 1e-6);
        let (lo, hi) = Activation::Sigmoid.input_range();
        assert!(sigmoid(hi) > 1.0 - 1e-6 && sigmoid(lo) < 1e-6);
        assert_eq!(Activation::Exp.input_range(), (-10.0, 0.0));
        assert_eq!(Activation::Cos.input_range(), (-PI, PI));
    }

    #[test]
    fn output_ranges_cover_image() {
        for a in Activation::ALL {
            let (lo, hi) = a.input_range();
            let (olo, ohi) = a.output_range();
            for i in 0..=10_000 {
                let x = lo + (hi - lo) * i as f64 / 10_000.0;
                let y = a.eval(x);
                assert!(y >= olo && y <= ohi, "{a} at {x}: {y}");
            }
        }
    }

    #[test]
    fn known_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert_eq!(gelu(0.0), 0.0);
    }
}
