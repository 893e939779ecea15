//! Activation quantizers and straight-through estimators.
//!
//! All quantizers live on the `[0, 1]` codomain: inputs are clipped to
//! `[0, 1]` and rounded onto `L` uniform levels. A binary activation is
//! `L = 2` (threshold 0.5), ternary is `L = 3` (thresholds 0.25, 0.75).
//!
//! Each STE pairs a differentiable approximation `g` with its derivative.
//! The backward pass of a quantized layer uses `g'` in place of the
//! quantizer's zero-almost-everywhere derivative.
//!
//! SwishSign and the Bi-Real polynomial are usually written on `[-1, 1]`.
//! Here they are rescaled with `u = 2x - 1`, `y = (h(u) + 1) / 2`, which
//! keeps slopes in the `x` frame equal to `h'(u)`. Their exact constants
//! are configuration, not fixed facts: SwishSign takes `beta` (default 5).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::math::{quad, MathError};

/// Default `beta` for [`Ste::SwishSign`].
pub const DEFAULT_SWISH_BETA: f64 = 5.0;

/// SwishSign is cut to exactly 0 / 1 once `|beta * u|` exceeds this; the
/// derivative there is below `beta * 1e-7`.
const SWISH_CUTOFF: f64 = 20.0;

/// `round(clip(x, 0, 1) * (L - 1)) / (L - 1)`, ties rounded away from zero.
#[inline]
pub fn quantize(x: f64, levels: u32) -> f64 {
    debug_assert!(levels >= 2);
    let steps = f64::from(levels - 1);
    (x.clamp(0.0, 1.0) * steps).round() / steps
}

/// Input values at which `quantize(·, levels)` jumps.
pub fn thresholds(levels: u32) -> Vec<f64> {
    let steps = f64::from(levels - 1);
    (1..levels).map(|i| (2.0 * f64::from(i) - 1.0) / (2.0 * steps)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ste {
    /// `clip(x, 0, 1)`.
    Relu1,
    /// `clip(slope * (x - 0.5) + 0.5, 0, 1)`.
    Steep { slope: f64 },
    SwishSign { beta: f64 },
    /// Bi-Real piecewise quadratic.
    Polynomial,
    /// `g(x) = x`, derivative 1 everywhere.
    Identity,
}

impl Ste {
    pub fn steep(slope: f64) -> Self {
        Ste::Steep { slope }
    }

    pub fn swish_sign() -> Self {
        Ste::SwishSign { beta: DEFAULT_SWISH_BETA }
    }

    /// The differentiable approximation `g(x)`.
    pub fn forward_approx(self, x: f64) -> f64 {
        match self {
            Ste::Relu1 => x.clamp(0.0, 1.0),
            Ste::Steep { slope } => (slope * (x - 0.5) + 0.5).clamp(0.0, 1.0),
            Ste::SwishSign { beta } => {
                let bu = beta * (2.0 * x - 1.0);
                if bu <= -SWISH_CUTOFF {
                    0.0
                } else if bu >= SWISH_CUTOFF {
                    1.0
                } else {
                    let s = sigmoid(bu);
                    s * (1.0 + bu * (1.0 - s))
                }
            }
            Ste::Polynomial => {
                let u = 2.0 * x - 1.0;
                let h = if u < -1.0 {
                    -1.0
                } else if u < 0.0 {
                    2.0 * u + u * u
                } else if u < 1.0 {
                    2.0 * u - u * u
                } else {
                    1.0
                };
                0.5 * (h + 1.0)
            }
            Ste::Identity => x,
        }
    }

    /// `g'(x)`, zero outside a bounded interval for every variant except
    /// `Identity`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Ste::Relu1 => {
                if x > 0.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Ste::Steep { slope } => {
                if (x - 0.5).abs() < 0.5 / slope {
                    slope
                } else {
                    0.0
                }
            }
            Ste::SwishSign { beta } => {
                let bu = beta * (2.0 * x - 1.0);
                if bu.abs() >= SWISH_CUTOFF {
                    0.0
                } else {
                    // d/du of 2σ(βu)[1 + βu(1 − σ(βu))] − 1, halved by the
                    // output rescale and doubled by du/dx.
                    beta * (2.0 - bu * (0.5 * bu).tanh()) / (1.0 + bu.cosh())
                }
            }
            Ste::Polynomial => {
                let u = 2.0 * x - 1.0;
                if (-1.0..0.0).contains(&u) {
                    2.0 + 2.0 * u
                } else if (0.0..1.0).contains(&u) {
                    2.0 - 2.0 * u
                } else {
                    0.0
                }
            }
            Ste::Identity => 1.0,
        }
    }

    /// Interval outside of which `g` is constant (0 below, 1 above).
    pub fn support(self) -> Option<(f64, f64)> {
        match self {
            Ste::Relu1 | Ste::Polynomial => Some((0.0, 1.0)),
            Ste::Steep { slope } => Some((0.5 - 0.5 / slope, 0.5 + 0.5 / slope)),
            Ste::SwishSign { beta } => {
                let half = SWISH_CUTOFF / (2.0 * beta);
                Some((0.5 - half, 0.5 + half))
            }
            Ste::Identity => None,
        }
    }

    /// Points where `g` or `g'` is not smooth.
    fn kinks(self) -> Vec<f64> {
        match self {
            Ste::Polynomial => vec![0.0, 0.5, 1.0],
            other => other.support().map(|(a, b)| vec![a, b]).unwrap_or_default(),
        }
    }

    pub fn validate(self) -> Result<(), String> {
        match self {
            Ste::Steep { slope } if !(slope.is_finite() && slope > 0.0) => {
                Err(format!("steep slope must be positive, got {slope}"))
            }
            Ste::SwishSign { beta } if !(beta.is_finite() && beta > 0.0) => {
                Err(format!("swishsign beta must be positive, got {beta}"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports and on the command line.
    pub fn label(self) -> String {
        match self {
            Ste::Relu1 => "relu1".into(),
            Ste::Steep { slope } => format!("steep{slope}"),
            Ste::SwishSign { beta } if beta == DEFAULT_SWISH_BETA => "swishsign".into(),
            Ste::SwishSign { beta } => format!("swishsign{beta}"),
            Ste::Polynomial => "poly".into(),
            Ste::Identity => "identity".into(),
        }
    }

    /// Parses labels produced by [`Ste::label`].
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        let num = |rest: &str| -> Result<f64, String> {
            rest.parse::<f64>().map_err(|_| format!("bad STE parameter in {s:?}"))
        };
        let ste = match s.as_str() {
            "relu1" => Ste::Relu1,
            "poly" | "polynomial" => Ste::Polynomial,
            "identity" => Ste::Identity,
            "swishsign" | "swish" => Ste::swish_sign(),
            _ if s.starts_with("swishsign") => Ste::SwishSign { beta: num(&s["swishsign".len()..])? },
            _ if s.starts_with("steep") => Ste::Steep { slope: num(&s["steep".len()..])? },
            _ => return Err(format!("unknown STE {s:?}")),
        };
        ste.validate()?;
        Ok(ste)
    }
}

impl fmt::Display for Ste {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Forward pass uses the STE's `g` directly.
    Full,
    /// Uniform quantizer with this many levels (≥ 2).
    Levels(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub precision: Precision,
    pub ste: Ste,
}

impl ActivationSpec {
    pub fn quantized(levels: u32, ste: Ste) -> Self {
        Self { precision: Precision::Levels(levels), ste }
    }

    pub fn binary(ste: Ste) -> Self {
        Self::quantized(2, ste)
    }

    pub fn ternary(ste: Ste) -> Self {
        Self::quantized(3, ste)
    }

    pub fn full(ste: Ste) -> Self {
        Self { precision: Precision::Full, ste }
    }

    /// Linear output activation.
    pub fn identity() -> Self {
        Self::full(Ste::Identity)
    }

    pub fn levels(&self) -> Option<u32> {
        match self.precision {
            Precision::Levels(l) => Some(l),
            Precision::Full => None,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.precision, Precision::Full) && matches!(self.ste, Ste::Identity)
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Precision::Levels(l) = self.precision {
            if l < 2 {
                return Err(format!("quantizer needs at least 2 levels, got {l}"));
            }
        }
        self.ste.validate()
    }

    #[inline]
    pub fn forward(&self, x: f64) -> f64 {
        match self.precision {
            Precision::Levels(l) => quantize(x, l),
            Precision::Full => self.ste.forward_approx(x),
        }
    }

    /// Local derivative used by backprop: the STE derivative.
    #[inline]
    pub fn backward(&self, x: f64) -> f64 {
        self.ste.derivative(x)
    }

    /// Open interval around `x` on which `forward` is affine, with its
    /// slope. `None` on a breakpoint or where the map is curved.
    pub fn linear_piece(&self, x: f64) -> Option<(f64, f64, f64)> {
        let (breaks, slopes): (Vec<f64>, Vec<f64>) = match (self.precision, self.ste) {
            (Precision::Levels(l), _) => {
                let t = thresholds(l);
                let n = t.len() + 1;
                (t, vec![0.0; n])
            }
            (Precision::Full, Ste::Identity) => (vec![], vec![1.0]),
            (Precision::Full, Ste::Relu1) => (vec![0.0, 1.0], vec![0.0, 1.0, 0.0]),
            (Precision::Full, Ste::Steep { slope }) => {
                let (a, b) = self.ste.support()?;
                (vec![a, b], vec![0.0, slope, 0.0])
            }
            (Precision::Full, ste) => {
                let (a, b) = ste.support()?;
                return if x < a {
                    Some((f64::NEG_INFINITY, a, 0.0))
                } else if x > b {
                    Some((b, f64::INFINITY, 0.0))
                } else {
                    None
                };
            }
        };
        if breaks.contains(&x) || x.is_nan() {
            return None;
        }
        let i = breaks.partition_point(|&b| b < x);
        let lo = if i == 0 { f64::NEG_INFINITY } else { breaks[i - 1] };
        let hi = breaks.get(i).copied().unwrap_or(f64::INFINITY);
        Some((lo, hi, slopes[i]))
    }

    /// `binary`, `ternary`, `2bit`, `full` or `<L>level`.
    pub fn precision_label(&self) -> String {
        match self.precision {
            Precision::Full => "full".into(),
            Precision::Levels(2) => "binary".into(),
            Precision::Levels(3) => "ternary".into(),
            Precision::Levels(l) if l.is_power_of_two() => format!("{}bit", l.trailing_zeros()),
            Precision::Levels(l) => format!("{l}level"),
        }
    }

    pub fn parse_precision(s: &str) -> Result<Precision, String> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "full" | "fp" | "full-precision" => Precision::Full,
            "binary" => Precision::Levels(2),
            "ternary" => Precision::Levels(3),
            _ if s.ends_with("bit") => {
                let k: u32 = s[..s.len() - 3].parse().map_err(|_| format!("bad precision {s:?}"))?;
                if !(1..=16).contains(&k) {
                    return Err(format!("bit width out of range in {s:?}"));
                }
                Precision::Levels(1 << k)
            }
            _ if s.ends_with("level") => {
                let l: u32 = s[..s.len() - 5].parse().map_err(|_| format!("bad precision {s:?}"))?;
                if l < 2 {
                    return Err(format!("need at least 2 levels in {s:?}"));
                }
                Precision::Levels(l)
            }
            _ => return Err(format!("unknown activation precision {s:?}")),
        })
    }
}

/// `∫ |f - g| dx` for the `levels`-level quantizer `f` and the STE's `g`.
///
/// Integrated with adaptive Gauss–Kronrod over the bounded interval where
/// the two can differ, split at every jump and kink.
pub fn cumulative_difference(ste: Ste, levels: u32) -> Result<f64, MathError> {
    if levels < 2 {
        return Err(MathError::Domain(format!("quantizer needs at least 2 levels, got {levels}")));
    }
    let (lo, hi) = ste
        .support()
        .ok_or_else(|| MathError::Domain(format!("{ste} is unbounded; the difference diverges")))?;
    let mut breaks = thresholds(levels);
    breaks.extend(ste.kinks());
    integrate_abs_difference(
        |x| quantize(x, levels),
        |x| ste.forward_approx(x),
        lo.min(0.0),
        hi.max(1.0),
        &breaks,
    )
}

/// `∫_a^b |f - g| dx` with splits at `breakpoints`, to 1e-12 absolute.
pub fn integrate_abs_difference(
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    breakpoints: &[f64],
) -> Result<f64, MathError> {
    quad::integrate(|x| (f(x) - g(x)).abs(), a, b, breakpoints, 1e-12).map(|q| q.value)
}
