//! Adaptive Gauss–Kronrod (7/15) quadrature.
//!
//! Nodes are interior to each panel, so integrands with jump discontinuities
//! at panel endpoints are handled as long as the caller splits there.

use super::MathError;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error_estimate: f64,
    pub evaluations: usize,
}

fn panel(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

fn adapt(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    depth: u32,
    evals: &mut usize,
) -> (f64, f64, bool) {
    let (v, err) = panel(f, a, b);
    *evals += 15;
    if err <= tol.max(f64::EPSILON * v.abs()) {
        return (v, err, true);
    }
    if depth >= MAX_DEPTH {
        return (v, err, false);
    }
    let m = 0.5 * (a + b);
    let (l, le, lok) = adapt(f, a, m, 0.5 * tol, depth + 1, evals);
    let (r, re, rok) = adapt(f, m, b, 0.5 * tol, depth + 1, evals);
    (l + r, le + re, lok && rok)
}

/// Integrates `f` over `[a, b]`, splitting at every breakpoint inside the
/// interval. `tol` is an absolute tolerance for the whole integral.
pub fn integrate(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    tol: f64,
) -> Result<Quadrature, MathError> {
    if a.partial_cmp(&b) != Some(std::cmp::Ordering::Less) || !a.is_finite() || !b.is_finite() {
        return Err(MathError::Domain(format!("bad integration interval [{a}, {b}]")));
    }
    let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&x| x > a && x < b).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(a);
    edges.extend(cuts);
    edges.push(b);

    let pieces = (edges.len() - 1) as f64;
    let mut total = Quadrature { value: 0.0, error_estimate: 0.0, evaluations: 0 };
    let mut converged = true;
    for w in edges.windows(2) {
        let (v, e, ok) = adapt(&f, w[0], w[1], tol / pieces, 0, &mut total.evaluations);
        total.value += v;
        total.error_estimate += e;
        converged &= ok;
    }
    if !converged || !total.value.is_finite() {
        return Err(MathError::Quadrature { achieved: total.error_estimate, requested: tol });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0, &[], 1e-12).unwrap();
        assert!((q.value - 0.0).abs() < 1e-13);
    }

    #[test]
    fn smooth_function() {
        let q = integrate(f64::sin, 0.0, std::f64::consts::PI, &[], 1e-12).unwrap();
        assert!((q.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jump_at_breakpoint() {
        let step = |x: f64| if x >= 0.3 { 1.0 } else { 0.0 };
        let q = integrate(step, 0.0, 1.0, &[0.3], 1e-12).unwrap();
        assert!((q.value - 0.7).abs() < 1e-14);
    }

    #[test]
    fn unsplit_jump_fails_to_converge() {
        let step = |x: f64| if x >= 1.0 / 3.0 { 1.0 } else { 0.0 };
        let err = integrate(step, 0.0, 1.0, &[], 1e-300).unwrap_err();
        assert!(matches!(err, MathError::Quadrature { .. }));
    }
}
