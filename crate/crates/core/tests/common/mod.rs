//! Test-only numerical oracles, independent of the library's series code.
#![allow(dead_code)]

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
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod integral of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut stack = vec![(a, b, 0usize)];
    let (whole, _) = gk15(&f, a, b);
    let scale = whole.abs().max(1e-300);
    let mut total = 0.0;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (v, err) = gk15(&f, lo, hi);
        let share = (hi - lo).abs() / (b - a).abs();
        if err <= rel_tol * scale * share.max(1e-3) || depth > 40 {
            total += v;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    total
}

const TOL: f64 = 1e-12;

pub fn phi1(x: f64) -> f64 {
    integrate(|t| (t * t).exp(), 0.0, x, TOL)
}

pub fn psi1(x: f64) -> f64 {
    std::f64::consts::PI.sqrt() * integrate(|t| (t * t).exp() * statrs::function::erf::erf(t), 0.0, x, TOL)
}

pub fn phi2(x: f64) -> f64 {
    2.0 * integrate(
        |t| (t * t).exp() * integrate(|u| (-u * u).exp() * phi1(u), 0.0, t, TOL),
        0.0,
        x,
        TOL,
    )
}

pub fn psi2(x: f64) -> f64 {
    2.0 * integrate(
        |t| (t * t).exp() * integrate(|u| (-u * u).exp() * psi1(u), 0.0, t, TOL),
        0.0,
        x,
        TOL,
    )
}

/// `∫_{−∞}^0 e^{−u²} ∫_0^u e^{t²} ∫_{−∞}^t e^{−s²} ds dt du`, with the outer
/// range truncated where the Gaussian weight underflows.
pub fn decomposition_constant() -> f64 {
    let half_sqrt_pi = 0.5 * std::f64::consts::PI.sqrt();
    let inner = |t: f64| (t * t).exp() * half_sqrt_pi * statrs::function::erf::erfc(-t);
    integrate(|u| (-u * u).exp() * integrate(inner, 0.0, u, 1e-12), -12.0, 0.0, 1e-10)
}
