//! Adaptive Gauss-Kronrod (7/15) quadrature on finite intervals.

use crate::error::{Error, Result};

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
    0.209_482_141_084_728,
];

// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5, 7).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 20_000;
const INITIAL_PIECES: usize = 16;

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Integrates `f` over `[a, b]` until the summed error estimate falls below
/// `tol * |I|`, with `I` first estimated on 16 equal pieces.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut pending: Vec<(f64, f64)> = (0..INITIAL_PIECES)
        .rev()
        .map(|i| {
            let lo = a + (b - a) * i as f64 / INITIAL_PIECES as f64;
            let hi = a + (b - a) * (i + 1) as f64 / INITIAL_PIECES as f64;
            (lo, hi)
        })
        .collect();
    let mut done: Vec<(f64, f64)> = Vec::new();
    let mut intervals = 0usize;
    // a first pass over the initial pieces fixes the scale for per-interval budgets
    let scale = pending
        .iter()
        .map(|&(lo, hi)| gk15(f, lo, hi).0)
        .sum::<f64>()
        .abs()
        .max(1e-300);
    let width = b - a;
    while let Some((lo, hi)) = pending.pop() {
        intervals += 1;
        if intervals > MAX_INTERVALS {
            return Err(Error::QuadratureNonConvergent(format!(
                "more than {MAX_INTERVALS} subintervals on [{a}, {b}]"
            )));
        }
        let (val, err) = gk15(f, lo, hi);
        if !val.is_finite() {
            return Err(Error::QuadratureNonConvergent(format!(
                "non-finite integrand on [{lo}, {hi}]"
            )));
        }
        let budget = tol * scale * (hi - lo) / width;
        if err <= budget || hi - lo < 1e-12 * width {
            done.push((lo, val));
        } else {
            let mid = 0.5 * (lo + hi);
            pending.push((mid, hi));
            pending.push((lo, mid));
        }
    }
    done.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(done.iter().map(|(_, v)| v).sum())
}

/// Integrates over `[center - width, center + width]` and checks that widening
/// the window by half again changes the result by less than `tol`.
pub fn integrate_window(f: &dyn Fn(f64) -> f64, center: f64, width: f64, tol: f64) -> Result<f64> {
    let inner = integrate(f, center - width, center + width, tol)?;
    let outer = integrate(f, center - 1.5 * width, center + 1.5 * width, tol)?;
    let gap = (outer - inner).abs() / outer.abs().max(f64::MIN_POSITIVE);
    if gap > 10.0 * tol.max(1e-14) {
        return Err(Error::QuadratureNonConvergent(format!(
            "tail truncation at +-{width} around {center} changes the integral by relative {gap:e}"
        )));
    }
    Ok(outer)
}
