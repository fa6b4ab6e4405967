//! Globally adaptive Gauss-Kronrod (10/21 point) integration on a finite interval.
//!
//! The interval with the largest error estimate is bisected until the summed
//! error estimate meets the target. Results are summed in left-to-right order of
//! the final partition so they do not depend on refinement history.

use crate::error::{Error, Result};

// Kronrod abscissae on [0, 1]; odd indices are the 10-point Gauss nodes.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_600_365_317_613,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

#[allow(clippy::excessive_precision)]
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

fn kronrod21<F>(f: &mut F, a: f64, b: f64) -> Result<Segment>
where
    F: FnMut(f64) -> Result<f64>,
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center)?;
    let mut kronrod = WGK[10] * fc;
    let mut gauss = 0.0;
    let mut abs_sum = WGK[10] * fc.abs();
    let mut fv = [(0.0, 0.0); 10];
    for (i, &x) in XGK[..10].iter().enumerate() {
        let lo = f(center - half * x)?;
        let hi = f(center + half * x)?;
        fv[i] = (lo, hi);
        kronrod += WGK[i] * (lo + hi);
        abs_sum += WGK[i] * (lo.abs() + hi.abs());
        if i % 2 == 1 {
            gauss += WG[i / 2] * (lo + hi);
        }
    }
    let mean = 0.5 * kronrod;
    let mut asc = WGK[10] * (fc - mean).abs();
    for (i, &(lo, hi)) in fv.iter().enumerate() {
        asc += WGK[i] * ((lo - mean).abs() + (hi - mean).abs());
    }
    let value = kronrod * half;
    let res_abs = abs_sum * half.abs();
    let res_asc = asc * half.abs();
    let mut error = ((kronrod - gauss) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Ok(Segment { a, b, value, error })
}

/// Integrates `f` over the partition given by `breakpoints` (sorted, at least two
/// points) to `max(abs_tol, rel_tol |I|)`.
pub fn integrate<F>(mut f: F, breakpoints: &[f64], abs_tol: f64, rel_tol: f64, max_intervals: usize) -> Result<Integral>
where
    F: FnMut(f64) -> Result<f64>,
{
    debug_assert!(breakpoints.len() >= 2);
    let mut segments = Vec::with_capacity(breakpoints.len() * 4);
    for pair in breakpoints.windows(2) {
        if pair[1] > pair[0] {
            segments.push(kronrod21(&mut f, pair[0], pair[1])?);
        }
    }
    loop {
        let value: f64 = ordered_sum(&mut segments, |s| s.value);
        let error: f64 = segments.iter().map(|s| s.error).sum();
        let target = abs_tol.max(rel_tol * value.abs());
        if error <= target {
            return Ok(Integral {
                value,
                error,
                intervals: segments.len(),
            });
        }
        if segments.len() >= max_intervals {
            return Err(Error::ToleranceNotMet {
                intervals: segments.len(),
                error,
                target,
            });
        }
        let (worst, _) = segments
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, s)| {
                if s.error > best.1 {
                    (i, s.error)
                } else {
                    best
                }
            });
        let s = segments.swap_remove(worst);
        let mid = 0.5 * (s.a + s.b);
        if !(mid > s.a && mid < s.b) {
            // interval has collapsed to adjacent floats; nothing left to refine
            return Err(Error::ToleranceNotMet {
                intervals: segments.len() + 1,
                error,
                target,
            });
        }
        segments.push(kronrod21(&mut f, s.a, mid)?);
        segments.push(kronrod21(&mut f, mid, s.b)?);
    }
}

fn ordered_sum(segments: &mut [Segment], key: impl Fn(&Segment) -> f64) -> f64 {
    segments.sort_by(|x, y| x.a.total_cmp(&y.a));
    segments.iter().map(key).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| Ok(x.powi(7) - 3.0 * x * x), &[0.0, 2.0], 1e-11, 1e-12, 10).unwrap();
        assert!((r.value - (32.0 - 8.0)).abs() < 1e-12);
    }

    #[test]
    fn lorentzian_peak() {
        // integral over [0, 10] of eps / ((x - 3)^2 + eps^2) = atan(7/eps) + atan(3/eps)
        let eps = 1e-3;
        let exact = (7.0f64 / eps).atan() + (3.0f64 / eps).atan();
        let r = integrate(
            |x| Ok(eps / ((x - 3.0).powi(2) + eps * eps)),
            &[0.0, 10.0],
            1e-13,
            1e-11,
            2000,
        )
        .unwrap();
        assert!((r.value - exact).abs() < 1e-10 * exact, "{} vs {}", r.value, exact);
    }

    #[test]
    fn reports_stall() {
        let r = integrate(|x| Ok(x.sin() * 1e3), &[0.0, 1e4], 1e-30, 0.0, 4);
        assert!(matches!(r, Err(Error::ToleranceNotMet { .. })));
    }

    #[test]
    fn propagates_integrand_errors() {
        let r = integrate(
            |x| {
                if x > 0.5 {
                    Err(Error::PoleOnGrid { omega: x })
                } else {
                    Ok(1.0)
                }
            },
            &[0.0, 1.0],
            1e-9,
            1e-9,
            10,
        );
        assert!(matches!(r, Err(Error::PoleOnGrid { .. })));
    }
}
