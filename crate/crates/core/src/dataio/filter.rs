//! Butterworth band-stop design and zero-phase second-order-section
//! filtering.

use rustfft::num_complex::Complex64;

/// One biquad `[b0, b1, b2, a0, a1, a2]` with `a0 == 1`.
pub type Section = [f64; 6];

/// Cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Section>,
}

impl SosFilter {
    /// Digital Butterworth band-stop of prototype order `order` (the
    /// resulting filter has order `2 * order`), designed by bilinear
    /// transform with pre-warped band edges.
    pub fn butter_bandstop(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> SosFilter {
        assert!(order >= 1 && 0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0);
        let n = order as f64;
        // analog low-pass prototype, unit gain
        let proto: Vec<Complex64> = (0..order)
            .map(|k| {
                let m = -(n - 1.0) + 2.0 * k as f64;
                -Complex64::from_polar(1.0, std::f64::consts::PI * m / (2.0 * n))
            })
            .collect();

        let fs2 = 2.0 * fs;
        let warp = |f: f64| fs2 * (std::f64::consts::PI * f / fs).tan();
        let (w1, w2) = (warp(low_hz), warp(high_hz));
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();

        // low-pass to band-stop: each pole splits in two, zeros at +-j*w0
        let mut poles = Vec::with_capacity(2 * order);
        for &p in &proto {
            let php = (bw / 2.0) / p;
            let disc = (php * php - w0 * w0).sqrt();
            poles.push(php + disc);
            poles.push(php - disc);
        }
        let mut zeros = Vec::with_capacity(2 * order);
        for _ in 0..order {
            zeros.push(Complex64::new(0.0, w0));
            zeros.push(Complex64::new(0.0, -w0));
        }
        let prod_neg = |v: &[Complex64]| v.iter().fold(Complex64::new(1.0, 0.0), |acc, &x| acc * -x);
        let k_analog = (prod_neg(&zeros) / prod_neg(&poles)).re;

        // bilinear transform
        let map = |s: Complex64| (fs2 + s) / (fs2 - s);
        let prod_fs = |v: &[Complex64]| {
            v.iter()
                .fold(Complex64::new(1.0, 0.0), |acc, &x| acc * (fs2 - x))
        };
        let k_digital = k_analog * (prod_fs(&zeros) / prod_fs(&poles)).re;
        let zd: Vec<Complex64> = zeros.iter().map(|&z| map(z)).collect();
        let pd: Vec<Complex64> = poles.iter().map(|&p| map(p)).collect();

        // pair conjugates (upper half-plane representatives)
        let upper = |v: &[Complex64]| -> Vec<Complex64> {
            let mut u: Vec<Complex64> = v.iter().copied().filter(|z| z.im > 0.0).collect();
            u.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
            u
        };
        let zu = upper(&zd);
        let pu = upper(&pd);
        assert_eq!(zu.len(), order);
        assert_eq!(pu.len(), order);
        let sections = zu
            .iter()
            .zip(&pu)
            .enumerate()
            .map(|(i, (z, p))| {
                let g = if i == 0 { k_digital } else { 1.0 };
                [
                    g,
                    -2.0 * z.re * g,
                    z.norm_sqr() * g,
                    1.0,
                    -2.0 * p.re,
                    p.norm_sqr(),
                ]
            })
            .collect();
        SosFilter { sections }
    }

    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            acc * (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2)
        })
    }

    /// Steady-state initial conditions for a unit step input.
    fn step_zi(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
                let dc = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let zi = [
                    scale * (b1 + b2 - (a1 + a2) * dc),
                    scale * (b2 - a2 * dc),
                ];
                scale *= dc;
                zi
            })
            .collect()
    }

    /// Causal filtering (transposed direct form II) from state `zi`.
    fn run(&self, x: &[f64], zi: &[[f64; 2]], zi_scale: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z0) in self.sections.iter().zip(zi) {
            let mut z = [z0[0] * zi_scale, z0[1] * zi_scale];
            for v in y.iter_mut() {
                let xin = *v;
                let out = s[0] * xin + z[0];
                z[0] = s[1] * xin - s[4] * out + z[1];
                z[1] = s[2] * xin - s[5] * out;
                *v = out;
            }
        }
        y
    }

    /// Forward-backward (zero-phase) filtering with odd-reflection edge
    /// padding and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let padlen = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * padlen);
        for i in (1..=padlen).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=padlen {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.step_zi();
        let fwd = self.run(&ext, &zi, ext[0]);
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        let start = rev[0];
        rev = self.run(&rev, &zi, start);
        rev.reverse();
        rev[padlen..padlen + n].to_vec()
    }
}
