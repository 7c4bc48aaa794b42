use serde::{Deserialize, Serialize};

use crate::grid::Grid;

/// Two-sample Kolmogorov-Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// The statistic is the largest gap between the empirical CDFs; the p-value
/// uses the asymptotic distribution with the usual small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    if a.is_empty() || b.is_empty() {
        return KsResult {
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_q((ne + 0.12 + 0.11 / ne) * d),
    }
}

/// Finite differences across the wrap boundary compared with interior ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    pub ks: KsResult,
    pub seam_samples: usize,
    pub interior_samples: usize,
    pub seam_mean_abs: f64,
    pub interior_mean_abs: f64,
}

impl SeamReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.ks.p_value > alpha
    }
}

/// Horizontal and vertical neighbour differences, split into those that cross
/// the periodic boundary and those that do not.
pub fn seam_differences(g: &Grid) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = g.shape();
    let (mut seam, mut interior) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = g.get(y, x, ch);
                if w > 1 {
                    let d = g.get(y, (x + 1) % w, ch) - v;
                    if x + 1 == w {
                        seam.push(d)
                    } else {
                        interior.push(d)
                    }
                }
                if h > 1 {
                    let d = g.get((y + 1) % h, x, ch) - v;
                    if y + 1 == h {
                        seam.push(d)
                    } else {
                        interior.push(d)
                    }
                }
            }
        }
    }
    (seam, interior)
}

pub fn seam_report(g: &Grid) -> SeamReport {
    let (seam, interior) = seam_differences(g);
    let mean_abs = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
        }
    };
    SeamReport {
        ks: ks_two_sample(&seam, &interior),
        seam_samples: seam.len(),
        interior_samples: interior.len(),
        seam_mean_abs: mean_abs(&seam),
        interior_mean_abs: mean_abs(&interior),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identical_samples_have_zero_statistic() {
        let a = [0.1, 0.4, 0.2, 0.9];
        let r = ks_two_sample(&a, &a);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_samples_have_unit_statistic() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
        let r = ks_two_sample(&a, &b);
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn hand_computed_statistic() {
        // F_a - F_b at 1..5: 1/3, -1/6, 1/6, -1/3, 0
        let r = ks_two_sample(&[1.0, 3.0, 5.0], &[2.0, 4.0]);
        assert!((r.statistic - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn periodic_noise_has_no_seam() {
        let g = Grid::standard_normal(64, 64, 1, &mut Rng::new(2));
        let r = seam_report(&g);
        assert_eq!(r.seam_samples, 128);
        assert!(r.passes(0.01), "{r:?}");
        let ramp = Grid::from_fn(32, 32, 1, |y, x, _| (y + x) as f64);
        assert!(!seam_report(&ramp).passes(0.01));
    }
}
