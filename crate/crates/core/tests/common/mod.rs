/// Exhaustive Otsu with exact integer scoring, written independently of the
/// library: between-class variance is proportional to
/// `(N * S0 - N0 * S)^2 / (N0 * N1)` over bin indices.
pub fn otsu_oracle(values: &[f64], bins: usize) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0u128; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n: u128 = counts.iter().sum();
    let s: u128 = counts.iter().enumerate().map(|(i, c)| i as u128 * c).sum();
    // score_k = num_k / den_k; compare by cross multiplication.
    let mut best: Option<(u128, u128)> = None;
    let mut winners = Vec::new();
    for k in 0..bins - 1 {
        let n0: u128 = counts[..=k].iter().sum();
        let s0: u128 = counts[..=k]
            .iter()
            .enumerate()
            .map(|(i, c)| i as u128 * c)
            .sum();
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (n * s0).abs_diff(n0 * s);
        let (num, den) = (d * d, n0 * n1);
        match best {
            Some((bn, bd)) if num * bd < bn * den => {}
            Some((bn, bd)) if num * bd == bn * den => winners.push(k),
            _ => {
                best = Some((num, den));
                winners = vec![k];
            }
        }
    }
    let k = winners.iter().sum::<usize>() as f64 / winners.len() as f64;
    lo + (k + 0.5) * (hi - lo) / bins as f64
}
