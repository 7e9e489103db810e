//! Small combinatorial helpers shared by the state and tensor builders.

/// n! as f64. Exact for n <= 20 (fits the f64 mantissa); callers here never
/// exceed ~16.
pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Binomial coefficient C(n, k) as f64; zero when k > n.
pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorials() {
        assert_eq!(factorial(0), 1.0);
        assert_eq!(factorial(1), 1.0);
        assert_eq!(factorial(7), 5040.0);
        assert_eq!(factorial(12), 479001600.0);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(0, 0), 1.0);
        assert_eq!(binomial(6, 2), 15.0);
        assert_eq!(binomial(6, 7), 0.0);
        assert_eq!(binomial(13, 6), 1716.0);
    }
}
