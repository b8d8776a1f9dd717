use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-sided 97.5% quantile of Student's t with `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    assert!(df >= 1, "t quantile needs at least one degree of freedom");
    StudentsT::new(0.0, 1.0, df as f64).expect("valid t distribution").inverse_cdf(0.975)
}

/// Mean over seeds with a 95% Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single seed.
    pub std: Option<f64>,
    /// `t(0.975, n-1) * s / sqrt(n)`; `None` for a single seed.
    pub half_width: Option<f64>,
}

impl SeedSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Some(Self { n, mean, std: None, half_width: None });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        Some(Self {
            n,
            mean,
            std: Some(std),
            half_width: Some(t_quantile_975(n - 1) * std / (n as f64).sqrt()),
        })
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width.unwrap_or(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width.unwrap_or(0.0)
    }

    /// True when both intervals exist and do not overlap.
    pub fn separated_from(&self, other: &SeedSummary) -> bool {
        self.half_width.is_some()
            && other.half_width.is_some()
            && (self.lower() > other.upper() || other.lower() > self.upper())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_example() {
        let s = SeedSummary::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert!((s.half_width.unwrap() - 1.963).abs() < 1e-3);
    }

    #[test]
    fn table_quantiles() {
        // two-sided 95% critical values, df = 1..9
        let table = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262];
        for (i, t) in table.iter().enumerate() {
            assert!((t_quantile_975(i + 1) - t).abs() < 1e-3, "df {}", i + 1);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(SeedSummary::from_values(&[]).is_none());
        let one = SeedSummary::from_values(&[7.0]).unwrap();
        assert_eq!(one.mean, 7.0);
        assert!(one.half_width.is_none());
        let flat = SeedSummary::from_values(&[2.0; 5]).unwrap();
        assert_eq!(flat.half_width, Some(0.0));
    }

    #[test]
    fn separation() {
        let a = SeedSummary::from_values(&[1.0, 1.1, 0.9]).unwrap();
        let b = SeedSummary::from_values(&[5.0, 5.1, 4.9]).unwrap();
        let c = SeedSummary::from_values(&[0.0, 10.0, 5.0]).unwrap();
        assert!(a.separated_from(&b));
        assert!(!a.separated_from(&c));
        assert!(!SeedSummary::from_values(&[1.0]).unwrap().separated_from(&b));
    }
}
