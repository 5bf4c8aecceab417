use crate::error::{Error, Result};
use crate::netcore::ProbabilityMap;
use crate::real::Real;

/// Sharpened soft target, same layout as the map it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel<F> {
    map: ProbabilityMap<F>,
}

impl<F: Real> PseudoLabel<F> {
    pub fn map(&self) -> &ProbabilityMap<F> {
        &self.map
    }

    pub fn foreground(&self, n: usize) -> &[F] {
        self.map.foreground(n)
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config(format!("temperature must lie in (0, 1], got {t}")));
    }
    Ok(())
}

/// `p^(1/T) / (p^(1/T) + (1-p)^(1/T))`, evaluated as `1 / (1 + ((1-p)/p)^(1/T))`.
#[inline]
pub fn sharpen_value(p: f64, t: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ratio = ((1.0 - p) / p).powf(1.0 / t);
    1.0 / (1.0 + ratio)
}

/// Derivative of [`sharpen_value`] w.r.t. `p`: `s(1-s) / (T p (1-p))`.
#[inline]
pub fn sharpen_derivative(p: f64, t: f64) -> f64 {
    let pq = p * (1.0 - p);
    if pq <= 0.0 {
        return 0.0;
    }
    let s = sharpen_value(p, t);
    let num = s * (1.0 - s);
    if num == 0.0 {
        0.0
    } else {
        num / (t * pq)
    }
}

/// Applies the sharpening function to the foreground channel; background is `1 - s`.
pub fn sharpen<F: Real>(p: &ProbabilityMap<F>, temperature: f64) -> Result<PseudoLabel<F>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let fg: Vec<F> = p
        .foreground_all()
        .into_iter()
        .map(|v| F::from_f64c(sharpen_value(v.to_f64c(), temperature)))
        .collect();
    Ok(PseudoLabel {
        map: ProbabilityMap::from_foreground(p.batch(), p.dims(), &fg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        for t in [0.05, 0.1, 0.5, 1.0] {
            assert_eq!(sharpen_value(0.0, t), 0.0);
            assert_eq!(sharpen_value(0.5, t), 0.5);
            assert_eq!(sharpen_value(1.0, t), 1.0);
        }
    }

    #[test]
    fn sixty_percent_at_temperature_tenth() {
        // 0.6^10 / (0.6^10 + 0.4^10), computed directly
        let direct = 0.6f64.powi(10) / (0.6f64.powi(10) + 0.4f64.powi(10));
        assert!((direct - 0.98296).abs() < 1e-4);
        assert!((sharpen_value(0.6, 0.1) - direct).abs() < 1e-12);
    }

    #[test]
    fn unit_temperature_is_identity() {
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            assert!((sharpen_value(p, 1.0) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for &p in &[0.1, 0.3, 0.5, 0.62, 0.9] {
            let h = 1e-7;
            let fd = (sharpen_value(p + h, 0.1) - sharpen_value(p - h, 0.1)) / (2.0 * h);
            let an = sharpen_derivative(p, 0.1);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "p={p}: {fd} vs {an}");
        }
        assert_eq!(sharpen_derivative(0.0, 0.1), 0.0);
        assert_eq!(sharpen_derivative(1.0, 0.1), 0.0);
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let p = ProbabilityMap::<f32>::from_foreground(1, [1, 1, 1], &[0.3]).unwrap();
        assert!(matches!(sharpen(&p, 0.0), Err(Error::Config(_))));
        assert!(matches!(sharpen(&p, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn pseudo_label_is_normalized() {
        let fg: Vec<f32> = (0..27).map(|i| i as f32 / 26.0).collect();
        let p = ProbabilityMap::from_foreground(1, [3, 3, 3], &fg).unwrap();
        let y = sharpen(&p, 0.1).unwrap();
        assert!(y.map().is_valid(1e-5));
    }
}
