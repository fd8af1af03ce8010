use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::GSetting;

/// Piecewise-constant squared volatility `gamma_i` on each time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolatilityControl {
    pub label: String,
    pub gamma: Vec<f64>,
}

impl VolatilityControl {
    pub fn constant(gamma: f64, n_steps: usize) -> Self {
        VolatilityControl {
            label: format!("const({gamma})"),
            gamma: vec![gamma; n_steps],
        }
    }

    /// `before` on steps `< at`, `after` from step `at` on.
    pub fn switch(before: f64, after: f64, at: usize, n_steps: usize) -> Self {
        VolatilityControl {
            label: format!("switch({before}->{after}@{at})"),
            gamma: (0..n_steps).map(|i| if i < at { before } else { after }).collect(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.gamma.len()
    }

    pub fn check_band(&self, setting: &GSetting) -> Result<()> {
        let (lo, hi) = (setting.gamma_low(), setting.gamma_high());
        // Tolerate rounding in user-typed values such as 0.64 for 0.8^2.
        let slack = 1e-12 * hi;
        for (step, &g) in self.gamma.iter().enumerate() {
            if !(g >= lo - slack && g <= hi + slack) {
                return Err(Error::ControlOutOfBand {
                    gamma: g,
                    step,
                    low: lo,
                    high: hi,
                });
            }
        }
        Ok(())
    }

    /// Same control on a grid with `factor` times more steps.
    pub fn refine(&self, factor: usize) -> Self {
        VolatilityControl {
            label: self.label.clone(),
            gamma: self.gamma.iter().flat_map(|&g| std::iter::repeat(g).take(factor)).collect(),
        }
    }

    /// Same control on a grid with `factor` times fewer steps: each coarse
    /// step carries the mean of the fine values it covers.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.gamma.len() % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by {factor}",
                self.gamma.len()
            )));
        }
        Ok(VolatilityControl {
            label: self.label.clone(),
            gamma: self
                .gamma
                .chunks(factor)
                .map(|c| c.iter().sum::<f64>() / factor as f64)
                .collect(),
        })
    }
}

/// Finite stand-in for the set of volatility scenarios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlFamily {
    pub controls: Vec<VolatilityControl>,
}

impl ControlFamily {
    pub fn new(controls: Vec<VolatilityControl>, setting: &GSetting) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::EmptyFamily);
        }
        for c in &controls {
            c.check_band(setting)?;
        }
        Ok(ControlFamily { controls })
    }

    /// The two constant extremes (one control when the band is degenerate).
    pub fn extremes(setting: &GSetting, n_steps: usize) -> Self {
        let mut controls = vec![VolatilityControl::constant(setting.gamma_low(), n_steps)];
        if setting.gamma_high() != setting.gamma_low() {
            controls.push(VolatilityControl::constant(setting.gamma_high(), n_steps));
        }
        ControlFamily { controls }
    }

    /// Extremes plus both bang-bang switches at each of `switch_steps`.
    pub fn bang_bang(setting: &GSetting, n_steps: usize, switch_steps: &[usize]) -> Self {
        let mut family = Self::extremes(setting, n_steps);
        if family.controls.len() == 2 {
            let (lo, hi) = (setting.gamma_low(), setting.gamma_high());
            for &k in switch_steps.iter().filter(|&&k| k > 0 && k < n_steps) {
                family.controls.push(VolatilityControl::switch(lo, hi, k, n_steps));
                family.controls.push(VolatilityControl::switch(hi, lo, k, n_steps));
            }
        }
        family
    }

    /// Low, high, both switches at `T/2`, and the mid-band constant.
    pub fn standard(setting: &GSetting, n_steps: usize) -> Self {
        let mut family = Self::bang_bang(setting, n_steps, &[n_steps / 2]);
        if family.controls.len() > 1 {
            let mid = 0.5 * (setting.gamma_low() + setting.gamma_high());
            family.controls.push(VolatilityControl::constant(mid, n_steps));
        }
        family
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn refine(&self, factor: usize) -> Self {
        ControlFamily {
            controls: self.controls.iter().map(|c| c.refine(factor)).collect(),
        }
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        Ok(ControlFamily {
            controls: self
                .controls
                .iter()
                .map(|c| c.coarsen(factor))
                .collect::<Result<_>>()?,
        })
    }
}

/// Maximum of a per-control statistic and the index attaining it; ties go
/// to the lowest index.
pub fn sup_over_family(statistic: &[f64]) -> Result<(f64, usize)> {
    let mut it = statistic.iter().enumerate();
    let (_, &first) = it.next().ok_or(Error::EmptyFamily)?;
    let mut best = (first, 0);
    for (k, &v) in it {
        if v > best.0 {
            best = (v, k);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(sup_over_family(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0));
        assert_eq!(sup_over_family(&[0.5]).unwrap(), (0.5, 0));
        assert_eq!(sup_over_family(&[0.0, 2.0, 2.0]).unwrap(), (2.0, 1));
        assert!(sup_over_family(&[]).is_err());
    }

    #[test]
    fn standard_family_has_five_members_in_band() {
        let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
        let f = ControlFamily::standard(&s, 10);
        assert_eq!(f.len(), 5);
        for c in &f.controls {
            c.check_band(&s).unwrap();
        }
        let degenerate = GSetting::classical(1.0, 2.0, 3.0, 1.0, vec![0.0]);
        assert_eq!(ControlFamily::standard(&degenerate, 10).len(), 1);
    }

    #[test]
    fn out_of_band_control_is_rejected() {
        let s = GSetting::new(0.8, 1.2, 2.0, 3.0, 1.0, vec![0.0]);
        let c = VolatilityControl::constant(2.0, 4);
        assert!(matches!(c.check_band(&s), Err(Error::ControlOutOfBand { step: 0, .. })));
    }

    #[test]
    fn coarsened_switch_keeps_its_shape() {
        let c = VolatilityControl::switch(0.64, 1.44, 4, 8);
        assert_eq!(c.coarsen(2).unwrap().gamma, vec![0.64, 0.64, 1.44, 1.44]);
        assert!(c.coarsen(3).is_err());
    }
}
