use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch learning-rate multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Straight line from 1.0 at the first epoch to `final_multiplier` at the last.
    Linear { final_multiplier: f64 },
    /// Explicit factors; epochs past the end reuse the last entry.
    Table { factors: Vec<f64> },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Linear { final_multiplier: 0.1 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Linear { final_multiplier } if !(*final_multiplier > 0.0) => Err(Error::config(format!(
                "learning-rate multiplier {final_multiplier} must be positive"
            ))),
            LrSchedule::Table { factors } if factors.is_empty() => Err(Error::config("empty learning-rate table")),
            LrSchedule::Table { factors } => match factors.iter().find(|f| !(**f > 0.0)) {
                Some(f) => Err(Error::config(format!("learning-rate multiplier {f} must be positive"))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn multiplier(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        self.validate()?;
        Ok(match self {
            LrSchedule::Linear { final_multiplier } => {
                if total_epochs <= 1 {
                    1.0
                } else {
                    let t = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
                    1.0 - (1.0 - final_multiplier) * t
                }
            }
            LrSchedule::Table { factors } => factors[epoch.min(factors.len() - 1)],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_anchor_points() {
        let s = LrSchedule::default();
        assert_eq!(s.multiplier(0, 200).unwrap(), 1.0);
        assert!((s.multiplier(199, 200).unwrap() - 0.1).abs() < 1e-12);
        assert!((s.multiplier(100, 200).unwrap() - 0.547_74).abs() < 1e-5);
    }

    #[test]
    fn table_and_errors() {
        let s = LrSchedule::Table { factors: vec![1.0, 0.5] };
        assert_eq!(s.multiplier(5, 10).unwrap(), 0.5);
        let bad = LrSchedule::Table { factors: vec![1.0, 0.0] };
        assert!(matches!(bad.multiplier(0, 10), Err(Error::Config(_))));
        let bad = LrSchedule::Linear { final_multiplier: -0.1 };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
