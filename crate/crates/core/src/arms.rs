//! Stage-2 ablation arms.

use crate::{GeodeError, Result};

pub const ARM_NAMES: [&str; 4] = ["sft_only", "sft_drh", "sft_drm", "full"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    SftOnly,
    SftDrh,
    SftDrm,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SftOnly, Arm::SftDrh, Arm::SftDrm, Arm::Full];

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                GeodeError::config(
                    "train.arm",
                    format!("unknown arm `{name}` (known: {})", ARM_NAMES.join(", ")),
                )
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::SftOnly => "sft_only",
            Arm::SftDrh => "sft_drh",
            Arm::SftDrm => "sft_drm",
            Arm::Full => "full",
        }
    }

    /// Rationale tokens are injected as LM prefix.
    pub fn uses_drm(self) -> bool {
        matches!(self, Arm::SftDrm | Arm::Full)
    }

    /// Numeric answers go through control tokens and regression heads.
    pub fn uses_drh(self) -> bool {
        matches!(self, Arm::SftDrh | Arm::Full)
    }

    /// Name of the answer codec this arm trains and decodes with.
    pub fn codec(self) -> &'static str {
        if self.uses_drh() {
            "drh"
        } else {
            "digits"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(Arm::from_name(a.name()).unwrap(), a);
        }
        assert!(Arm::from_name("sft+drh").unwrap_err().is_config());
    }
}
