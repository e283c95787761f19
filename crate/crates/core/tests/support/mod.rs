//! Oracles and drivers for the acceptance target.

pub mod gaussian;
pub mod gradcheck;
pub mod metrics_oracle;
pub mod quantile_oracle;
pub mod rpf_oracle;
pub mod trends;
pub mod ugema_oracle;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}
