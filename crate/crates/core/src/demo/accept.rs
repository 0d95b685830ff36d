//! Stand-in for a one-year COPD exacerbation risk model.
//!
//! The coefficients are illustrative and centered on the default patient,
//! whose linear predictor is exactly zero.

use super::plugin::{Fields, Model};
use crate::wire::{ModelInput, ModelOutput, ModelValue};

/// Field order of the 21 inputs.
pub const INPUT_FIELDS: [&str; 21] = [
    "ID",
    "male",
    "age",
    "smoker",
    "oxygen",
    "statin",
    "LAMA",
    "LABA",
    "ICS",
    "FEV1",
    "BMI",
    "SGRQ",
    "LastYrExacCount",
    "LastYrSevExacCount",
    "randomized_azithromycin",
    "randomized_statin",
    "randomized_LAMA",
    "randomized_LABA",
    "randomized_ICS",
    "random_sampling_N",
    "calculate_CIs",
];

const BINARY_FIELDS: [&str; 12] = [
    "male",
    "smoker",
    "oxygen",
    "statin",
    "LAMA",
    "LABA",
    "ICS",
    "randomized_azithromycin",
    "randomized_statin",
    "randomized_LAMA",
    "randomized_LABA",
    "randomized_ICS",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptInput {
    pub id: f64,
    pub male: f64,
    pub age: f64,
    pub oxygen: f64,
    pub fev1: f64,
    pub sgrq: f64,
    pub exac_count: u64,
    pub sev_exac_count: u64,
}

impl AcceptInput {
    pub fn from_input(input: &ModelInput) -> Result<Self, String> {
        let f = Fields(input);
        for key in BINARY_FIELDS {
            f.binary(key)?;
        }
        f.count("random_sampling_N")?;
        f.bool("calculate_CIs")?;
        let bmi = f.num("BMI")?;
        if bmi <= 0.0 {
            return Err(format!("`BMI` must be positive, got {bmi}"));
        }
        f.in_range("SGRQ", 0.0, 100.0)?;
        let fev1 = f.num("FEV1")?;
        if !(fev1 > 0.0 && fev1 <= 150.0) {
            return Err(format!("`FEV1` must lie in (0, 150], got {fev1}"));
        }
        Ok(Self {
            id: f.num("ID")?,
            male: f.num("male")?,
            age: f.in_range("age", 40.0, 110.0)?,
            oxygen: f.num("oxygen")?,
            fev1,
            sgrq: f.num("SGRQ")?,
            exac_count: f.count("LastYrExacCount")?,
            sev_exac_count: f.count("LastYrSevExacCount")?,
        })
    }

    pub fn linear_predictor(&self) -> f64 {
        0.03 * (self.age - 70.0)
            + 0.15 * (self.male - 1.0)
            + 0.4 * (self.sev_exac_count as f64 - 1.0)
            + 0.25 * (self.exac_count as f64 - 2.0)
            - 0.02 * (self.fev1 - 33.0)
            + 0.01 * (self.sgrq - 50.0)
            + 0.3 * (self.oxygen - 1.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct AcceptDemo;

impl Model for AcceptDemo {
    fn default_input(&self) -> ModelInput {
        let values: [ModelValue; 21] = [
            10001.0.into(),
            1.0.into(),
            70.0.into(),
            1.0.into(),
            1.0.into(),
            1.0.into(),
            1.0.into(),
            1.0.into(),
            1.0.into(),
            33.0.into(),
            25.0.into(),
            50.0.into(),
            2.0.into(),
            1.0.into(),
            0.0.into(),
            0.0.into(),
            0.0.into(),
            0.0.into(),
            0.0.into(),
            100.0.into(),
            false.into(),
        ];
        let mut m = ModelInput::default();
        for (k, v) in INPUT_FIELDS.iter().zip(values) {
            m.insert((*k).into(), v);
        }
        m
    }

    fn run(&self, input: &ModelInput, _seed: u64) -> Result<ModelOutput, String> {
        let x = AcceptInput::from_input(input)?;
        let l = x.linear_predictor();
        let mut out = ModelOutput::default();
        out.insert("ID".into(), x.id.into());
        out.insert("predicted_severe_exac_probability".into(), sigmoid(l).into());
        out.insert("predicted_exac_rate".into(), (1.5 * (0.3 * l).exp()).into());
        Ok(out)
    }
}
