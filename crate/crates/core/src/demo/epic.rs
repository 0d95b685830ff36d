//! Stand-in for a COPD cohort simulation.
//!
//! Agents start at `global_parameters.age0` and are followed for
//! `time_horizon` yearly cycles. In cycle `t` (1-based) an alive agent of age
//! `age0 + t - 1` first dies with probability
//! `1 - exp(-death_base * 1.06^(age - 40))`; a dying agent accrues nothing
//! that cycle. Survivors accrue one person-year and `0.8` discounted QALYs,
//! acquire COPD with probability `1 - exp(-copd_incidence)` if they do not
//! have it yet, and, once with COPD, draw `Poisson(exac_rate)`
//! exacerbations costing 100 each (discounted). Discount factors are
//! `1 / (1 + r)^(t - 1)`. Draws come from [`super::rng`].

use super::plugin::{Fields, Model};
use super::rng::{poisson, uniform, STREAM_COPD, STREAM_DEATH, STREAM_EXAC};
use crate::wire::{Matrix, ModelInput, ModelOutput, ModelValue};

pub const MAX_AGENTS: u64 = 10_000_000;
pub const MAX_HORIZON: u64 = 200;
pub const MAX_EXAC_RATE: f64 = 100.0;

pub const OUTPUT_KEYS: [&str; 7] = [
    "n_agents",
    "cumul_time",
    "n_deaths",
    "n_COPD",
    "total_exac",
    "total_cost",
    "total_qaly",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpicInput {
    pub age0: f64,
    pub time_horizon: u64,
    pub discount_cost: f64,
    pub discount_qaly: f64,
    pub p_female: f64,
    pub n_agents: u64,
    pub death_base: f64,
    pub copd_incidence: f64,
    pub exac_rate: f64,
}

impl Default for EpicInput {
    fn default() -> Self {
        Self {
            age0: 40.0,
            time_horizon: 20,
            discount_cost: 0.03,
            discount_qaly: 0.03,
            p_female: 0.5,
            n_agents: 1000,
            death_base: 0.005,
            copd_incidence: 0.01,
            exac_rate: 0.5,
        }
    }
}

impl EpicInput {
    pub fn from_input(input: &ModelInput) -> Result<Self, String> {
        let f = Fields(input);
        match input.get("agent.height_0_betas") {
            Some(ModelValue::Matrix(m)) if m.rows() == 1 && m.cols() == 5 => {}
            _ => return Err("`agent.height_0_betas` must be a 1x5 matrix".into()),
        }
        let time_horizon = f.count("global_parameters.time_horizon")?;
        if time_horizon > MAX_HORIZON {
            return Err(format!("`global_parameters.time_horizon` must be at most {MAX_HORIZON}"));
        }
        let n_agents = f.count("agent.n_agents")?;
        if n_agents > MAX_AGENTS {
            return Err(format!("`agent.n_agents` must be at most {MAX_AGENTS}"));
        }
        let rate = |key: &str| -> Result<f64, String> {
            let x = f.num(key)?;
            if x >= 0.0 {
                Ok(x)
            } else {
                Err(format!("`{key}` must be non-negative, got {x}"))
            }
        };
        Ok(Self {
            age0: f.in_range("global_parameters.age0", 0.0, 150.0)?,
            time_horizon,
            discount_cost: f.in_range("global_parameters.discount_cost", 0.0, 1.0)?,
            discount_qaly: f.in_range("global_parameters.discount_qaly", 0.0, 1.0)?,
            p_female: f.in_range("agent.p_female", 0.0, 1.0)?,
            n_agents,
            death_base: rate("hazards.death_base")?,
            copd_incidence: rate("hazards.copd_incidence")?,
            exac_rate: f.in_range("hazards.exac_rate", 0.0, MAX_EXAC_RATE)?,
        })
    }

    /// Yearly death hazard in cycle `t`.
    pub fn death_hazard(&self, t: u64) -> f64 {
        let age = self.age0 + (t - 1) as f64;
        self.death_base * 1.06f64.powf(age - 40.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpicOutput {
    pub n_agents: u64,
    pub cumul_time: u64,
    pub n_deaths: u64,
    pub n_copd: u64,
    pub total_exac: u64,
    pub total_cost: f64,
    pub total_qaly: f64,
}

impl EpicOutput {
    pub fn to_output(&self) -> ModelOutput {
        let values = [
            self.n_agents as f64,
            self.cumul_time as f64,
            self.n_deaths as f64,
            self.n_copd as f64,
            self.total_exac as f64,
            self.total_cost,
            self.total_qaly,
        ];
        let mut out = ModelOutput::default();
        for (k, v) in OUTPUT_KEYS.iter().zip(values) {
            out.insert((*k).into(), v.into());
        }
        out
    }
}

pub fn simulate(x: &EpicInput, seed: u64) -> EpicOutput {
    let death_p: Vec<f64> = (1..=x.time_horizon)
        .map(|t| -(-x.death_hazard(t)).exp_m1())
        .collect();
    let copd_p = -(-x.copd_incidence).exp_m1();
    let cost_df: Vec<f64> = (0..x.time_horizon)
        .map(|k| (1.0 + x.discount_cost).powi(k as i32).recip())
        .collect();
    let qaly_df: Vec<f64> = (0..x.time_horizon)
        .map(|k| (1.0 + x.discount_qaly).powi(k as i32).recip())
        .collect();

    let mut out = EpicOutput {
        n_agents: x.n_agents,
        ..Default::default()
    };
    for agent in 0..x.n_agents {
        let mut copd = false;
        for t in 1..=x.time_horizon {
            let i = (t - 1) as usize;
            if uniform(seed, agent, t, STREAM_DEATH) < death_p[i] {
                out.n_deaths += 1;
                break;
            }
            out.cumul_time += 1;
            out.total_qaly += 0.8 * qaly_df[i];
            if !copd && uniform(seed, agent, t, STREAM_COPD) < copd_p {
                copd = true;
            }
            if copd {
                let k = poisson(x.exac_rate, uniform(seed, agent, t, STREAM_EXAC));
                out.total_exac += k;
                out.total_cost += 100.0 * k as f64 * cost_df[i];
            }
        }
        if copd {
            out.n_copd += 1;
        }
    }
    out
}

pub struct EpicDemo;

impl Model for EpicDemo {
    fn default_input(&self) -> ModelInput {
        let d = EpicInput::default();
        let betas = Matrix::new(1, 5, vec![1.8266, -0.1309, -0.0012, 2.31e-06, -2e-04])
            .expect("1x5 matrix");
        let entries: [(&str, ModelValue); 10] = [
            ("global_parameters.age0", d.age0.into()),
            ("global_parameters.time_horizon", (d.time_horizon as f64).into()),
            ("global_parameters.discount_cost", d.discount_cost.into()),
            ("global_parameters.discount_qaly", d.discount_qaly.into()),
            ("agent.p_female", d.p_female.into()),
            ("agent.height_0_betas", betas.into()),
            ("agent.n_agents", (d.n_agents as f64).into()),
            ("hazards.death_base", d.death_base.into()),
            ("hazards.copd_incidence", d.copd_incidence.into()),
            ("hazards.exac_rate", d.exac_rate.into()),
        ];
        let mut m = ModelInput::default();
        for (k, v) in entries {
            m.insert(k.into(), v);
        }
        m
    }

    fn run(&self, input: &ModelInput, seed: u64) -> Result<ModelOutput, String> {
        let x = EpicInput::from_input(input)?;
        Ok(simulate(&x, seed).to_output())
    }
}
