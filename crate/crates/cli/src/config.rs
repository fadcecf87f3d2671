//! TOML run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use meterflow::data_io::{default_epoch, parse_datetime, AmountUnit, RateSchedule, RateWindow};
use meterflow::law::LawFamily;
use meterflow::pmmh::{BlockModel, PmmhConfig, Prior};
use meterflow::{AbcConfig, ModelParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Particle count of the full-scale setting.
pub const PAPER_SCALE_PARTICLES: usize = 600_000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Block identifier written to truth and payment files.
    pub block_id: Option<String>,
    /// Wall-clock time of minute zero.
    pub origin: Option<String>,
    pub scenario: Option<ScenarioConfig>,
    pub model: Option<ModelConfig>,
    /// Fixed parameters for filter-only inference.
    pub params: Option<ThetaConfig>,
    pub filter: AbcConfig,
    pub pmmh: PmmhSection,
    pub field: Option<FieldConfig>,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub lambda: f64,
    pub mean_parking: f64,
    pub compliance: f64,
    pub spaces: usize,
    pub num_payments: usize,
    /// Price used to express simulated payments in dollars.
    #[serde(default = "default_price")]
    pub price_per_hour: f64,
}

fn default_price() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub spaces: usize,
    #[serde(default)]
    pub arrival_law: LawFamily,
    #[serde(default)]
    pub service_law: LawFamily,
    #[serde(default = "unit")]
    pub payment_scale: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaConfig {
    pub lambda: f64,
    pub mean_parking: f64,
    pub compliance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmmhSection {
    pub num_accepts_burn_in: usize,
    pub num_accepts_post: usize,
    pub max_iterations: usize,
    pub prior: Prior,
    pub proposal_init_scale: [f64; 3],
    pub adapt: bool,
    pub start: Option<[f64; 3]>,
    pub start_candidates: usize,
}

impl Default for PmmhSection {
    fn default() -> Self {
        let d = PmmhConfig::default();
        Self {
            num_accepts_burn_in: d.num_accepts_burn_in,
            num_accepts_post: d.num_accepts_post,
            max_iterations: d.max_iterations,
            prior: d.prior,
            proposal_init_scale: d.proposal_init_scale,
            adapt: d.adapt,
            start: d.start,
            start_candidates: d.start_candidates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub block_id: String,
    pub window_start: String,
    pub window_end: String,
    #[serde(default)]
    pub amount_unit: AmountUnit,
    #[serde(default)]
    pub rates: Vec<RateWindow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Also evaluate the estimate on a uniform grid with this spacing (min).
    pub grid_minutes: Option<f64>,
    /// Bins per axis of the parameter pair histograms.
    pub histogram_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            grid_minutes: None,
            histogram_bins: 20,
        }
    }
}

fn datetime(field: &str, text: &str) -> CliResult<NaiveDateTime> {
    parse_datetime(text).ok_or_else(|| CliError::Config(format!("`{field}`: cannot parse datetime `{text}`")))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.filter.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.origin()?;
        if let Some(sc) = &self.scenario {
            self.scenario_params()?;
            if sc.num_payments == 0 {
                return Err(CliError::Config("`scenario.num_payments` must be at least 1".into()));
            }
            if !(sc.price_per_hour > 0.0) {
                return Err(CliError::Config("`scenario.price_per_hour` must be positive".into()));
            }
        }
        if let Some(model) = &self.model {
            if model.spaces == 0 {
                return Err(CliError::Config("`model.spaces` must be at least 1".into()));
            }
        }
        if let Some(field) = &self.field {
            let (start, end) = (datetime("field.window_start", &field.window_start)?, datetime("field.window_end", &field.window_end)?);
            if end <= start {
                return Err(CliError::Config("`field.window_end` must be after `field.window_start`".into()));
            }
            self.rates()?;
        }
        if self.evaluation.histogram_bins == 0 {
            return Err(CliError::Config("`evaluation.histogram_bins` must be positive".into()));
        }
        if let Some(g) = self.evaluation.grid_minutes {
            if !(g > 0.0) {
                return Err(CliError::Config("`evaluation.grid_minutes` must be positive".into()));
            }
        }
        Ok(())
    }

    /// Wall-clock time of minute zero: the field window start when
    /// ingesting payments, else `origin`, else the default epoch.
    pub fn origin(&self) -> CliResult<NaiveDateTime> {
        if let Some(field) = &self.field {
            return datetime("field.window_start", &field.window_start);
        }
        match &self.origin {
            Some(text) => datetime("origin", text),
            None => Ok(default_epoch()),
        }
    }

    pub fn block_id(&self) -> String {
        if let Some(field) = &self.field {
            return field.block_id.clone();
        }
        self.block_id.clone().unwrap_or_else(|| "sim".to_string())
    }

    pub fn block_model(&self) -> BlockModel {
        match (&self.model, &self.scenario) {
            (Some(m), _) => BlockModel {
                spaces: m.spaces,
                arrival_law: m.arrival_law,
                service_law: m.service_law,
                payment_scale: m.payment_scale,
            },
            (None, Some(sc)) => BlockModel {
                spaces: sc.spaces,
                ..BlockModel::default()
            },
            (None, None) => BlockModel::default(),
        }
    }

    /// Generating parameters of the scenario.
    pub fn scenario_params(&self) -> CliResult<ModelParams> {
        let sc = self
            .scenario
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [scenario] section".into()))?;
        let model = BlockModel {
            spaces: sc.spaces,
            ..self.block_model()
        };
        model
            .params([sc.lambda, sc.mean_parking, sc.compliance])
            .map_err(|e| CliError::Config(format!("scenario: {e}")))
    }

    /// Parameters for filter-only inference: `[params]`, else the scenario.
    pub fn fixed_params(&self) -> CliResult<ModelParams> {
        let theta = match (&self.params, &self.scenario) {
            (Some(p), _) => [p.lambda, p.mean_parking, p.compliance],
            (None, Some(sc)) => [sc.lambda, sc.mean_parking, sc.compliance],
            (None, None) => {
                return Err(CliError::Config(
                    "filter mode needs fixed parameters in [params] or [scenario]".into(),
                ))
            }
        };
        self.block_model()
            .params(theta)
            .map_err(|e| CliError::Config(format!("params: {e}")))
    }

    pub fn pmmh_config(&self, seed: u64) -> CliResult<PmmhConfig> {
        let p = &self.pmmh;
        let cfg = PmmhConfig {
            num_accepts_burn_in: p.num_accepts_burn_in,
            num_accepts_post: p.num_accepts_post,
            max_iterations: p.max_iterations,
            prior: p.prior,
            proposal_init_scale: p.proposal_init_scale,
            adapt: p.adapt,
            filter: self.filter.clone(),
            model: self.block_model(),
            start: p.start,
            start_candidates: p.start_candidates,
            origin: 0.0,
            seed,
        };
        cfg.validate().map_err(|e| CliError::Config(format!("pmmh: {e}")))?;
        Ok(cfg)
    }

    pub fn rates(&self) -> CliResult<RateSchedule> {
        let Some(field) = &self.field else {
            return Ok(RateSchedule::default());
        };
        RateSchedule::new(BTreeMap::from([(field.block_id.clone(), field.rates.clone())]))
            .map_err(|e| CliError::Config(format!("field.rates: {e}")))
    }
}
