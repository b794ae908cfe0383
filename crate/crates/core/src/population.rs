//! Finite-population data model, synthetic scenario generation and CSV ingestion.
//!
//! A [`PopulationFrame`] holds the auxiliary matrix `x` for all `N` units, the
//! selection indicator `delta`, and the outcome `y` for selected units only.
//! Synthetic frames additionally carry an [`Oracle`] with the full outcome
//! vector and the true selection probabilities; estimators never read it.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::linalg::expit;

/// Oracle-only side channel of a synthetic population.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    /// Outcome for every unit, including non-selected ones.
    pub y_full: Vec<f64>,
    /// True selection probability of every unit.
    pub true_pi: Vec<f64>,
    /// Superpopulation mean `E(y)` of the generating model.
    pub superpopulation_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFrame {
    columns: Vec<String>,
    /// Row-major `N × p`.
    x: Vec<f64>,
    delta: Vec<bool>,
    y: Vec<Option<f64>>,
    oracle: Option<Oracle>,
}

impl PopulationFrame {
    /// Builds a frame from observed data. `y[i]` must be `Some` wherever `delta[i]`
    /// is true; outcome values supplied for non-selected units are discarded.
    pub fn new(
        columns: Vec<String>,
        x_rows: Vec<Vec<f64>>,
        delta: Vec<bool>,
        y: Vec<Option<f64>>,
    ) -> Result<Self> {
        let n_units = x_rows.len();
        if n_units == 0 {
            return Err(EstimationError::InvalidInput("empty population".into()));
        }
        if delta.len() != n_units || y.len() != n_units {
            return Err(EstimationError::InvalidInput(format!(
                "length mismatch: {} x rows, {} delta, {} y",
                n_units,
                delta.len(),
                y.len()
            )));
        }
        let p = columns.len();
        let mut x = Vec::with_capacity(n_units * p);
        for (i, row) in x_rows.iter().enumerate() {
            if row.len() != p {
                return Err(EstimationError::Row {
                    row: i + 1,
                    message: format!("expected {} auxiliary values, found {}", p, row.len()),
                });
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(EstimationError::Row {
                    row: i + 1,
                    message: format!("non-finite auxiliary value {v}"),
                });
            }
            x.extend_from_slice(row);
        }
        let mut y_obs = Vec::with_capacity(n_units);
        for (i, (&d, yi)) in delta.iter().zip(y).enumerate() {
            match (d, yi) {
                (true, Some(v)) if v.is_finite() => y_obs.push(Some(v)),
                (true, Some(v)) => {
                    return Err(EstimationError::Row {
                        row: i + 1,
                        message: format!("non-finite outcome {v}"),
                    })
                }
                (true, None) => {
                    return Err(EstimationError::Row {
                        row: i + 1,
                        message: "delta=1 but outcome y is missing".into(),
                    })
                }
                (false, _) => y_obs.push(None),
            }
        }
        Ok(Self {
            columns,
            x,
            delta,
            y: y_obs,
            oracle: None,
        })
    }

    pub fn with_oracle(mut self, oracle: Oracle) -> Result<Self> {
        if oracle.y_full.len() != self.n_units() || oracle.true_pi.len() != self.n_units() {
            return Err(EstimationError::InvalidInput(
                "oracle vectors must have one entry per unit".into(),
            ));
        }
        self.oracle = Some(oracle);
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.delta.len()
    }

    /// Realized sample size `n = Σδ`.
    pub fn n_sample(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let p = self.columns.len();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn selected(&self, i: usize) -> bool {
        self.delta[i]
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    /// Observed outcome; `None` for units outside the sample.
    pub fn y_observed(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    /// Selected units in frame order as `(index, x row, y)`.
    pub fn respondents(&self) -> impl Iterator<Item = (usize, &[f64], f64)> + '_ {
        (0..self.n_units()).filter_map(move |i| self.y[i].map(|y| (i, self.x_row(i), y)))
    }

    /// Respondent outcomes in frame order.
    pub fn respondent_y(&self) -> Vec<f64> {
        self.y.iter().flatten().copied().collect()
    }

    pub fn oracle(&self) -> Option<&Oracle> {
        self.oracle.as_ref()
    }

    /// Population means `X̄_N` of every auxiliary column.
    pub fn x_means(&self) -> Vec<f64> {
        let p = self.n_covariates();
        let mut m = vec![0.0; p];
        for i in 0..self.n_units() {
            for (acc, v) in m.iter_mut().zip(self.x_row(i)) {
                *acc += v;
            }
        }
        let n = self.n_units() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// True when the selection model cannot be fitted (no selected or no
    /// non-selected units).
    pub fn is_degenerate(&self) -> bool {
        let n = self.n_sample();
        n == 0 || n == self.n_units()
    }

    pub fn require_estimable(&self) -> Result<()> {
        let n = self.n_sample();
        if n == 0 {
            return Err(EstimationError::Degenerate("no unit has delta=1".into()));
        }
        if n == self.n_units() {
            return Err(EstimationError::Degenerate(
                "every unit has delta=1; the selection model is not identified".into(),
            ));
        }
        Ok(())
    }

    /// Writes the observed data as CSV: auxiliary columns, `delta`, `y` (empty
    /// when not selected). Oracle data is not written.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        header.extend(["delta", "y"]);
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n_units() {
            let mut rec: Vec<String> = self.x_row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(if self.delta[i] { "1" } else { "0" }.into());
            rec.push(self.y[i].map(|v| format!("{v:?}")).unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn csv_err(e: csv::Error) -> EstimationError {
    EstimationError::Io(e.to_string())
}

/// Which header names hold the selection indicator, the outcome, and the
/// auxiliary variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub delta: String,
    pub y: String,
    /// Auxiliary columns in model order; `None` takes every other column in header order.
    pub x: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            delta: "delta".into(),
            y: "y".into(),
            x: None,
        }
    }
}

pub fn load_population(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PopulationFrame> {
    let f = std::fs::File::open(path.as_ref())
        .map_err(|e| EstimationError::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_population(f, schema)
}

pub fn read_population<R: Read>(reader: R, schema: &CsvSchema) -> Result<PopulationFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EstimationError::InvalidInput(format!("missing column `{name}`")))
    };
    let delta_idx = find(&schema.delta)?;
    let y_idx = find(&schema.y)?;
    let (x_names, x_idx): (Vec<String>, Vec<usize>) = match &schema.x {
        Some(names) => {
            let idx = names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
            (names.clone(), idx)
        }
        None => header
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != delta_idx && j != y_idx)
            .map(|(j, h)| (h.to_string(), j))
            .unzip(),
    };

    let mut x_rows = Vec::new();
    let mut delta = Vec::new();
    let mut y = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| EstimationError::Row {
            row,
            message: e.to_string(),
        })?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            field(j).parse::<f64>().map_err(|_| EstimationError::Row {
                row,
                message: format!("`{}` is not a number in column `{}`", field(j), &header[j]),
            })
        };
        let xs = x_idx.iter().map(|&j| num(j)).collect::<Result<Vec<_>>>()?;
        let d = match field(delta_idx) {
            "1" => true,
            "0" => false,
            other => {
                return Err(EstimationError::Row {
                    row,
                    message: format!("delta must be 0 or 1, found `{other}`"),
                })
            }
        };
        let yv = if field(y_idx).is_empty() {
            None
        } else {
            Some(num(y_idx)?)
        };
        if d && yv.is_none() {
            return Err(EstimationError::Row {
                row,
                message: "delta=1 but outcome y is missing".into(),
            });
        }
        x_rows.push(xs);
        delta.push(d);
        y.push(yv);
    }
    PopulationFrame::new(x_names, x_rows, delta, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Linear outcome: `y = -4 + x1 + x2 + e`.
    M1,
    /// Quadratic outcome: `y = 0.5 (x1 + x2 - 5)² - 1.5 + e`.
    M2,
}

impl Scenario {
    pub fn outcome_mean(self, x1: f64, x2: f64) -> f64 {
        match self {
            Scenario::M1 => -4.0 + x1 + x2,
            Scenario::M2 => 0.5 * (x1 + x2 - 5.0).powi(2) - 1.5,
        }
    }

    /// `E(y)` under the generating model; zero for both scenarios.
    pub fn superpopulation_mean(self) -> f64 {
        0.0
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::M1 => "M1",
            Scenario::M2 => "M2",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = EstimationError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Scenario::M1),
            "m2" => Ok(Scenario::M2),
            _ => Err(EstimationError::InvalidInput(format!(
                "unknown scenario `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_units: usize,
    /// `(intercept, x1 coefficient, y coefficient)` of the true selection model.
    pub phi_true: [f64; 3],
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            n_units: 5000,
            phi_true: [-2.0, 1.0, 0.5],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units < 10 {
            return Err(EstimationError::InvalidInput(format!(
                "n_units must be at least 10, got {}",
                self.n_units
            )));
        }
        if self.phi_true.iter().any(|v| !v.is_finite()) {
            return Err(EstimationError::InvalidInput(
                "phi_true must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Generates one synthetic population on stream 0 of the configured seed.
pub fn generate_population(config: &ScenarioConfig) -> Result<PopulationFrame> {
    generate_population_stream(config, 0)
}

/// Generates a synthetic population from an independent random stream.
///
/// The generator is ChaCha8 keyed by `config.seed`; `stream` selects the
/// ChaCha stream id, so replicate `k` of a Monte Carlo study uses stream `k`
/// and never overlaps another replicate regardless of evaluation order.
/// Per unit the draws are, in order: `x1`, `x2`, `e` (standard normals via
/// ziggurat) and one uniform for the selection indicator.
pub fn generate_population_stream(config: &ScenarioConfig, stream: u64) -> Result<PopulationFrame> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let n = config.n_units;
    let [p0, p1, p2] = config.phi_true;

    let mut x_rows = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut y_obs = Vec::with_capacity(n);
    let mut y_full = Vec::with_capacity(n);
    let mut true_pi = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = 2.0 + rng.sample::<f64, _>(StandardNormal);
        let x2 = 2.0 + rng.sample::<f64, _>(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let y = config.scenario.outcome_mean(x1, x2) + e;
        let pi = expit(p0 + p1 * x1 + p2 * y);
        let d = rng.random::<f64>() < pi;
        x_rows.push(vec![x1, x2]);
        delta.push(d);
        y_obs.push(d.then_some(y));
        y_full.push(y);
        true_pi.push(pi);
    }
    PopulationFrame::new(vec!["x1".into(), "x2".into()], x_rows, delta, y_obs)?.with_oracle(
        Oracle {
            y_full,
            true_pi,
            superpopulation_mean: config.scenario.superpopulation_mean(),
        },
    )
}
