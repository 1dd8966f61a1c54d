//! Short-term request-rate estimation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("kalman filter degenerate: H*P'*H + D = 0")]
    Degenerate,
    #[error("invalid kalman parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("observed rate must be finite and non-negative, got {0}")]
    InvalidObservation(f64),
}

/// Anything that turns a stream of observed request rates into a forecast.
pub trait RatePredictor: Send {
    /// Feed one observation (rps) and return the forecast for the next interval.
    fn observe(&mut self, observed_rps: f64) -> Result<f64, PredictorError>;
}

/// Filter parameters. Field names follow the config keys `kalman.A`,
/// `kalman.Q`, `kalman.H`, `kalman.D` and `kalman.P0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanParams {
    #[serde(rename = "A", default = "one")]
    pub a: f64,
    #[serde(rename = "Q", default = "default_q")]
    pub q: f64,
    #[serde(rename = "H", default = "one")]
    pub h: f64,
    #[serde(rename = "D", default = "default_d")]
    pub d: f64,
    #[serde(rename = "P0", default = "one")]
    pub p0: f64,
}

fn one() -> f64 {
    1.0
}
fn default_q() -> f64 {
    4.0
}
fn default_d() -> f64 {
    16.0
}

impl Default for KalmanParams {
    fn default() -> Self {
        KalmanParams { a: 1.0, q: 4.0, h: 1.0, d: 16.0, p0: 1.0 }
    }
}

impl KalmanParams {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if !self.a.is_finite() {
            return Err(PredictorError::InvalidParameter("A must be finite"));
        }
        if !(self.q >= 0.0) {
            return Err(PredictorError::InvalidParameter("Q must be >= 0"));
        }
        if !(self.d >= 0.0) {
            return Err(PredictorError::InvalidParameter("D must be >= 0"));
        }
        if !(self.p0 >= 0.0) {
            return Err(PredictorError::InvalidParameter("P0 must be >= 0"));
        }
        if self.h == 0.0 || !self.h.is_finite() {
            return Err(PredictorError::InvalidParameter("H must be non-zero"));
        }
        Ok(())
    }
}

/// Scalar filter state: estimate `r` (rps) and its covariance `p`, together
/// with the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub r: f64,
    pub p: f64,
    pub a: f64,
    pub q: f64,
    pub h: f64,
    pub d: f64,
}

impl KalmanState {
    pub fn new(params: KalmanParams, r0: f64) -> Self {
        KalmanState { r: r0, p: params.p0, a: params.a, q: params.q, h: params.h, d: params.d }
    }

    // Covariance prediction uses A·P·A + Q.
    fn step(&self, observed: f64) -> Result<(KalmanState, f64), PredictorError> {
        let r_prior = self.a * self.r;
        let p_prior = self.a * self.p * self.a + self.q;
        let denom = self.h * p_prior * self.h + self.d;
        if denom == 0.0 {
            return Err(PredictorError::Degenerate);
        }
        let gain = p_prior * self.h / denom;
        let r = r_prior + gain * (observed - self.h * r_prior);
        let p = (1.0 - gain * self.h) * p_prior;
        Ok((KalmanState { r, p, ..*self }, gain))
    }
}

/// One predict/update cycle. Returns the new state and the forecast, which
/// is clamped to be non-negative (the stored estimate is not).
pub fn predict_and_update(state: &KalmanState, observed_rps: f64) -> Result<(KalmanState, f64), PredictorError> {
    let (next, _) = predict_and_update_with_gain(state, observed_rps)?;
    Ok((next, next.r.max(0.0)))
}

/// Like [`predict_and_update`] but also returns the Kalman gain.
pub fn predict_and_update_with_gain(state: &KalmanState, observed_rps: f64) -> Result<(KalmanState, f64), PredictorError> {
    if !(observed_rps >= 0.0) || !observed_rps.is_finite() {
        return Err(PredictorError::InvalidObservation(observed_rps));
    }
    state.step(observed_rps)
}

/// Kalman predictor seeded with its first observation.
#[derive(Debug, Clone)]
pub struct KalmanPredictor {
    params: KalmanParams,
    state: Option<KalmanState>,
}

impl KalmanPredictor {
    pub fn new(params: KalmanParams) -> Result<Self, PredictorError> {
        params.validate()?;
        Ok(KalmanPredictor { params, state: None })
    }

    pub fn state(&self) -> Option<&KalmanState> {
        self.state.as_ref()
    }
}

impl RatePredictor for KalmanPredictor {
    fn observe(&mut self, observed_rps: f64) -> Result<f64, PredictorError> {
        match &self.state {
            None => {
                if !(observed_rps >= 0.0) || !observed_rps.is_finite() {
                    return Err(PredictorError::InvalidObservation(observed_rps));
                }
                self.state = Some(KalmanState::new(self.params, observed_rps));
                Ok(observed_rps)
            }
            Some(state) => {
                let (next, forecast) = predict_and_update(state, observed_rps)?;
                self.state = Some(next);
                Ok(forecast)
            }
        }
    }
}
