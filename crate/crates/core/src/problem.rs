//! One estimation problem, parametric or kernel-profiled, behind a common interface.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Dataset;
use crate::penalty::{PenaltyFamily, PenaltySpec};
use crate::score::ScoreEngine;
use crate::semipar::{profile_unpenalized, semipar_sandwich, KernelSpec, ProfileEquation, ThetaProfile};
use crate::solver::{
    naive_fit, sandwich_cov_eq, solve_penalized_from, solve_unpenalized_eq, EstimatingFunction, FitResult,
    ParametricEquation, SolverConfig, Want,
};
use crate::tuning::{fit_stats, lambda_grid, tune, FitStats, TuningTrace};

#[allow(clippy::large_enum_variant)]
pub enum Problem<'a> {
    Parametric(ParametricEquation<'a>),
    Profiled(ProfileEquation<'a>),
}

/// Settings of a `λ` path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathSettings {
    pub family: PenaltyFamily,
    pub a: f64,
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            family: PenaltyFamily::Scad,
            a: crate::penalty::DEFAULT_SCAD_A,
            points: 40,
            lo: 1e-3,
            hi: 1.0,
        }
    }
}

impl<'a> Problem<'a> {
    /// A profiled problem when `kernel` is given, parametric otherwise.
    pub fn new(engine: &'a ScoreEngine, data: &'a Dataset, kernel: Option<KernelSpec>) -> Result<Self> {
        Ok(match kernel {
            Some(k) => Problem::Profiled(ProfileEquation::new(engine, data, k)?),
            None => Problem::Parametric(ParametricEquation::new(engine, data)?),
        })
    }

    pub fn equation(&self) -> &dyn EstimatingFunction {
        match self {
            Problem::Parametric(eq) => eq,
            Problem::Profiled(eq) => eq,
        }
    }

    fn engine(&self) -> &ScoreEngine {
        match self {
            Problem::Parametric(eq) => eq.engine(),
            Problem::Profiled(eq) => eq.engine(),
        }
    }

    fn data(&self) -> &Dataset {
        match self {
            Problem::Parametric(eq) => eq.data(),
            Problem::Profiled(eq) => eq.data(),
        }
    }

    /// The locally efficient unpenalized fit started from the naive fit.
    pub fn unpenalized(&self, cfg: &SolverConfig) -> Result<FitResult> {
        match self {
            Problem::Parametric(eq) => solve_unpenalized_eq(eq, &naive_fit(eq.engine(), eq.data())?, cfg),
            Problem::Profiled(eq) => profile_unpenalized(eq, cfg),
        }
    }

    /// Penalized fit from `full`, with `θ̂` at the solution for profiled problems.
    pub fn penalized(
        &self,
        full: &FitResult,
        penalty: &PenaltySpec,
        cfg: &SolverConfig,
    ) -> Result<(FitResult, Option<ThetaProfile>)> {
        let fit = solve_penalized_from(self.equation(), full, penalty, cfg)?;
        let profile = self.profile_at(&fit.beta)?;
        Ok((fit, profile))
    }

    /// `θ̂` at `beta` (profiled problems only).
    pub fn profile_at(&self, beta: &[f64]) -> Result<Option<ThetaProfile>> {
        match self {
            Problem::Parametric(_) => Ok(None),
            Problem::Profiled(eq) => {
                eq.evaluate(beta, Want::MEAN)?;
                Ok(eq.profile())
            }
        }
    }

    pub fn sandwich(&self, fit: &FitResult, unpenalized: &[usize]) -> Result<DMatrix<f64>> {
        match self {
            Problem::Parametric(eq) => sandwich_cov_eq(eq, fit, unpenalized),
            Problem::Profiled(eq) => semipar_sandwich(eq, fit, unpenalized),
        }
    }

    /// Deviance and degrees of freedom of `fit` with `W` in place of `X`.
    pub fn stats(&self, fit: &FitResult, offset: Option<&[f64]>, unpenalized: &[usize]) -> Result<FitStats> {
        let model = self.engine().model();
        fit_stats(&model.design, model.family, self.data(), fit, offset, unpenalized)
    }

    /// Fits the default grid around `full` and scores every point.
    pub fn select_lambda(&self, full: &FitResult, path: &PathSettings, cfg: &SolverConfig) -> Result<TuningTrace> {
        let grid = lambda_grid(&full.beta, path.points, path.lo, path.hi)?;
        self.select_lambda_on(full, &grid, path, cfg)
    }

    pub fn select_lambda_on(
        &self,
        full: &FitResult,
        grid: &[f64],
        path: &PathSettings,
        cfg: &SolverConfig,
    ) -> Result<TuningTrace> {
        tune(
            grid,
            self.data().len(),
            |lambda| {
                let spec = PenaltySpec::new(path.family, lambda, path.a)?;
                let (fit, profile) = self.penalized(full, &spec, cfg)?;
                Ok((fit, profile.map(|p| p.theta)))
            },
            |fit, offset| self.stats(fit, offset, &cfg.unpenalized),
        )
    }
}
