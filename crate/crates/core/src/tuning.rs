//! GCV and BIC selection of the regularization parameter.

use std::io::{Read, Write};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Design, Family};
use crate::solver::{sigma_lambda, FitResult};

/// Clamp applied to fitted probabilities before the deviance is taken.
pub const MU_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gcv,
    Bic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcv" => Ok(Criterion::Gcv),
            "bic" => Ok(Criterion::Bic),
            other => Err(Error::InvalidConfig(format!(
                "unknown criterion `{other}` (expected gcv or bic)"
            ))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Gcv => "GCV",
            Criterion::Bic => "BIC",
        })
    }
}

/// `D(μ̂) = 2 Σ [y log(y/μ̂) + (1−y) log{(1−y)/(1−μ̂)}]` with `0·log 0 = 0`.
pub fn deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let m = m.clamp(MU_CLAMP, 1.0 - MU_CLAMP);
            let a = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            let b = if y < 1.0 {
                (1.0 - y) * ((1.0 - y) / (1.0 - m)).ln()
            } else {
                0.0
            };
            a + b
        })
        .sum::<f64>()
}

/// `df = tr{I (I + n Σ_λ)⁻¹}` with `I = Vᵀ Q V`.
pub fn effective_df(v: &DMatrix<f64>, q: &[f64], sigma: &[f64]) -> Result<f64> {
    let k = v.ncols();
    if sigma.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: sigma.len(),
        });
    }
    if k == 0 {
        return Ok(0.0);
    }
    let n = v.nrows() as f64;
    let mut info = DMatrix::<f64>::zeros(k, k);
    for (i, row) in v.row_iter().enumerate() {
        for a in 0..k {
            for b in 0..=a {
                info[(a, b)] += q[i] * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    let mut reg = info.clone();
    for (a, s) in sigma.iter().enumerate() {
        reg[(a, a)] += n * s;
    }
    let inv = reg.try_inverse().ok_or(Error::SingularInfo)?;
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularInfo);
    }
    Ok((info * inv).trace())
}

pub fn gcv_score(deviance: f64, df: f64, n: usize) -> Result<f64> {
    let nf = n as f64;
    if df >= nf {
        return Err(Error::DfSaturated { df, n });
    }
    Ok(deviance / (nf * (1.0 - df / nf).powi(2)))
}

pub fn bic_score(deviance: f64, df: f64, n: usize) -> Result<f64> {
    if df >= n as f64 {
        return Err(Error::DfSaturated { df, n });
    }
    Ok(deviance + 2.0 * (n as f64).ln() * df)
}

/// Deviance and degrees of freedom of one fit, with `W` in place of `X`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitStats {
    pub df: f64,
    pub deviance: f64,
}

/// Computes the naive fitted values and the ingredients of GCV/BIC for a fit.
/// `offset` adds a per-observation term (the profiled `θ̂_i`) to the predictor.
pub fn fit_stats(
    design: &Design,
    family: Family,
    data: &Dataset,
    fit: &FitResult,
    offset: Option<&[f64]>,
    unpenalized: &[usize],
) -> Result<FitStats> {
    let n = data.len();
    let act = &fit.active;
    let mut v = DMatrix::<f64>::zeros(n, act.len());
    let mut q = vec![0.0; n];
    let mut mu = vec![0.0; n];
    for i in 0..n {
        let row = design.row(data.w[i], data.covariates_of(i));
        let mut eta: f64 = row.iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
        if let Some(o) = offset {
            eta += o[i];
        }
        for (k, &j) in act.iter().enumerate() {
            v[(i, k)] = row[j];
        }
        match family {
            Family::Logistic => {
                let m = crate::model::logistic(eta).clamp(MU_CLAMP, 1.0 - MU_CLAMP);
                mu[i] = m;
                q[i] = m * (1.0 - m);
            }
            Family::Gaussian { sd } => {
                mu[i] = eta;
                q[i] = 1.0 / (sd * sd);
            }
        }
    }
    let deviance = match family {
        Family::Logistic => deviance(&data.y, &mu),
        Family::Gaussian { sd } => data
            .y
            .iter()
            .zip(&mu)
            .map(|(y, m)| -2.0 * family_loglik(*y, *m, sd))
            .sum(),
    };
    let df = effective_df(&v, &q, &sigma_lambda(fit, unpenalized))?;
    Ok(FitStats { df, deviance })
}

fn family_loglik(y: f64, eta: f64, sd: f64) -> f64 {
    Family::Gaussian { sd }.log_density(y, eta)
}

/// Default grid: `points` log-spaced values in `[lo, hi]·max|β̂|`.
pub fn lambda_grid(beta_full: &[f64], points: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let scale = beta_full.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    if points == 0 || !(lo > 0.0) || !(hi >= lo) || !(scale > 0.0) {
        return Err(Error::InvalidConfig(
            "lambda grid needs points >= 1, 0 < lo <= hi and a nonzero fit".into(),
        ));
    }
    if points == 1 {
        return Ok(vec![lo * scale]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|k| scale * (a + (b - a) * k as f64 / (points - 1) as f64).exp())
        .collect())
}

/// One grid point of a tuning run.
#[derive(Debug, Clone)]
pub struct TuningRow {
    pub lambda: f64,
    pub df: f64,
    pub deviance: f64,
    pub gcv: f64,
    pub bic: f64,
    pub n_active: usize,
    pub converged: bool,
    pub fit: Option<FitResult>,
    /// Per-observation offsets of a semiparametric fit.
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TuningTrace {
    pub rows: Vec<TuningRow>,
}

/// Flat CSV record of a [`TuningRow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub lambda: f64,
    pub df: f64,
    pub deviance: f64,
    pub gcv: f64,
    pub bic: f64,
    pub n_active: usize,
    pub converged: bool,
}

impl TuningTrace {
    /// Index of the converged row minimizing the criterion.
    pub fn argmin(&self, criterion: Criterion) -> Option<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.converged)
            .map(|(i, r)| {
                (
                    i,
                    match criterion {
                        Criterion::Gcv => r.gcv,
                        Criterion::Bic => r.bic,
                    },
                )
            })
            .filter(|(_, s)| s.is_finite())
            .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
                Some((_, b)) if b <= s => best,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i)
    }

    pub fn selected(&self, criterion: Criterion) -> Option<&TuningRow> {
        self.argmin(criterion).map(|i| &self.rows[i])
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.rows
            .iter()
            .map(|r| TraceRecord {
                lambda: r.lambda,
                df: r.df,
                deviance: r.deviance,
                gcv: r.gcv,
                bic: r.bic,
                n_active: r.n_active,
                converged: r.converged,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.records() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
        let mut r = csv::Reader::from_reader(input);
        r.deserialize()
            .map(|rec| rec.map_err(|e| Error::Parse(e.to_string())))
            .collect()
    }
}

/// Fits every `λ` of `grid` with `fit_at` and scores the converged fits with `stats`.
pub fn tune<F, S>(grid: &[f64], n: usize, mut fit_at: F, mut stats: S) -> Result<TuningTrace>
where
    F: FnMut(f64) -> Result<(FitResult, Option<Vec<f64>>)>,
    S: FnMut(&FitResult, Option<&[f64]>) -> Result<FitStats>,
{
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("lambda grid must increase strictly".into()));
    }
    let mut trace = TuningTrace::default();
    for &lambda in grid {
        let mut row = TuningRow {
            lambda,
            df: f64::NAN,
            deviance: f64::NAN,
            gcv: f64::NAN,
            bic: f64::NAN,
            n_active: 0,
            converged: false,
            fit: None,
            offset: None,
        };
        match fit_at(lambda) {
            Ok((fit, offset)) => {
                row.n_active = fit.active.len();
                row.converged = fit.converged;
                if !fit.converged {
                    warn!("fit at lambda {lambda:.4e} did not converge; excluded from selection");
                }
                match stats(&fit, offset.as_deref()) {
                    Ok(st) => {
                        row.df = st.df;
                        row.deviance = st.deviance;
                        row.gcv = gcv_score(st.deviance, st.df, n).unwrap_or(f64::NAN);
                        row.bic = bic_score(st.deviance, st.df, n).unwrap_or(f64::NAN);
                    }
                    Err(e) => warn!("scoring lambda {lambda:.4e} failed: {e}"),
                }
                row.fit = Some(fit);
                row.offset = offset;
            }
            Err(e) => warn!("fit at lambda {lambda:.4e} failed: {e}"),
        }
        trace.rows.push(row);
    }
    if trace.argmin(Criterion::Gcv).is_none() {
        return Err(Error::AllFitsFailed);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deviance_examples() {
        let d = deviance(&[1.0], &[0.25]);
        assert!((d - 2.0 * 4f64.ln()).abs() < 1e-12);
        let y = [1.0, 0.0, 0.0, 1.0, 1.0];
        let d = deviance(&y, &[0.5; 5]);
        assert!((d - 10.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_has_near_zero_deviance() {
        assert!(deviance(&[1.0, 0.0], &[1.0, 0.0]) < 1e-8);
    }

    #[test]
    fn criteria_examples() {
        let n = 1000;
        let d = 2.0 * n as f64 * 2f64.ln();
        let bic = bic_score(d, 4.0, n).unwrap();
        assert!((bic - (d + 8.0 * 1000f64.ln())).abs() < 1e-10);
        assert!((bic - 1441.55).abs() < 0.01);
        assert_eq!(gcv_score(d, 0.0, n).unwrap(), d / 1000.0);
        assert_eq!(bic_score(d, 0.0, n).unwrap(), d);
        assert!(gcv_score(d, 1000.0, n).is_err());
    }

    #[test]
    fn df_limits() {
        let v = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let q = vec![0.2; 20];
        assert!((effective_df(&v, &q, &[0.0; 3]).unwrap() - 3.0).abs() < 1e-10);
        assert!(effective_df(&v, &q, &[1e12; 3]).unwrap() < 1e-6);
        let mid = effective_df(&v, &q, &[0.05; 3]).unwrap();
        assert!(mid > 0.0 && mid < 3.0);
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = lambda_grid(&[0.5, -2.0], 40, 1e-3, 1.0).unwrap();
        assert_eq!(g.len(), 40);
        assert!((g[0] - 2e-3).abs() < 1e-15);
        assert!((g[39] - 2.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    proptest! {
        #[test]
        fn df_decreases_with_penalty(seed in 0u64..500, bump in 0.0..2.0f64) {
            let v = DMatrix::from_fn(15, 3, |i, j| (((i as u64 + 3) * (j as u64 + 5) * (seed + 11)) % 17) as f64 / 8.0 - 1.0);
            let q: Vec<f64> = (0..15).map(|i| 0.05 + ((seed + i as u64) % 7) as f64 / 30.0).collect();
            let s1 = [0.01, 0.2, 0.0];
            let s2 = [0.01 + bump, 0.2 + bump, bump];
            if let (Ok(a), Ok(b)) = (effective_df(&v, &q, &s1), effective_df(&v, &q, &s2)) {
                prop_assert!(b <= a + 1e-9);
            }
        }
    }
}
