//! Offline constraint tightening for the nominal predictions.
//!
//! For an error `e_l` after `l` steps, a row `(a, b)` of a constraint on the
//! true state becomes `a z ≤ b − q` on the nominal state, where `q` is the
//! `1 − ε` quantile of `a e_l` (stochastic rows) or its supremum over the
//! disturbance set (robust rows). Three schedules are produced:
//!
//! * plain: quantiles for every row and step;
//! * mixed: plain quantiles combined with worst-case sums over a confidence
//!   region `W_f`, so that the shifted previous plan stays feasible whenever
//!   the realized disturbance falls in `W_f`;
//! * robust: suprema over the full support `W`.

pub mod convolution;
pub mod mixed;
pub mod sampled;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::disturbance::DisturbanceModel;
use crate::error::{Error, Result};
use crate::lti::{ControllerGains, ErrorPropagation, LtiSystem};
use crate::polytope::Polytope;
pub use sampled::{bracket_certificate, campi_sample_size, quantile_tighten, SampledQuantileCertificate};
use sampled::RowJob;

/// Chance constraints `P{H x ≤ h} ≥ 1 − ε` (row-wise) and hard input
/// constraints `G u ≤ g`, plus the miss probability used for the terminal
/// constraint of the nominal prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChanceConstraints {
    #[serde(rename = "H", with = "crate::rows::matrix")]
    pub state_normals: DMatrix<f64>,
    #[serde(rename = "h", with = "crate::rows::vector")]
    pub state_offsets: DVector<f64>,
    /// Per-row violation levels for the state rows.
    #[serde(with = "crate::rows::vector")]
    pub eps: DVector<f64>,
    #[serde(rename = "G", with = "crate::rows::matrix")]
    pub input_normals: DMatrix<f64>,
    #[serde(rename = "g", with = "crate::rows::vector")]
    pub input_offsets: DVector<f64>,
    /// Violation level of the input rows inside the predictions.
    pub eps_u: f64,
    /// Probability of the true predicted state missing the terminal set.
    pub terminal_eps: f64,
}

impl ChanceConstraints {
    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        let p = self.state_normals.nrows();
        if self.state_normals.ncols() != nx || self.state_offsets.len() != p || self.eps.len() != p {
            return Err(Error::DimensionMismatch("state constraint rows".into()));
        }
        let q = self.input_normals.nrows();
        if self.input_normals.ncols() != nu || self.input_offsets.len() != q {
            return Err(Error::DimensionMismatch("input constraint rows".into()));
        }
        let in_unit = |e: f64| e > 0.0 && e < 1.0;
        if !self.eps.iter().all(|&e| in_unit(e)) || !in_unit(self.eps_u) || !in_unit(self.terminal_eps) {
            return Err(Error::BadParams("violation levels must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn state_set(&self) -> Polytope {
        Polytope::new(self.state_normals.clone(), self.state_offsets.clone()).expect("validated rows")
    }

    pub fn input_set(&self) -> Polytope {
        Polytope::new(self.input_normals.clone(), self.input_offsets.clone()).expect("validated rows")
    }
}

/// Sampling knobs: certificate confidence, relative half-width of the
/// probability bracket (`ε_l = (1 − bracket) ε`, `ε_u = (1 + bracket) ε`)
/// and the seed of all tightening draws.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SamplingParams {
    pub beta: f64,
    pub bracket: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            bracket: 0.05,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Sampled,
    Convolution { grid: usize },
    WorstCase,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Plain,
    /// `W_f = scale · W` with coverage at least `1 − eps_f`.
    Mixed { eps_f: f64, scale: f64 },
    /// Worst case of the accumulated error on every row.
    WorstCase,
    /// Every row tightened by the support of a fixed tube cross-section.
    RigidTube,
}

/// Provenance of a schedule: method and, for sampled rows, the certificate
/// of every row.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Certificates {
    pub method: Option<Method>,
    pub state: Vec<Option<SampledQuantileCertificate>>,
    pub input: Vec<Option<SampledQuantileCertificate>>,
    pub terminal: Vec<Option<SampledQuantileCertificate>>,
}

/// Tightened offsets: `eta[l − 1]` for `Z_l`, `l = 1 … T`; `mu[l]` for
/// `V_l`, `l = 0 … T − 1`; `eta_f` for `Z_f`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TighteningSchedule {
    #[serde(with = "crate::rows::vectors")]
    pub eta: Vec<DVector<f64>>,
    #[serde(with = "crate::rows::vectors")]
    pub mu: Vec<DVector<f64>>,
    #[serde(with = "crate::rows::vector")]
    pub eta_f: DVector<f64>,
    pub variant: Variant,
    pub certificate: Certificates,
    pub seed: u64,
}

impl TighteningSchedule {
    pub fn horizon(&self) -> usize {
        self.eta.len()
    }

    /// `Z_l` for `l = 1 … T`.
    pub fn state_set(&self, cons: &ChanceConstraints, l: usize) -> Polytope {
        Polytope::new(cons.state_normals.clone(), self.eta[l - 1].clone()).expect("schedule rows")
    }

    /// `V_l` for `l = 0 … T − 1`.
    pub fn input_set(&self, cons: &ChanceConstraints, l: usize) -> Polytope {
        Polytope::new(cons.input_normals.clone(), self.mu[l].clone()).expect("schedule rows")
    }

    /// `Z_f` for a terminal set with normals `terminal_normals`.
    pub fn terminal_set(&self, terminal_normals: &DMatrix<f64>) -> Polytope {
        Polytope::new(terminal_normals.clone(), self.eta_f.clone()).expect("schedule rows")
    }

    /// Errors with the first empty `Z_l` or `V_l`.
    pub fn check_nonempty(&self, cons: &ChanceConstraints) -> Result<()> {
        for l in 1..=self.horizon() {
            if self.state_set(cons, l).is_empty() {
                return Err(Error::InfeasibleTightening(format!("Z_{l}")));
            }
        }
        for l in 0..self.mu.len() {
            if self.input_set(cons, l).is_empty() {
                return Err(Error::InfeasibleTightening(format!("V_{l}")));
            }
        }
        Ok(())
    }
}

/// State and input tightening (everything but the terminal rows, which need
/// the terminal set built from `eta[0]`).
#[derive(Clone, Debug, PartialEq)]
pub struct StageTightening {
    pub eta: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub state_certs: Vec<Option<SampledQuantileCertificate>>,
    pub input_certs: Vec<Option<SampledQuantileCertificate>>,
}

/// Shared context of all tightening programs.
pub struct Tightener<'a> {
    pub sys: &'a LtiSystem,
    pub gains: &'a ControllerGains,
    pub model: &'a DisturbanceModel,
    pub constraints: &'a ChanceConstraints,
    pub sampling: SamplingParams,
    pub method: Method,
    prop: ErrorPropagation,
}

// Stream layout for the sampled programs: constraint class in the high
// bits, error horizon and row group below.
const STATE_CLASS: u64 = 1;
const INPUT_CLASS: u64 = 2;
const TERMINAL_CLASS: u64 = 3;

fn stream_id(class: u64, horizon: usize, group: usize) -> u64 {
    (class << 48) | ((horizon as u64) << 24) | group as u64
}

impl<'a> Tightener<'a> {
    pub fn new(
        sys: &'a LtiSystem,
        gains: &'a ControllerGains,
        model: &'a DisturbanceModel,
        constraints: &'a ChanceConstraints,
        sampling: SamplingParams,
        method: Method,
    ) -> Result<Self> {
        constraints.validate(sys.nx(), sys.nu())?;
        if model.dim() != sys.nw() {
            return Err(Error::DimensionMismatch(format!(
                "disturbance dim {} vs Bw columns {}",
                model.dim(),
                sys.nw()
            )));
        }
        let prop = ErrorPropagation::new(&gains.closed_loop, &sys.bw, sys.horizon);
        Ok(Self {
            sys,
            gains,
            model,
            constraints,
            sampling,
            method,
            prop,
        })
    }

    pub fn propagation(&self) -> &ErrorPropagation {
        &self.prop
    }

    /// `G K`, the input rows seen by the error feedback.
    pub fn input_error_rows(&self) -> DMatrix<f64> {
        &self.constraints.input_normals * &self.gains.gain
    }

    /// Quantile offsets `q[l][j]` of `rows_j e_l` for each horizon in
    /// `horizons`, at per-row levels `eps`. Returns the offsets and the
    /// per-row certificates.
    fn quantiles(
        &self,
        rows: &DMatrix<f64>,
        eps: &[f64],
        horizons: &[usize],
        class: u64,
    ) -> Result<(Vec<DVector<f64>>, Vec<Option<SampledQuantileCertificate>>)> {
        let p = rows.nrows();
        match self.method {
            Method::WorstCase => {
                let mut out = Vec::with_capacity(horizons.len());
                for &l in horizons {
                    out.push(self.worst_case_offsets(rows, l, self.model.support())?);
                }
                Ok((out, vec![None; p]))
            }
            Method::Convolution { grid } => {
                let marginals = self.model.marginals().ok_or_else(|| {
                    Error::BadParams("convolution tightening needs per-coordinate marginals".into())
                })?;
                let mut out = Vec::with_capacity(horizons.len());
                for &l in horizons {
                    let mut q = DVector::zeros(p);
                    for j in 0..p {
                        let mut margs = Vec::new();
                        let mut coefs = Vec::new();
                        for i in 0..l {
                            let c = rows.row(j) * self.prop.map(i);
                            for (s, m) in marginals.iter().enumerate() {
                                margs.push(*m);
                                coefs.push(c[s]);
                            }
                        }
                        q[j] = convolution::sum_quantile(&margs, &coefs, 1.0 - eps[j], grid)?;
                    }
                    out.push(q);
                }
                Ok((out, vec![None; p]))
            }
            Method::Sampled => {
                // Rows with equal levels share one certificate and one batch.
                let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
                for (j, &e) in eps.iter().enumerate() {
                    match groups.iter_mut().find(|(ge, _)| *ge == e) {
                        Some((_, rs)) => rs.push(j),
                        None => groups.push((e, vec![j])),
                    }
                }
                let mut certs = vec![None; p];
                let mut group_certs = Vec::with_capacity(groups.len());
                for (e, rs) in &groups {
                    let c = bracket_certificate(*e, self.sampling.bracket, self.sampling.beta)?;
                    for &j in rs {
                        certs[j] = Some(c);
                    }
                    group_certs.push(c);
                }
                let mut jobs = Vec::new();
                for &l in horizons {
                    for (gi, (_, rs)) in groups.iter().enumerate() {
                        jobs.push(RowJob {
                            horizon: l,
                            rows: rs.clone(),
                            cert: group_certs[gi],
                            stream: stream_id(class, l, gi),
                        });
                    }
                }
                let results = sampled::sampled_quantiles(&jobs, rows, &self.prop, self.model);
                let mut out = vec![DVector::zeros(p); horizons.len()];
                for (job, qs) in jobs.iter().zip(results) {
                    let slot = horizons.iter().position(|&l| l == job.horizon).expect("job horizon");
                    for (&j, q) in job.rows.iter().zip(qs) {
                        out[slot][j] = q;
                    }
                }
                Ok((out, certs))
            }
        }
    }

    /// `Σ_{i<l} support(set, (row_j A_cl^i B_w)ᵀ)` for every row.
    pub fn worst_case_offsets(&self, rows: &DMatrix<f64>, l: usize, set: &Polytope) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(rows.nrows());
        for j in 0..rows.nrows() {
            for i in 0..l {
                let d = (rows.row(j) * self.prop.map(i)).transpose();
                out[j] += set.support(&d)?;
            }
        }
        Ok(out)
    }

    /// `η_1 … η_T` and `μ_0 … μ_{T−1}`.
    pub fn stage_tightening(&self) -> Result<StageTightening> {
        let t = self.sys.horizon;
        let cons = self.constraints;
        let state_h: Vec<usize> = (1..=t).collect();
        let eps: Vec<f64> = cons.eps.iter().copied().collect();
        let (qs, state_certs) = self.quantiles(&cons.state_normals, &eps, &state_h, STATE_CLASS)?;
        let eta = qs.into_iter().map(|q| &cons.state_offsets - q).collect();

        let gk = self.input_error_rows();
        let input_h: Vec<usize> = (1..t).collect();
        let eps_u = vec![cons.eps_u; gk.nrows()];
        let (qs, input_certs) = if input_h.is_empty() {
            (Vec::new(), vec![None; gk.nrows()])
        } else {
            self.quantiles(&gk, &eps_u, &input_h, INPUT_CLASS)?
        };
        let mut mu = Vec::with_capacity(t);
        // e_0 = 0, so the first input keeps the hard bound exactly.
        mu.push(cons.input_offsets.clone());
        mu.extend(qs.into_iter().map(|q| &cons.input_offsets - q));
        Ok(StageTightening {
            eta,
            mu,
            state_certs,
            input_certs,
        })
    }

    /// Terminal offsets `h_f − q(H_f e_i)` for each error horizon in
    /// `horizons`, at the terminal miss level.
    pub fn terminal_offsets(
        &self,
        terminal: &Polytope,
        horizons: &[usize],
    ) -> Result<(Vec<DVector<f64>>, Vec<Option<SampledQuantileCertificate>>)> {
        let eps = vec![self.constraints.terminal_eps; terminal.n_rows()];
        let (qs, certs) = self.quantiles(terminal.normals(), &eps, horizons, TERMINAL_CLASS)?;
        Ok((qs.into_iter().map(|q| terminal.offsets() - q).collect(), certs))
    }

    /// Plain schedule: quantile (or worst-case, for [`Method::WorstCase`])
    /// tightening of every row, with the terminal rows taken against `e_T`.
    pub fn plain_schedule(&self, stages: &StageTightening, terminal: &Polytope) -> Result<TighteningSchedule> {
        let t = self.sys.horizon;
        let (mut eta_f, terminal_certs) = self.terminal_offsets(terminal, &[t])?;
        let variant = if self.method == Method::WorstCase {
            Variant::WorstCase
        } else {
            Variant::Plain
        };
        Ok(TighteningSchedule {
            eta: stages.eta.clone(),
            mu: stages.mu.clone(),
            eta_f: eta_f.remove(0),
            variant,
            certificate: Certificates {
                method: Some(self.method),
                state: stages.state_certs.clone(),
                input: stages.input_certs.clone(),
                terminal: terminal_certs,
            },
            seed: self.sampling.seed,
        })
    }
}

/// Schedule of a rigid tube with cross-section `tube`: every state row
/// becomes `h − supp_S(H)`, every input row `g − supp_S(G K)` (stage 0
/// included), and the terminal rows are the offsets of `terminal`.
pub fn rigid_tube_schedule(
    cons: &ChanceConstraints,
    gains: &ControllerGains,
    tube: &Polytope,
    terminal: &Polytope,
    horizon: usize,
    seed: u64,
) -> Result<TighteningSchedule> {
    let shrink = |normals: &DMatrix<f64>, offsets: &DVector<f64>| -> Result<DVector<f64>> {
        let mut out = offsets.clone();
        for j in 0..normals.nrows() {
            out[j] -= tube.support(&normals.row(j).transpose())?;
        }
        Ok(out)
    };
    let eta = shrink(&cons.state_normals, &cons.state_offsets)?;
    let mu = shrink(&(&cons.input_normals * &gains.gain), &cons.input_offsets)?;
    Ok(TighteningSchedule {
        eta: vec![eta; horizon],
        mu: vec![mu; horizon],
        eta_f: terminal.offsets().clone(),
        variant: Variant::RigidTube,
        certificate: Certificates::default(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disturbance::DisturbanceKind;
    use crate::lti::lqr_synthesize;
    use nalgebra::dmatrix;

    fn scalar_setup(half: f64) -> (LtiSystem, ControllerGains, DisturbanceModel, ChanceConstraints) {
        let sys = LtiSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 3).unwrap();
        let gains = lqr_synthesize(&sys).unwrap();
        let model = DisturbanceModel::new(DisturbanceKind::UniformBox { lo: vec![-half], hi: vec![half] }, 0, 4).unwrap();
        let cons = ChanceConstraints {
            state_normals: dmatrix![1.0],
            state_offsets: DVector::from_element(1, 0.0),
            eps: DVector::from_element(1, 0.5),
            input_normals: dmatrix![1.0; -1.0],
            input_offsets: DVector::from_element(2, 1.0),
            eps_u: 0.1,
            terminal_eps: 0.1,
        };
        (sys, gains, model, cons)
    }

    #[test]
    fn zero_disturbance_keeps_offsets() {
        let (sys, gains, model, cons) = scalar_setup(0.0);
        let t = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Sampled).unwrap();
        let st = t.stage_tightening().unwrap();
        assert!(st.eta.iter().all(|e| e[0] == 0.0));
        assert!(st.mu.iter().all(|m| m == &cons.input_offsets));
    }

    #[test]
    fn uniform_first_step_median() {
        // e_1 = w ~ U[−1, 1], H = 1, h = 0, ε = 0.5 → η_1 ≈ −0.
        // The bracket [0.475, 0.525] maps to quantiles in [−0.05, 0.05].
        let (sys, gains, model, cons) = scalar_setup(1.0);
        let t = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Sampled).unwrap();
        let st = t.stage_tightening().unwrap();
        assert!(st.eta[0][0].abs() <= 0.05 + 0.01, "{}", st.eta[0][0]);
        assert_eq!(st.mu[0], cons.input_offsets);
        assert!(st.mu[1].iter().all(|&m| m < 1.0));
    }

    #[test]
    fn zero_gain_keeps_inputs() {
        let (sys, mut gains, model, cons) = scalar_setup(1.0);
        gains.gain = dmatrix![0.0];
        gains.closed_loop = sys.a.clone();
        let t = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Sampled).unwrap();
        let st = t.stage_tightening().unwrap();
        assert!(st.mu.iter().all(|m| m == &cons.input_offsets));
    }

    #[test]
    fn smaller_eps_tightens_more() {
        let (sys, gains, model, mut cons) = scalar_setup(1.0);
        let mut last: Option<Vec<f64>> = None;
        for eps in [0.4, 0.2, 0.1, 0.05] {
            cons.eps = DVector::from_element(1, eps);
            let t = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Sampled).unwrap();
            let eta: Vec<f64> = t.stage_tightening().unwrap().eta.iter().map(|e| e[0]).collect();
            if let Some(prev) = &last {
                assert!(eta.iter().zip(prev).all(|(a, b)| a <= b));
            }
            last = Some(eta);
        }
    }

    #[test]
    fn sampled_and_convolution_agree() {
        let (sys, gains, model, cons) = scalar_setup(1.0);
        let s = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Sampled).unwrap();
        let c = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Convolution { grid: 4096 }).unwrap();
        let a = s.stage_tightening().unwrap();
        let b = c.stage_tightening().unwrap();
        for (x, y) in a.eta.iter().zip(&b.eta) {
            assert!((x[0] - y[0]).abs() < 0.1, "{x} vs {y}");
        }
    }

    #[test]
    fn worst_case_matches_geometric_sum() {
        let (sys, gains, model, cons) = scalar_setup(1.0);
        let t = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::WorstCase).unwrap();
        let st = t.stage_tightening().unwrap();
        let a = gains.closed_loop[(0, 0)];
        for l in 1..=3 {
            let expect: f64 = -(0..l).map(|i| a.abs().powi(i as i32)).sum::<f64>();
            assert!((st.eta[l - 1][0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_json_roundtrip() {
        let (sys, gains, model, cons) = scalar_setup(1.0);
        let t = Tightener::new(&sys, &gains, &model, &cons, SamplingParams::default(), Method::Sampled).unwrap();
        let st = t.stage_tightening().unwrap();
        let term = Polytope::from_box(&[-0.5], &[0.5]).unwrap();
        let sched = t.plain_schedule(&st, &term).unwrap();
        let text = serde_json::to_string(&sched).unwrap();
        let back: TighteningSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sched);
        for key in ["\"eta\"", "\"mu\"", "\"eta_f\"", "\"variant\"", "\"certificate\"", "\"seed\""] {
            assert!(text.contains(key));
        }
    }
}
