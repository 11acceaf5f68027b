//! Observed trajectories: step-function covariates, dispensations and follow-up.
//!
//! All times are in days. A subject is on treatment during each coverage
//! window `[V_{k-1}, V_{k-1} + w)` for `k = 1..=K` and during
//! `[V_K, min(V_K + w, X))`, and off treatment otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod io;
mod timeline;

pub use io::{
    read_cohort, read_cohort_from_readers, write_cohort, write_covariates, write_dispensations,
    write_outcomes, CohortFiles, RowProblem,
};
pub use timeline::{GapSegment, GapWindow, HistoryView, Piece};

/// Default width of the bookkeeping offset between coverage end and gap-clock start.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("time {time} is outside the domain [{lower}, {upper}]")]
    OutOfDomain { time: f64, lower: f64, upper: f64 },
    #[error("refill times must be strictly increasing (position {index})")]
    NonIncreasingRefills { index: usize },
    #[error("the first refill must be at time 0")]
    MissingBaselineRefill,
    #[error("at least one refill after baseline is required")]
    NoRefillAfterBaseline,
    #[error("refill at position {index} is closer than one coverage window to its predecessor")]
    NotNormalized { index: usize },
    #[error("coverage window must be positive and finite, got {0}")]
    InvalidCoverage(f64),
    #[error("epsilon must satisfy 0 < epsilon < coverage window, got {0}")]
    InvalidEpsilon(f64),
    #[error("covariate change times must start at 0 and increase strictly (position {index})")]
    InvalidChangeTimes { index: usize },
    #[error("covariate vector at position {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("follow-up time {followup} must exceed the last refill time {last_refill}")]
    FollowupNotAfterLastRefill { followup: f64, last_refill: f64 },
    #[error("covariate change at {time} lies after follow-up time {followup}")]
    CovariateAfterFollowup { time: f64, followup: f64 },
    #[error("subject {id}: {reason}")]
    InvalidSubject { id: String, reason: Box<DataError> },
    #[error("history lookup at time {requested} beyond the evaluation cutoff {cutoff}")]
    LookAhead { requested: f64, cutoff: f64 },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("{}", format_problems(.0))]
    Validation(Vec<RowProblem>),
    #[error("i/o error: {0}")]
    Io(String),
}

fn format_problems(problems: &[RowProblem]) -> String {
    let mut out = format!("{} validation problem(s)", problems.len());
    for p in problems {
        out.push_str("\n  ");
        out.push_str(&p.to_string());
    }
    out
}

/// Right-continuous step function `L_u` with values fixed between change times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateProcess {
    change_times: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
}

impl CovariateProcess {
    pub fn new(change_times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if change_times.is_empty() || change_times[0] != 0.0 {
            return Err(DataError::InvalidChangeTimes { index: 0 });
        }
        if values.len() != change_times.len() {
            return Err(DataError::DimensionMismatch {
                index: values.len().min(change_times.len()),
                expected: change_times.len(),
                found: values.len(),
            });
        }
        for (i, w) in change_times.windows(2).enumerate() {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(DataError::InvalidChangeTimes { index: i + 1 });
            }
        }
        let dim = values[0].len();
        let mut flat = Vec::with_capacity(dim * values.len());
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(DataError::DimensionMismatch {
                    index: i,
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFinite("covariate values"));
            }
            flat.extend_from_slice(v);
        }
        Ok(Self {
            change_times,
            values: flat,
            dim,
        })
    }

    /// A process that never changes.
    pub fn constant(value: Vec<f64>) -> Self {
        Self {
            change_times: vec![0.0],
            dim: value.len(),
            values: value,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of change points (at least one, the one at time 0).
    pub fn len(&self) -> usize {
        self.change_times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn change_times(&self) -> &[f64] {
        &self.change_times
    }

    /// Value in force from `change_times()[index]` onward.
    pub fn value(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    /// Index of the largest change time not exceeding `u`.
    pub fn index_at(&self, u: f64) -> Result<usize, DataError> {
        if !(u >= 0.0) {
            return Err(DataError::OutOfDomain {
                time: u,
                lower: 0.0,
                upper: f64::INFINITY,
            });
        }
        Ok(self.change_times.partition_point(|&t| t <= u) - 1)
    }

    /// Right-continuous evaluation of the process at `u`.
    pub fn covariate_at(&self, u: f64) -> Result<&[f64], DataError> {
        Ok(self.value(self.index_at(u)?))
    }

    /// Drops change points strictly after `horizon`.
    pub fn truncated(&self, horizon: f64) -> Self {
        let keep = self.change_times.partition_point(|&t| t <= horizon).max(1);
        Self {
            change_times: self.change_times[..keep].to_vec(),
            values: self.values[..keep * self.dim].to_vec(),
            dim: self.dim,
        }
    }
}

/// Free-function form of [`CovariateProcess::covariate_at`].
pub fn covariate_at(c: &CovariateProcess, u: f64) -> Result<&[f64], DataError> {
    c.covariate_at(u)
}

/// Gap lengths `T_k = V_k - (V_{k-1} + w - epsilon)` for `k = 1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTimeSet {
    gaps: Vec<f64>,
}

impl GapTimeSet {
    pub fn new(gaps: Vec<f64>) -> Self {
        Self { gaps }
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    /// Gap `k`, one-based as in the refill numbering.
    pub fn get(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.gaps.get(i).copied())
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// Normalized refill times `V_0 = 0 < V_1 < ... < V_K` with `V_k - V_{k-1} >= w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispensationRecord {
    refill_times: Vec<f64>,
    coverage_window: f64,
    epsilon: f64,
}

impl DispensationRecord {
    /// Validates refill times that are already normalized.
    pub fn from_normalized(refill_times: Vec<f64>, w: f64, epsilon: f64) -> Result<Self, DataError> {
        check_window(w, epsilon)?;
        check_raw(&refill_times)?;
        for k in 1..refill_times.len() {
            if refill_times[k] < refill_times[k - 1] + w {
                return Err(DataError::NotNormalized { index: k });
            }
        }
        Ok(Self {
            refill_times,
            coverage_window: w,
            epsilon,
        })
    }

    /// Replaces the gap-clock offset.
    pub fn with_epsilon(self, epsilon: f64) -> Result<Self, DataError> {
        check_window(self.coverage_window, epsilon)?;
        Ok(Self { epsilon, ..self })
    }

    pub fn refill_times(&self) -> &[f64] {
        &self.refill_times
    }

    /// `K`, the number of refills after baseline.
    pub fn refill_count(&self) -> usize {
        self.refill_times.len() - 1
    }

    pub fn last_refill(&self) -> f64 {
        *self.refill_times.last().expect("non-empty by construction")
    }

    pub fn coverage_window(&self) -> f64 {
        self.coverage_window
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gap_times(&self) -> GapTimeSet {
        let w = self.coverage_window;
        let gaps = self
            .refill_times
            .windows(2)
            .map(|v| v[1] - (v[0] + w - self.epsilon))
            .collect();
        GapTimeSet { gaps }
    }

    /// Calendar time at which the gap clock for refill `k` starts.
    pub fn gap_start(&self, k: usize) -> f64 {
        self.refill_times[k - 1] + self.coverage_window - self.epsilon
    }

    /// Treatment status on `[0, inf)`: on in every coverage window, off elsewhere.
    pub fn is_treated(&self, u: f64) -> bool {
        let idx = self.refill_times.partition_point(|&v| v <= u);
        idx > 0 && u < self.refill_times[idx - 1] + self.coverage_window
    }

    /// Sorted `(time, treated_after)` switch points of the treatment indicator.
    pub fn switches(&self) -> Vec<(f64, bool)> {
        let w = self.coverage_window;
        let v = &self.refill_times;
        let mut out = Vec::with_capacity(2 * v.len());
        for k in 0..v.len() {
            if k == 0 || v[k] > v[k - 1] + w {
                out.push((v[k], true));
            }
            let end = v[k] + w;
            if k + 1 == v.len() || v[k + 1] > end {
                out.push((end, false));
            }
        }
        out
    }
}

fn check_window(w: f64, epsilon: f64) -> Result<(), DataError> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(DataError::InvalidCoverage(w));
    }
    if !(epsilon > 0.0 && epsilon < w) {
        return Err(DataError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

fn check_raw(raw: &[f64]) -> Result<(), DataError> {
    if raw.first() != Some(&0.0) {
        return Err(DataError::MissingBaselineRefill);
    }
    if raw.iter().any(|t| !t.is_finite()) {
        return Err(DataError::NonFinite("refill times"));
    }
    for (i, w) in raw.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(DataError::NonIncreasingRefills { index: i + 1 });
        }
    }
    if raw.len() < 2 {
        return Err(DataError::NoRefillAfterBaseline);
    }
    Ok(())
}

/// Applies the overlap rule `V_k := max(V_k, V_{k-1} + w)` sequentially, using the
/// default epsilon.
pub fn normalize_dispensations(raw: &[f64], w: f64) -> Result<DispensationRecord, DataError> {
    normalize_dispensations_with(raw, w, DEFAULT_EPSILON)
}

/// [`normalize_dispensations`] with an explicit epsilon.
pub fn normalize_dispensations_with(
    raw: &[f64],
    w: f64,
    epsilon: f64,
) -> Result<DispensationRecord, DataError> {
    check_window(w, epsilon)?;
    check_raw(raw)?;
    let mut times = Vec::with_capacity(raw.len());
    times.push(raw[0]);
    for &v in &raw[1..] {
        let prev = *times.last().unwrap();
        times.push(v.max(prev + w));
    }
    Ok(DispensationRecord {
        refill_times: times,
        coverage_window: w,
        epsilon,
    })
}

/// Free-function form of [`DispensationRecord::gap_times`].
pub fn gap_times(d: &DispensationRecord) -> GapTimeSet {
    d.gap_times()
}

/// Treatment and covariate history on `[0, inf)`, without follow-up information.
///
/// Beyond the last covariate change the process is extended as a constant, and
/// beyond `V_K + w` treatment is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPath {
    pub covariates: CovariateProcess,
    pub dispensations: DispensationRecord,
}

impl TreatmentPath {
    pub fn new(covariates: CovariateProcess, dispensations: DispensationRecord) -> Self {
        Self {
            covariates,
            dispensations,
        }
    }
}

/// One subject's observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTrajectory {
    id: String,
    followup_time: f64,
    event: bool,
    baseline: Vec<f64>,
    path: TreatmentPath,
}

impl SubjectTrajectory {
    pub fn new(
        id: impl Into<String>,
        followup_time: f64,
        event: bool,
        baseline: Vec<f64>,
        covariates: CovariateProcess,
        dispensations: DispensationRecord,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let wrap = |reason: DataError| DataError::InvalidSubject {
            id: id.clone(),
            reason: Box::new(reason),
        };
        if !followup_time.is_finite() {
            return Err(wrap(DataError::NonFinite("follow-up time")));
        }
        if baseline.iter().any(|x| !x.is_finite()) {
            return Err(wrap(DataError::NonFinite("baseline covariates")));
        }
        let last_refill = dispensations.last_refill();
        if !(followup_time > last_refill) {
            return Err(wrap(DataError::FollowupNotAfterLastRefill {
                followup: followup_time,
                last_refill,
            }));
        }
        if let Some(&t) = covariates.change_times().last() {
            if t > followup_time {
                return Err(wrap(DataError::CovariateAfterFollowup {
                    time: t,
                    followup: followup_time,
                }));
            }
        }
        Ok(Self {
            id,
            followup_time,
            event,
            baseline,
            path: TreatmentPath::new(covariates, dispensations),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// `X = min(tau, C)`.
    pub fn followup_time(&self) -> f64 {
        self.followup_time
    }

    /// `Delta = 1` when the failure was observed.
    pub fn event(&self) -> bool {
        self.event
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    pub fn covariates(&self) -> &CovariateProcess {
        &self.path.covariates
    }

    pub fn dispensations(&self) -> &DispensationRecord {
        &self.path.dispensations
    }

    pub fn path(&self) -> &TreatmentPath {
        &self.path
    }

    /// `A_u` for `u` in `[0, X]`.
    pub fn treatment_indicator(&self, u: f64) -> Result<u8, DataError> {
        if !(u >= 0.0 && u <= self.followup_time) {
            return Err(DataError::OutOfDomain {
                time: u,
                lower: 0.0,
                upper: self.followup_time,
            });
        }
        // The final coverage interval is open at X.
        if u == self.followup_time {
            return Ok(0);
        }
        Ok(u8::from(self.path.dispensations.is_treated(u)))
    }
}

/// Free-function form of [`SubjectTrajectory::treatment_indicator`].
pub fn treatment_indicator(s: &SubjectTrajectory, u: f64) -> Result<u8, DataError> {
    s.treatment_indicator(u)
}

/// Column names shared by every subject in a cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Schema {
    pub covariates: Vec<String>,
    pub baseline: Vec<String>,
}

impl Schema {
    pub fn new(covariates: Vec<String>, baseline: Vec<String>) -> Self {
        Self {
            covariates,
            baseline,
        }
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|n| n == name)
    }

    pub fn baseline_index(&self, name: &str) -> Option<usize> {
        self.baseline.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    schema: Schema,
    subjects: Vec<SubjectTrajectory>,
}

impl Cohort {
    pub fn new(schema: Schema, subjects: Vec<SubjectTrajectory>) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::EmptyCohort);
        }
        for s in &subjects {
            let cov_dim = s.covariates().dim();
            if cov_dim != schema.covariates.len() {
                return Err(DataError::InvalidSubject {
                    id: s.id.clone(),
                    reason: Box::new(DataError::DimensionMismatch {
                        index: 0,
                        expected: schema.covariates.len(),
                        found: cov_dim,
                    }),
                });
            }
            if s.baseline.len() != schema.baseline.len() {
                return Err(DataError::InvalidSubject {
                    id: s.id.clone(),
                    reason: Box::new(DataError::DimensionMismatch {
                        index: 0,
                        expected: schema.baseline.len(),
                        found: s.baseline.len(),
                    }),
                });
            }
        }
        Ok(Self { schema, subjects })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn subjects(&self) -> &[SubjectTrajectory] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Cohort made of the subjects at `indices`, repeats allowed.
    pub fn resample(&self, indices: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    pub fn into_subjects(self) -> Vec<SubjectTrajectory> {
        self.subjects
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(times: &[f64]) -> DispensationRecord {
        normalize_dispensations(times, 30.0).unwrap()
    }

    #[test]
    fn normalize_applies_overlap_rule() {
        assert_eq!(record(&[0.0, 20.0, 60.0]).refill_times(), &[0.0, 30.0, 60.0]);
        assert_eq!(record(&[0.0, 40.0]).refill_times(), &[0.0, 40.0]);
        assert_eq!(record(&[0.0, 10.0, 15.0]).refill_times(), &[0.0, 30.0, 60.0]);
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert_eq!(
            normalize_dispensations(&[0.0], 30.0),
            Err(DataError::NoRefillAfterBaseline)
        );
        assert_eq!(
            normalize_dispensations(&[0.0, 5.0, 5.0], 30.0),
            Err(DataError::NonIncreasingRefills { index: 2 })
        );
        assert_eq!(
            normalize_dispensations(&[1.0, 5.0], 30.0),
            Err(DataError::MissingBaselineRefill)
        );
        assert!(matches!(
            normalize_dispensations_with(&[0.0, 40.0], 30.0, 30.0),
            Err(DataError::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn gap_times_follow_the_offset_formula() {
        let eps = DEFAULT_EPSILON;
        assert_eq!(record(&[0.0, 40.0]).gap_times().gaps(), &[40.0 - (30.0 - eps)]);
        assert_eq!(record(&[0.0, 30.0]).gap_times().gaps(), &[30.0 - (30.0 - eps)]);
        let g = record(&[0.0, 30.0, 75.0]).gap_times();
        assert!((g.gaps()[0] - 1e-6).abs() < 1e-14);
        assert!((g.gaps()[1] - (15.0 + 1e-6)).abs() < 1e-12);
        assert!((record(&[0.0, 40.0]).gap_times().gaps()[0] - (10.0 + 1e-6)).abs() < 1e-12);
    }

    fn subject(times: &[f64], followup: f64) -> SubjectTrajectory {
        SubjectTrajectory::new(
            "s",
            followup,
            true,
            vec![],
            CovariateProcess::constant(vec![]),
            record(times),
        )
        .unwrap()
    }

    #[test]
    fn treatment_indicator_marks_coverage_windows() {
        let s = subject(&[0.0, 40.0], 100.0);
        assert_eq!(s.treatment_indicator(10.0).unwrap(), 1);
        assert_eq!(s.treatment_indicator(35.0).unwrap(), 0);
        assert_eq!(s.treatment_indicator(45.0).unwrap(), 1);
        assert_eq!(s.treatment_indicator(30.0).unwrap(), 0);
        assert_eq!(s.treatment_indicator(40.0).unwrap(), 1);
        assert_eq!(s.treatment_indicator(70.0).unwrap(), 0);
        assert!(s.treatment_indicator(100.5).is_err());
        assert!(s.treatment_indicator(-1.0).is_err());
    }

    #[test]
    fn covariate_lookup_is_right_continuous() {
        let c = CovariateProcess::new(vec![0.0, 10.0], vec![vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(c.covariate_at(9.999).unwrap(), &[1.0]);
        assert_eq!(c.covariate_at(10.0).unwrap(), &[2.0]);
        let c = CovariateProcess::new(vec![0.0], vec![vec![3.0]]).unwrap();
        assert_eq!(c.covariate_at(500.0).unwrap(), &[3.0]);
        assert!(c.covariate_at(-0.1).is_err());
    }

    #[test]
    fn covariate_process_validates_shape() {
        assert!(CovariateProcess::new(vec![1.0], vec![vec![0.0]]).is_err());
        assert!(CovariateProcess::new(vec![0.0, 0.0], vec![vec![0.0], vec![1.0]]).is_err());
        assert!(CovariateProcess::new(vec![0.0, 1.0], vec![vec![0.0], vec![1.0, 2.0]]).is_err());
        assert!(CovariateProcess::new(vec![0.0], vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn subject_requires_followup_after_last_refill() {
        let err = SubjectTrajectory::new(
            "a",
            40.0,
            true,
            vec![],
            CovariateProcess::constant(vec![]),
            record(&[0.0, 40.0]),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::InvalidSubject { .. }));
    }

    #[test]
    fn switches_merge_back_to_back_windows() {
        let d = record(&[0.0, 30.0, 75.0]);
        assert_eq!(d.switches(), vec![(0.0, true), (60.0, false), (75.0, true), (105.0, false)]);
    }
}
