//! Partitions of the calendar and gap clocks into pieces of constant history.

use super::{DataError, SubjectTrajectory, TreatmentPath};

/// A calendar interval `[start, end)` with constant treatment and covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    pub treated: bool,
    pub covariate_index: usize,
}

impl Piece {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy)]
enum Break {
    Covariate(usize),
    Treatment(bool),
    Marker,
}

impl TreatmentPath {
    /// Partition of `[0, horizon)` at covariate changes and treatment switches.
    ///
    /// `horizon` may be infinite, in which case the last piece is unbounded.
    pub fn pieces(&self, horizon: f64) -> Vec<Piece> {
        self.pieces_with_breaks(horizon, &[])
    }

    /// As [`pieces`](Self::pieces), additionally splitting at the sorted times in `extra`.
    pub fn pieces_with_breaks(&self, horizon: f64, extra: &[f64]) -> Vec<Piece> {
        let mut breaks: Vec<(f64, Break)> = Vec::with_capacity(
            self.covariates.len() + 2 * self.dispensations.refill_times().len() + extra.len(),
        );
        // Covariate changes sort ahead of treatment switches at the same time.
        breaks.extend(
            self.covariates
                .change_times()
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, Break::Covariate(i))),
        );
        breaks.extend(
            self.dispensations
                .switches()
                .into_iter()
                .map(|(t, on)| (t, Break::Treatment(on))),
        );
        breaks.extend(extra.iter().map(|&t| (t, Break::Marker)));
        breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));

        let mut out = Vec::with_capacity(breaks.len());
        let mut start = 0.0;
        let mut treated = false;
        let mut covariate_index = 0;
        for (t, b) in breaks {
            if t >= horizon {
                break;
            }
            if t > start {
                out.push(Piece {
                    start,
                    end: t,
                    treated,
                    covariate_index,
                });
                start = t;
            }
            match b {
                Break::Covariate(i) => covariate_index = i,
                Break::Treatment(on) => treated = on,
                Break::Marker => {}
            }
        }
        if horizon > start {
            out.push(Piece {
                start,
                end: horizon,
                treated,
                covariate_index,
            });
        }
        out
    }
}

/// A refill-risk period on the gap clock.
///
/// For `k <= K` this is the completed gap `[V_{k-1} + w - epsilon, V_k]`. The
/// terminal period after the last coverage window, `k = K + 1`, ends at
/// follow-up without a refill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapWindow {
    pub k: usize,
    /// Calendar time of gap clock zero.
    pub start: f64,
    pub length: f64,
    pub completed: bool,
}

impl GapWindow {
    pub fn end(&self) -> f64 {
        self.start + self.length
    }
}

/// A gap-clock interval `[start, end)` with constant history and baseline piece.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapSegment {
    pub start: f64,
    pub end: f64,
    pub calendar_start: f64,
    pub covariate_index: usize,
    pub treated: bool,
    /// Index of the baseline-hazard piece containing the segment.
    pub piece: usize,
}

impl GapSegment {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

impl SubjectTrajectory {
    /// Completed gaps `k = 1..=K` followed by the terminal period, when non-empty.
    pub fn gap_windows(&self) -> Vec<GapWindow> {
        let d = self.dispensations();
        let gaps = d.gap_times();
        let mut out: Vec<GapWindow> = gaps
            .gaps()
            .iter()
            .enumerate()
            .map(|(i, &length)| GapWindow {
                k: i + 1,
                start: d.gap_start(i + 1),
                length,
                completed: true,
            })
            .collect();
        let start = d.last_refill() + d.coverage_window() - d.epsilon();
        if self.followup_time() > start {
            out.push(GapWindow {
                k: d.refill_count() + 1,
                start,
                length: self.followup_time() - start,
                completed: false,
            });
        }
        out
    }

    /// Splits a gap window at the coverage end, covariate changes and the
    /// baseline cut points `cuts` (gap clock, strictly increasing, positive).
    pub fn gap_segments(&self, window: &GapWindow, cuts: &[f64]) -> Vec<GapSegment> {
        let eps = self.dispensations().epsilon();
        let cov = self.covariates();
        let mut covariate_index = cov
            .index_at(window.start)
            .expect("gap windows start at non-negative times");
        let end = window.length;
        // (gap clock, calendar time, kind): 0 coverage end, 1 covariate, 2 cut.
        let mut breaks: Vec<(f64, f64, u8, usize)> = Vec::new();
        if eps < end {
            breaks.push((eps, window.start + eps, 0, 0));
        }
        for (i, &t) in cov.change_times().iter().enumerate().skip(covariate_index + 1) {
            let u = t - window.start;
            if u >= end {
                break;
            }
            if u > 0.0 {
                breaks.push((u, t, 1, i));
            }
        }
        for &c in cuts {
            if c > 0.0 && c < end {
                breaks.push((c, window.start + c, 2, 0));
            }
        }
        breaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.2.cmp(&b.2)));

        let mut out = Vec::with_capacity(breaks.len() + 1);
        let mut start = 0.0;
        let mut calendar_start = window.start;
        let mut treated = true;
        let mut piece = cuts.partition_point(|&c| c <= 0.0);
        for (u, t, kind, i) in breaks {
            if u > start {
                out.push(GapSegment {
                    start,
                    end: u,
                    calendar_start,
                    covariate_index,
                    treated,
                    piece,
                });
                start = u;
                calendar_start = t;
            }
            match kind {
                0 => treated = false,
                1 => covariate_index = i,
                _ => piece += 1,
            }
        }
        if end > start {
            out.push(GapSegment {
                start,
                end,
                calendar_start,
                covariate_index,
                treated,
                piece,
            });
        }
        out
    }
}

/// Read access to a subject's history up to a cutoff time.
///
/// Lookups beyond the cutoff are refused, which is how feature maps and
/// integrands are kept predictable.
#[derive(Debug, Clone, Copy)]
pub struct HistoryView<'a> {
    subject: &'a SubjectTrajectory,
    cutoff: f64,
}

impl<'a> HistoryView<'a> {
    pub fn new(subject: &'a SubjectTrajectory, cutoff: f64) -> Self {
        Self { subject, cutoff }
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn subject(&self) -> &'a SubjectTrajectory {
        self.subject
    }

    pub fn baseline(&self) -> &'a [f64] {
        self.subject.baseline()
    }

    /// Covariates in force at `t <= cutoff`.
    pub fn covariates_at(&self, t: f64) -> Result<&'a [f64], DataError> {
        if t > self.cutoff {
            return Err(DataError::LookAhead {
                requested: t,
                cutoff: self.cutoff,
            });
        }
        self.subject.covariates().covariate_at(t)
    }

    /// Covariates in force at the cutoff.
    pub fn covariates(&self) -> &'a [f64] {
        self.subject
            .covariates()
            .covariate_at(self.cutoff)
            .expect("cutoff is non-negative")
    }

    /// Covariate vector by change-point index.
    ///
    /// # Panics
    ///
    /// If that change point lies after the cutoff.
    pub fn covariates_by_index(&self, index: usize) -> &'a [f64] {
        let cov = self.subject.covariates();
        let t = cov.change_times()[index];
        assert!(
            t <= self.cutoff,
            "history leak: change at {t} read at cutoff {}",
            self.cutoff
        );
        cov.value(index)
    }

    /// `A_{t-}` at the cutoff.
    pub fn treated_before(&self) -> bool {
        let d = self.subject.dispensations();
        let v = d.refill_times();
        let idx = v.partition_point(|&x| x < self.cutoff);
        idx > 0 && self.cutoff <= v[idx - 1] + d.coverage_window()
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;

    fn subject() -> SubjectTrajectory {
        let cov = CovariateProcess::new(
            vec![0.0, 12.0, 35.0],
            vec![vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        let d = normalize_dispensations(&[0.0, 40.0], 30.0).unwrap();
        SubjectTrajectory::new("a", 100.0, true, vec![0.5], cov, d).unwrap()
    }

    #[test]
    fn pieces_cover_the_horizon() {
        let s = subject();
        let pieces = s.path().pieces(100.0);
        let bounds: Vec<(f64, f64, bool, usize)> = pieces
            .iter()
            .map(|p| (p.start, p.end, p.treated, p.covariate_index))
            .collect();
        assert_eq!(
            bounds,
            vec![
                (0.0, 12.0, true, 0),
                (12.0, 30.0, true, 1),
                (30.0, 35.0, false, 1),
                (35.0, 40.0, false, 2),
                (40.0, 70.0, true, 2),
                (70.0, 100.0, false, 2)
            ]
        );
        let open = s.path().pieces(f64::INFINITY);
        assert_eq!(open.last().unwrap().end, f64::INFINITY);
    }

    #[test]
    fn gap_windows_include_terminal_period() {
        let s = subject();
        let w = s.gap_windows();
        assert_eq!(w.len(), 2);
        assert!(w[0].completed && !w[1].completed);
        assert!((w[0].length - (10.0 + 1e-6)).abs() < 1e-12);
        assert_eq!(w[1].k, 2);
        assert!((w[1].end() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn gap_segments_split_at_coverage_end_changes_and_cuts() {
        let s = subject();
        let w = s.gap_windows()[0];
        let segs = s.gap_segments(&w, &[2.0, 8.0]);
        let starts: Vec<f64> = segs.iter().map(|g| g.start).collect();
        assert_eq!(starts.len(), 5);
        assert!(segs[0].treated && !segs[1].treated);
        assert_eq!(segs[0].covariate_index, 1);
        assert_eq!(segs[3].covariate_index, 2);
        assert_eq!(segs[3].calendar_start, 35.0);
        assert_eq!(segs.iter().map(|g| g.piece).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2]);
        let total: f64 = segs.iter().map(|g| g.length()).sum();
        assert!((total - w.length).abs() < 1e-12);
    }

    #[test]
    fn history_view_refuses_future_lookups() {
        let s = subject();
        let view = HistoryView::new(&s, 20.0);
        assert_eq!(view.covariates(), &[2.0]);
        assert!(view.covariates_at(30.0).is_err());
        assert!(view.treated_before());
        assert!(!HistoryView::new(&s, 31.0).treated_before());
        assert!(HistoryView::new(&s, 30.0).treated_before());
    }

    #[test]
    #[should_panic(expected = "history leak")]
    fn history_view_panics_on_indexed_leak() {
        let s = subject();
        HistoryView::new(&s, 20.0).covariates_by_index(2);
    }
}
