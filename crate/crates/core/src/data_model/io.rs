//! CSV ingestion and emission for the three per-cohort tables.
//!
//! * covariates: `subject_id,time,<covariate columns...>`, one row per change point,
//!   a row at time 0 mandatory;
//! * dispensations: `subject_id,refill_time`, the baseline row at 0 mandatory;
//! * outcomes: `subject_id,followup_time,event_indicator,<baseline columns...>`.
//!
//! Subjects are ordered as in the outcome table. Raw refill times are
//! normalized with the overlap rule on the way in.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{
    normalize_dispensations_with, Cohort, CovariateProcess, DataError, Schema, SubjectTrajectory,
};

/// A validation failure tied to a line of an input table.
#[derive(Debug, Clone, PartialEq)]
pub struct RowProblem {
    pub file: String,
    /// One-based line number, the header being line 1.
    pub line: u64,
    pub subject: Option<String>,
    pub message: String,
}

impl fmt::Display for RowProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} line {}", self.file, self.line)?;
        if let Some(s) = &self.subject {
            write!(f, " (subject {s})")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Locations of the three tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortFiles {
    pub covariates: PathBuf,
    pub dispensations: PathBuf,
    pub outcomes: PathBuf,
}

impl CohortFiles {
    /// `covariates.csv`, `dispensations.csv` and `outcomes.csv` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            covariates: dir.join("covariates.csv"),
            dispensations: dir.join("dispensations.csv"),
            outcomes: dir.join("outcomes.csv"),
        }
    }
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

pub fn read_cohort(
    files: &CohortFiles,
    coverage_window: f64,
    epsilon: f64,
) -> Result<Cohort, DataError> {
    read_cohort_from_readers(
        open(&files.covariates)?,
        open(&files.dispensations)?,
        open(&files.outcomes)?,
        coverage_window,
        epsilon,
    )
}

struct Problems(Vec<RowProblem>);

impl Problems {
    fn push(&mut self, file: &str, line: u64, subject: Option<&str>, message: impl Into<String>) {
        self.0.push(RowProblem {
            file: file.to_string(),
            line,
            subject: subject.map(str::to_string),
            message: message.into(),
        });
    }
}

struct Table {
    headers: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table<R: Read>(
    reader: R,
    file: &str,
    required: &[&str],
    problems: &mut Problems,
) -> Option<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) => {
            problems.push(file, 1, None, format!("unreadable header: {e}"));
            return None;
        }
    };
    if headers.len() < required.len() || headers.iter().zip(required).any(|(h, r)| h != r) {
        problems.push(
            file,
            1,
            None,
            format!("header must start with {}", required.join(",")),
        );
        return None;
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        match rec {
            Ok(r) => {
                let line = r.position().map_or(0, |p| p.line());
                if r.len() != headers.len() {
                    problems.push(
                        file,
                        line,
                        r.get(0),
                        format!("expected {} fields, found {}", headers.len(), r.len()),
                    );
                    continue;
                }
                rows.push((line, r.iter().map(str::to_string).collect()));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(file, line, None, format!("malformed record: {e}"));
            }
        }
    }
    Some(Table { headers, rows })
}

fn parse_num(field: &str) -> Option<f64> {
    field.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Parses the three tables from arbitrary readers.
pub fn read_cohort_from_readers<C: Read, D: Read, O: Read>(
    covariates: C,
    dispensations: D,
    outcomes: O,
    coverage_window: f64,
    epsilon: f64,
) -> Result<Cohort, DataError> {
    let mut problems = Problems(Vec::new());
    let out_t = read_table(
        outcomes,
        "outcomes",
        &["subject_id", "followup_time", "event_indicator"],
        &mut problems,
    );
    let cov_t = read_table(covariates, "covariates", &["subject_id", "time"], &mut problems);
    let disp_t = read_table(
        dispensations,
        "dispensations",
        &["subject_id", "refill_time"],
        &mut problems,
    );
    let (Some(out_t), Some(cov_t), Some(disp_t)) = (out_t, cov_t, disp_t) else {
        return Err(DataError::Validation(problems.0));
    };

    let schema = Schema::new(cov_t.headers[2..].to_vec(), out_t.headers[3..].to_vec());

    struct Outcome {
        line: u64,
        id: String,
        followup: f64,
        event: bool,
        baseline: Vec<f64>,
    }
    let mut order: Vec<Outcome> = Vec::with_capacity(out_t.rows.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, row) in &out_t.rows {
        let id = &row[0];
        if index.contains_key(id) {
            problems.push("outcomes", *line, Some(id), "duplicate subject");
            continue;
        }
        let followup = parse_num(&row[1]);
        let event = match row[2].as_str() {
            "0" => Some(false),
            "1" => Some(true),
            _ => None,
        };
        let baseline: Option<Vec<f64>> = row[3..].iter().map(|f| parse_num(f)).collect();
        match (followup, event, baseline) {
            (Some(followup), Some(event), Some(baseline)) if followup > 0.0 => {
                index.insert(id.clone(), order.len());
                order.push(Outcome {
                    line: *line,
                    id: id.clone(),
                    followup,
                    event,
                    baseline,
                });
            }
            (_, None, _) => problems.push("outcomes", *line, Some(id), "event_indicator must be 0 or 1"),
            _ => problems.push(
                "outcomes",
                *line,
                Some(id),
                "followup_time must be a positive number and baseline covariates finite",
            ),
        }
    }

    let n = order.len();
    let mut cov_rows: Vec<Vec<(u64, f64, Vec<f64>)>> = vec![Vec::new(); n];
    for (line, row) in &cov_t.rows {
        let Some(&i) = index.get(&row[0]) else {
            problems.push("covariates", *line, Some(&row[0]), "subject absent from outcomes");
            continue;
        };
        let time = parse_num(&row[1]);
        let values: Option<Vec<f64>> = row[2..].iter().map(|f| parse_num(f)).collect();
        match (time, values) {
            (Some(t), Some(v)) if t >= 0.0 => cov_rows[i].push((*line, t, v)),
            _ => problems.push("covariates", *line, Some(&row[0]), "non-numeric or negative field"),
        }
    }
    let mut disp_rows: Vec<Vec<(u64, f64)>> = vec![Vec::new(); n];
    for (line, row) in &disp_t.rows {
        let Some(&i) = index.get(&row[0]) else {
            problems.push("dispensations", *line, Some(&row[0]), "subject absent from outcomes");
            continue;
        };
        match parse_num(&row[1]) {
            Some(t) if t >= 0.0 => disp_rows[i].push((*line, t)),
            _ => problems.push(
                "dispensations",
                *line,
                Some(&row[0]),
                "refill_time must be a non-negative number",
            ),
        }
    }

    let mut subjects = Vec::with_capacity(n);
    for (i, o) in order.iter().enumerate() {
        let id = Some(o.id.as_str());
        let rows = &cov_rows[i];
        if rows.is_empty() {
            problems.push("covariates", o.line, id, "no covariate rows");
            continue;
        }
        let times: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let values: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
        let covariates = match CovariateProcess::new(times, values) {
            Ok(c) => c,
            Err(e) => {
                let line = match e {
                    DataError::InvalidChangeTimes { index } => rows[index].0,
                    _ => rows[0].0,
                };
                problems.push("covariates", line, id, e.to_string());
                continue;
            }
        };
        let drows = &disp_rows[i];
        let refills: Vec<f64> = drows.iter().map(|r| r.1).collect();
        let dispensations = match normalize_dispensations_with(&refills, coverage_window, epsilon) {
            Ok(d) => d,
            Err(e) => {
                let line = match e {
                    DataError::NonIncreasingRefills { index } => drows[index].0,
                    _ => drows.first().map_or(o.line, |r| r.0),
                };
                problems.push("dispensations", line, id, e.to_string());
                continue;
            }
        };
        match SubjectTrajectory::new(
            o.id.clone(),
            o.followup,
            o.event,
            o.baseline.clone(),
            covariates,
            dispensations,
        ) {
            Ok(s) => subjects.push(s),
            Err(DataError::InvalidSubject { reason, .. }) => {
                problems.push("outcomes", o.line, id, reason.to_string())
            }
            Err(e) => problems.push("outcomes", o.line, id, e.to_string()),
        }
    }

    if !problems.0.is_empty() {
        return Err(DataError::Validation(problems.0));
    }
    Cohort::new(schema, subjects)
}

fn csv_err(e: impl fmt::Display) -> DataError {
    DataError::Io(e.to_string())
}

pub fn write_covariates<W: Write>(cohort: &Cohort, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend(cohort.schema().covariates.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for s in cohort.subjects() {
        let c = s.covariates();
        for (i, t) in c.change_times().iter().enumerate() {
            let mut rec = vec![s.id().to_string(), t.to_string()];
            rec.extend(c.value(i).iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}

pub fn write_dispensations<W: Write>(cohort: &Cohort, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "refill_time"]).map_err(csv_err)?;
    for s in cohort.subjects() {
        for v in s.dispensations().refill_times() {
            w.write_record([s.id(), &v.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}

pub fn write_outcomes<W: Write>(cohort: &Cohort, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "subject_id".to_string(),
        "followup_time".to_string(),
        "event_indicator".to_string(),
    ];
    header.extend(cohort.schema().baseline.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for s in cohort.subjects() {
        let mut rec = vec![
            s.id().to_string(),
            s.followup_time().to_string(),
            if s.event() { "1" } else { "0" }.to_string(),
        ];
        rec.extend(s.baseline().iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_cohort(cohort: &Cohort, files: &CohortFiles) -> Result<(), DataError> {
    let create = |p: &Path| File::create(p).map_err(|e| DataError::Io(format!("{}: {e}", p.display())));
    write_covariates(cohort, create(&files.covariates)?)?;
    write_dispensations(cohort, create(&files.dispensations)?)?;
    write_outcomes(cohort, create(&files.outcomes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const COV: &str = "subject_id,time,l1\na,0,1.5\na,10,2\nb,0,0\n";
    const DISP: &str = "subject_id,refill_time\na,0\na,20\na,60\nb,0\nb,45\n";
    const OUT: &str = "subject_id,followup_time,event_indicator,x0_1\na,100,1,0\nb,80.5,0,1\n";

    fn read(cov: &str, disp: &str, out: &str) -> Result<Cohort, DataError> {
        read_cohort_from_readers(cov.as_bytes(), disp.as_bytes(), out.as_bytes(), 30.0, 1e-6)
    }

    #[test]
    fn reads_and_normalizes() {
        let c = read(COV, DISP, OUT).unwrap();
        assert_eq!(c.schema().covariates, vec!["l1"]);
        assert_eq!(c.schema().baseline, vec!["x0_1"]);
        let a = &c.subjects()[0];
        assert_eq!(a.dispensations().refill_times(), &[0.0, 30.0, 60.0]);
        assert_eq!(a.covariates().covariate_at(10.0).unwrap(), &[2.0]);
        assert!(!c.subjects()[1].event());
    }

    #[test]
    fn round_trips_through_csv() {
        let c = read(COV, DISP, OUT).unwrap();
        let (mut cv, mut dv, mut ov) = (Vec::new(), Vec::new(), Vec::new());
        write_covariates(&c, &mut cv).unwrap();
        write_dispensations(&c, &mut dv).unwrap();
        write_outcomes(&c, &mut ov).unwrap();
        let back = read_cohort_from_readers(&cv[..], &dv[..], &ov[..], 30.0, 1e-6).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn reports_offending_lines() {
        let disp = "subject_id,refill_time\na,0\na,20\na,60\nb,0\n";
        let cov = "subject_id,time,l1\na,0,1.5\na,10,x\nb,0,0\n";
        let Err(DataError::Validation(problems)) = read(cov, disp, OUT) else {
            panic!("expected validation failure");
        };
        assert!(problems.iter().any(|p| p.file == "covariates" && p.line == 3));
        assert!(problems
            .iter()
            .any(|p| p.file == "dispensations" && p.subject.as_deref() == Some("b")));
    }

    #[test]
    fn rejects_followup_before_last_refill() {
        let out = "subject_id,followup_time,event_indicator,x0_1\na,50,1,0\nb,80.5,0,1\n";
        let Err(DataError::Validation(problems)) = read(COV, DISP, out) else {
            panic!("expected validation failure");
        };
        assert_eq!(problems.len(), 1);
        assert_eq!(problems[0].line, 2);
    }

    #[test]
    fn requires_headers() {
        let err = read("id,time\n", DISP, OUT).unwrap_err();
        assert!(err.to_string().contains("subject_id,time"));
    }
}
