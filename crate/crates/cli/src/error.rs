//! Stable error codes and exit statuses.

use tvfair::arith::ArithError;
use tvfair::ckpt::CkptError;
use tvfair::lab::LabError;
use tvfair::metrics::MetricsError;
use tvfair::sweep::SweepError;

/// Exit status for bad flags, values or configuration.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for failures while doing the work.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub exit: i32,
}

impl CliError {
    pub fn usage(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
            exit: EXIT_VALIDATION,
        }
    }

    pub fn runtime(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
            exit: EXIT_RUNTIME,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::runtime("E_IO", format!("i/o failure on {}: {e}", path.display()))
    }

    /// `error[E_CODE]: message` on one line.
    pub fn render(&self) -> String {
        let msg: String = self
            .message
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error[{}]: {}", self.code, msg)
    }
}

fn ckpt_code(e: &CkptError) -> &'static str {
    match e {
        CkptError::Io { .. } => "E_IO",
        CkptError::MalformedHeader(_) => "E_CKPT_HEADER",
        CkptError::OverlappingOffsets { .. } => "E_CKPT_OFFSETS",
        CkptError::TruncatedData { .. } => "E_CKPT_TRUNCATED",
        CkptError::UnsupportedDtype { .. } => "E_CKPT_DTYPE",
        CkptError::InvalidTensor(_) | CkptError::InvalidName(_) | CkptError::DuplicateName(_) => {
            "E_CKPT_INVALID"
        }
    }
}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        CliError::runtime(ckpt_code(&e), e.to_string())
    }
}

impl From<ArithError> for CliError {
    fn from(e: ArithError) -> Self {
        let code = match &e {
            ArithError::NameSetMismatch { .. } => "E_NAME_MISMATCH",
            ArithError::ShapeMismatch { .. } => "E_SHAPE_MISMATCH",
            ArithError::NonFiniteCoefficient(_) => return CliError::usage("E_COEFFICIENT", e.to_string()),
            ArithError::ZeroVector => "E_ZERO_VECTOR",
            ArithError::NotATaskVector(_) => "E_NOT_TASK_VECTOR",
            ArithError::Ckpt(c) => ckpt_code(c),
        };
        CliError::runtime(code, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = match &e {
            MetricsError::EmptyRecords => "E_EMPTY",
            MetricsError::MissingAttribute { .. } => "E_MISSING_ATTRIBUTE",
            MetricsError::InvalidRecord { .. } => "E_INVALID_RECORD",
            MetricsError::EmptyGroup(..) => "E_EMPTY_GROUP",
            MetricsError::InsufficientGroups { .. } => "E_INSUFFICIENT_GROUPS",
            MetricsError::Parse { .. } => "E_PARSE",
            MetricsError::DuplicateId(..) => "E_DUPLICATE_ID",
            MetricsError::Io { .. } => "E_IO",
        };
        CliError::runtime(code, e.to_string())
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        let msg = e.to_string();
        match e {
            LabError::InvalidSpec(_) => CliError::usage("E_INVALID_SPEC", msg),
            LabError::InvalidHyper(_) => CliError::usage("E_INVALID_HYPER", msg),
            LabError::EmptyDataset => CliError::runtime("E_EMPTY_DATASET", msg),
            LabError::EmptyGroup(_) => CliError::runtime("E_EMPTY_GROUP", msg),
            LabError::DivergedTraining { .. } => CliError::runtime("E_DIVERGED", msg),
            LabError::IncompatibleCheckpoint(_) => CliError::runtime("E_INCOMPATIBLE", msg),
            LabError::Parse { .. } => CliError::runtime("E_PARSE", msg),
            LabError::Io { .. } => CliError::runtime("E_IO", msg),
            LabError::Ckpt(c) => c.into(),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        let msg = e.to_string();
        match e {
            SweepError::InvalidConfig(_) => CliError::usage("E_CONFIG", msg),
            SweepError::InsufficientGroups { .. } => CliError::runtime("E_INSUFFICIENT_GROUPS", msg),
            SweepError::EmptyResult => CliError::runtime("E_EMPTY", msg),
            SweepError::Point { source, .. } => {
                // keep the point context, take the code of the cause
                let inner: CliError = (*source).into();
                CliError { message: msg, ..inner }
            }
            SweepError::Arith(e) => e.into(),
            SweepError::Metrics(e) => e.into(),
            SweepError::Lab(e) => e.into(),
            SweepError::Ckpt(e) => e.into(),
            SweepError::Io { .. } => CliError::runtime("E_IO", msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_one_line() {
        let e = CliError::runtime("E_X", "a\nb");
        assert_eq!(e.render(), "error[E_X]: a b");
    }

    #[test]
    fn point_errors_keep_cause_code() {
        let e = SweepError::Point {
            variant: "merge".into(),
            lambda: 0.3,
            seed: 13,
            source: Box::new(SweepError::Arith(ArithError::ShapeMismatch {
                name: "W1".into(),
                left: vec![2],
                right: vec![3],
            })),
        };
        let c: CliError = e.into();
        assert_eq!(c.code, "E_SHAPE_MISMATCH");
        assert!(c.message.contains("λ=0.3") && c.message.contains("W1"));
        assert_eq!(c.exit, EXIT_RUNTIME);
    }

    #[test]
    fn config_errors_are_validation() {
        let c: CliError = SweepError::InvalidConfig("x".into()).into();
        assert_eq!(c.exit, EXIT_VALIDATION);
    }
}
