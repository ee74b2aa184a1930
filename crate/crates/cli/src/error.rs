use std::path::{Path, PathBuf};

use flowrig::diffusion::DiffusionError;
use flowrig::flowio::FlowIoError;
use flowrig::manip_planner::PlanError;
use flowrig::rigid_solver::SolverError;
use flowrig::simulator::SimError;
use flowrig::tracking::TrackingError;
use thiserror::Error;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const FORMAT: i32 = 4;
    pub const DIMENSION: i32 = 5;
    pub const TRACKING: i32 = 6;
    pub const SOLVER: i32 = 7;
    pub const REPLAN: i32 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Dimension(String),
    #[error("{0}")]
    Tracking(String),
    #[error("{0}")]
    Solver(String),
    #[error("only {:.1}% of tracks remain at frame {frame}; replanning required", ratio * 100.0)]
    ReplanNeeded { frame: usize, ratio: f64 },
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Format { .. } => exit::FORMAT,
            CliError::Dimension(_) => exit::DIMENSION,
            CliError::Tracking(_) => exit::TRACKING,
            CliError::Solver(_) => exit::SOLVER,
            CliError::ReplanNeeded { .. } => exit::REPLAN,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl ToString) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.to_string() }
    }

    /// Classifies an error raised while reading `path`.
    pub fn from_flowio(path: &Path, e: FlowIoError) -> Self {
        match e {
            FlowIoError::Io { source, .. } => CliError::io(path, source),
            FlowIoError::DimensionMismatch { .. } => CliError::Dimension(format!("{}: {e}", path.display())),
            other => CliError::format(path, other),
        }
    }
}

impl From<FlowIoError> for CliError {
    fn from(e: FlowIoError) -> Self {
        match e {
            FlowIoError::Io { path, source } => CliError::Io { path, source },
            FlowIoError::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            FlowIoError::OutOfBounds { .. } => CliError::Tracking(e.to_string()),
            other => CliError::Format { path: PathBuf::new(), msg: other.to_string() },
        }
    }
}

impl From<TrackingError> for CliError {
    fn from(e: TrackingError) -> Self {
        match e {
            TrackingError::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            other => CliError::Tracking(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::ReplanNeeded { frame, ratio } => CliError::ReplanNeeded { frame, ratio },
            SolverError::EmptyMask | SolverError::NoValidDepth => CliError::Tracking(e.to_string()),
            SolverError::Tracking(t) => t.into(),
            SolverError::FlowIo(f) => f.into(),
            other => CliError::Solver(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::EmptyMask | PlanError::NoValidDepth => CliError::Tracking(e.to_string()),
            PlanError::Solver(s) => s.into(),
            PlanError::FlowIo(f) => f.into(),
            other => CliError::Solver(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Usage(format!("simulation: {e}"))
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        CliError::Usage(format!("diffusion: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let all = [
            CliError::Usage(String::new()),
            CliError::io(Path::new("x"), std::io::Error::other("x")),
            CliError::format(Path::new("x"), "x"),
            CliError::Dimension(String::new()),
            CliError::Tracking(String::new()),
            CliError::Solver(String::new()),
            CliError::ReplanNeeded { frame: 1, ratio: 0.0 },
        ];
        let mut codes: Vec<i32> = all.iter().map(CliError::code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&exit::OK));
    }

    #[test]
    fn solver_errors_are_classified() {
        assert_eq!(CliError::from(SolverError::ReplanNeeded { frame: 2, ratio: 0.05 }).code(), exit::REPLAN);
        assert_eq!(CliError::from(SolverError::EmptyMask).code(), exit::TRACKING);
        assert_eq!(CliError::from(SolverError::DegenerateGeometry).code(), exit::SOLVER);
        assert_eq!(CliError::from(PlanError::Solver(SolverError::NoValidDepth)).code(), exit::TRACKING);
        assert_eq!(CliError::from(FlowIoError::BadMagic(1.0)).code(), exit::FORMAT);
    }
}
