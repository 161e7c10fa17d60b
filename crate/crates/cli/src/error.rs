//! Exit-code classification.

use std::fmt;
use std::io;

use wxpipe_core::calibration::CalibrationError;
use wxpipe_core::metrics::MetricsError;
use wxpipe_core::model::{BatchError, CsvError, InvalidStationId, UnknownSensor};
use wxpipe_core::processing::ProcessingError;
use wxpipe_core::sim::SimError;
use wxpipe_core::store::StoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Bad flags or flag combinations that clap cannot catch on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Input data that is missing, malformed or unusable.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn data(msg: impl Into<String>) -> anyhow::Error {
    DataError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<InvalidStationId>() || cause.is::<UnknownSensor>() {
            return EXIT_USAGE;
        }
        if cause.is::<SimError>() {
            return match cause.downcast_ref::<SimError>() {
                Some(SimError::UnknownScenario(_) | SimError::NoMinutes) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<DataError>()
            || cause.is::<CsvError>()
            || cause.is::<BatchError>()
            || cause.is::<ProcessingError>()
            || cause.is::<CalibrationError>()
            || cause.is::<MetricsError>()
            || cause.is::<StoreError>()
        {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<io::Error>() {
            if matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::InvalidData) {
                return EXIT_DATA;
            }
        }
    }
    EXIT_INTERNAL
}
