//! Exit codes and single-line error reports.
//!
//! Every failure prints one line to stderr:
//! `subitize: error[<kind>]: <message>`.

use std::process::ExitCode;

use subitize::config::ConfigError;
use subitize::data::DataError;
use subitize::detect::DetectError;
use subitize::nnet::NnetError;
use subitize::retrieval::RetrievalError;

use crate::commands::BadArgument;

/// Runtime failure not covered by a more specific kind.
pub const RUNTIME: u8 = 1;
/// Unknown flag, missing argument or bad flag value.
pub const USAGE: u8 = 2;
/// Missing or unreadable file.
pub const IO: u8 = 3;
/// Input file or configuration violates its schema.
pub const SCHEMA: u8 = 4;
/// A check ran and failed (gradcheck).
pub const CHECK_FAILED: u8 = 5;

/// Marker for errors raised when an input path does not exist.
#[derive(Debug, thiserror::Error)]
#[error("missing file {0}")]
pub struct MissingFile(pub String);

/// Marker for check failures that should exit with [`CHECK_FAILED`].
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn usage(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = e.print();
        return ExitCode::SUCCESS;
    }
    let msg = e.to_string();
    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
    eprintln!("subitize: error[usage]: {}", one_line(first));
    ExitCode::from(USAGE)
}

fn is_schema(e: &(dyn std::error::Error + 'static)) -> bool {
    if e.is::<ConfigError>() {
        return !matches!(e.downcast_ref::<ConfigError>(), Some(ConfigError::Io { .. }));
    }
    if let Some(d) = e.downcast_ref::<DataError>() {
        return !matches!(d, DataError::Io { .. });
    }
    if let Some(d) = e.downcast_ref::<DetectError>() {
        return matches!(d, DetectError::Parse { .. } | DetectError::NonFiniteScore(_));
    }
    if let Some(r) = e.downcast_ref::<RetrievalError>() {
        return matches!(r, RetrievalError::Parse { .. } | RetrievalError::Format { .. });
    }
    matches!(e.downcast_ref::<NnetError>(), Some(NnetError::Checkpoint { .. }))
}

pub fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return ("check", CHECK_FAILED);
    }
    if err.chain().any(|c| c.is::<BadArgument>()) {
        return ("usage", USAGE);
    }
    for cause in err.chain() {
        if cause.is::<MissingFile>() || cause.is::<std::io::Error>() {
            return ("io", IO);
        }
    }
    if err.chain().any(is_schema) {
        return ("schema", SCHEMA);
    }
    ("runtime", RUNTIME)
}

pub fn report(err: &anyhow::Error) -> ExitCode {
    let (kind, code) = classify(err);
    eprintln!("subitize: error[{kind}]: {}", one_line(&format!("{err:#}")));
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn kinds_map_to_distinct_codes() {
        let io: anyhow::Error = std::io::Error::new(std::io::ErrorKind::NotFound, "x").into();
        assert_eq!(classify(&io.context("reading")), ("io", IO));
        let missing = anyhow::Error::new(MissingFile("a.csv".into()));
        assert_eq!(classify(&missing), ("io", IO));
        let cfg = subitize::config::PipelineConfig::parse("bogus = 1", "c").unwrap_err();
        assert_eq!(classify(&anyhow::Error::new(cfg)), ("schema", SCHEMA));
        let r: anyhow::Result<()> = Err(DataError::InvalidLabel("x".into())).context("loading manifest");
        assert_eq!(classify(&r.unwrap_err()), ("schema", SCHEMA));
        assert_eq!(classify(&anyhow::anyhow!("boom")), ("runtime", RUNTIME));
        assert_eq!(classify(&anyhow::Error::new(CheckFailed("x".into()))), ("check", CHECK_FAILED));
        assert_eq!(classify(&anyhow::Error::new(BadArgument("x".into()))), ("usage", USAGE));
        let codes = [RUNTIME, USAGE, IO, SCHEMA, CHECK_FAILED];
        let set: std::collections::BTreeSet<u8> = codes.into_iter().collect();
        assert_eq!(set.len(), codes.len());
    }

    #[test]
    fn messages_collapse_to_one_line() {
        assert_eq!(one_line("a\n  b\tc "), "a b c");
    }
}
