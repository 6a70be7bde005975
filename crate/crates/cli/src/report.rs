//! The JSON report written by `train`.
//!
//! Floating-point numbers are written with 17 significant digits in
//! scientific notation, which round-trips every `f64` exactly. The report
//! holds no file-system paths, so two runs of the same configuration differ
//! only in `wall_clock_seconds`.

use std::io;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use fedsilo::federation::{RoundLog, Strategy};
use fedsilo::metrics::EvalReport;
use fedsilo::Dtype;

use crate::experiment::{OodRecord, OodSummary};

pub const TOOL: &str = "fedsilo";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub rounds: Vec<RoundLog>,
    pub eval: EvalReport,
    pub out_of_domain: Vec<OodRecord>,
    /// File names under `models/seed_<seed>/`.
    pub models: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool: String,
    pub version: String,
    pub name: String,
    /// The resolved configuration in config-file syntax.
    pub config: String,
    pub strategy: Strategy,
    pub dtype: Dtype,
    /// Keys found in any encoded message of any seed.
    pub communicated_keys: Vec<String>,
    /// Keys that never leave a silo.
    pub local_keys: Vec<String>,
    pub seeds: Vec<SeedRecord>,
    pub summary: EvalReport,
    pub out_of_domain: Option<OodSummary>,
    pub wall_clock_seconds: f64,
}

/// Pretty printing with full-precision floats.
struct ExactFloats(PrettyFormatter<'static>);

impl Formatter for ExactFloats {
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes any value with the report's number format.
pub fn to_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, ExactFloats(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}
