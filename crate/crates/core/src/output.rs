//! Plot-ready CSV output of simulation samples.
//!
//! Columns: `t,irradiance,temperature,p_set,p_pv,p_load,p_batt,soc,mode,duty`.
//! Numbers carry six significant digits; `mode` is the literal mode name.

use std::io::{Read, Write};

use thiserror::Error;

use crate::controller::Mode;
use crate::sim::SimSample;

pub const CSV_HEADER: [&str; 10] =
    ["t", "irradiance", "temperature", "p_set", "p_pv", "p_load", "p_batt", "soc", "mode", "duty"];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

/// Formats `x` with six significant digits, `%g` style: trailing zeros are
/// trimmed and very large or small magnitudes switch to exponent notation.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x.is_infinite() {
            format!("{x}")
        } else {
            "0".into()
        };
    }
    // Round first so that e.g. 9.999996 is classified with exponent 1.
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let out = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    };
    if out == "-0" {
        "0".into()
    } else {
        out
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn write_csv<W: Write>(samples: &[SimSample], out: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in samples {
        w.write_record([
            format_sig6(s.t),
            format_sig6(s.irradiance),
            format_sig6(s.temperature),
            format_sig6(s.p_set),
            format_sig6(s.p_pv),
            format_sig6(s.p_load),
            format_sig6(s.p_batt),
            format_sig6(s.soc),
            s.mode.to_string(),
            format_sig6(s.duty),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(samples: &[SimSample]) -> String {
    let mut buf = Vec::new();
    write_csv(samples, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is ASCII")
}

/// Reads samples back from CSV. Quantities not in the file are derived from
/// the power balance: PV routed to load is `p_load` minus any discharge, and
/// whatever PV is neither routed nor charged counts as curtailed.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<SimSample>, CsvError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(CsvError::Header(header));
    }
    let mut samples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let num = |idx: usize| -> Result<f64, CsvError> {
            rec.get(idx)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| CsvError::Row { row, message: format!("column {}: {e}", CSV_HEADER[idx]) })
        };
        let mode: Mode = rec.get(8).unwrap_or("").parse().map_err(|message| CsvError::Row { row, message })?;
        let (p_pv, p_load, p_batt) = (num(4)?, num(5)?, num(6)?);
        let discharge = p_batt.max(0.0);
        let charge = (-p_batt).max(0.0);
        let p_pv_to_load = (p_load - discharge).max(0.0);
        samples.push(SimSample {
            t: num(0)?,
            irradiance: num(1)?,
            temperature: num(2)?,
            p_set: num(3)?,
            p_pv,
            p_pv_to_load,
            p_curtailed: (p_pv - p_pv_to_load - charge).max(0.0),
            p_load,
            p_batt,
            soc: num(7)?,
            mode,
            duty: num(9)?,
            battery_limit: None,
        });
    }
    Ok(samples)
}
