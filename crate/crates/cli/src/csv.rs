//! Trace CSV rendering and parsing.
//!
//! Floats are printed with 17 significant digits so every 64-bit value
//! round-trips exactly; parsing the rendered text recovers the records bit
//! for bit.

use qgrad_core::engine::{Trace, TraceRecord};

use crate::CliError;

pub const HEADER: &str =
    "k,f_gap,dist_sq,lyapunov,H,D,grad_norm_sq,bits_up_cum,bits_down_cum,wall_ms";

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn render_record(r: &TraceRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.k,
        fmt_float(r.f_gap),
        fmt_float(r.dist_sq),
        fmt_float(r.lyapunov),
        fmt_float(r.h),
        fmt_float(r.d),
        fmt_float(r.grad_norm_sq),
        r.bits_up_cum,
        r.bits_down_cum,
        fmt_float(r.wall_ms),
    )
}

pub fn render(trace: &Trace) -> String {
    let mut out = String::with_capacity(64 * (trace.records.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in &trace.records {
        out.push_str(&render_record(r));
        out.push('\n');
    }
    out
}

fn parse_float(tok: &str, line: usize) -> Result<f64, CliError> {
    tok.parse()
        .map_err(|_| CliError::Config(format!("line {line}: `{tok}` is not a float")))
}

fn parse_int(tok: &str, line: usize) -> Result<u64, CliError> {
    tok.parse()
        .map_err(|_| CliError::Config(format!("line {line}: `{tok}` is not an integer")))
}

pub fn parse(text: &str) -> Result<Vec<TraceRecord>, CliError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == HEADER => {}
        Some((_, other)) => {
            return Err(CliError::Config(format!(
                "unexpected CSV header `{other}`"
            )))
        }
        None => return Err(CliError::Config("empty CSV".into())),
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(CliError::Config(format!(
                "line {lineno}: {} fields, expected 10",
                fields.len()
            )));
        }
        records.push(TraceRecord {
            k: parse_int(fields[0], lineno)?,
            f_gap: parse_float(fields[1], lineno)?,
            dist_sq: parse_float(fields[2], lineno)?,
            lyapunov: parse_float(fields[3], lineno)?,
            h: parse_float(fields[4], lineno)?,
            d: parse_float(fields[5], lineno)?,
            grad_norm_sq: parse_float(fields[6], lineno)?,
            bits_up_cum: parse_int(fields[7], lineno)?,
            bits_down_cum: parse_int(fields[8], lineno)?,
            wall_ms: parse_float(fields[9], lineno)?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(k: u64, v: f64) -> TraceRecord {
        TraceRecord {
            k,
            f_gap: v,
            dist_sq: v * 2.0,
            lyapunov: v * 3.0,
            h: v / 7.0,
            d: f64::NAN,
            grad_norm_sq: v * v,
            bits_up_cum: 91 * k,
            bits_down_cum: 1280 * k,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn floats_round_trip_exactly() {
        let values = [
            std::f64::consts::PI,
            1.0 / 3.0,
            6.626_070_15e-34,
            -0.1,
            1e300,
            5e-324,
        ];
        let mut text = String::from(HEADER);
        text.push('\n');
        for (i, v) in values.iter().enumerate() {
            text.push_str(&render_record(&record(i as u64, *v)));
            text.push('\n');
        }
        let parsed = parse(&text).unwrap();
        for (r, v) in parsed.iter().zip(&values) {
            assert_eq!(r.f_gap.to_bits(), v.to_bits());
            assert_eq!(r.dist_sq.to_bits(), (v * 2.0).to_bits());
            assert_eq!(r.grad_norm_sq.to_bits(), (v * v).to_bits());
            assert!(r.d.is_nan());
        }
    }

    #[test]
    fn header_mismatch_is_rejected() {
        assert!(parse("k,f_gap\n1,2\n").is_err());
        assert!(parse("").is_err());
    }
}
