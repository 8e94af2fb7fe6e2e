//! Plain-text metrics output.

use std::fmt::Write as _;

use crate::orchestrator::RoundMetrics;

pub const METRICS_HEADER: &str =
    "round,client_id,arch,ce,mse,kl,total_loss,test_acc,knowledge_bytes,weight_bytes";
pub const CVAE_HEADER: &str = "round,epoch,kl_to_prior,reconstruction,total";

/// Shortest-form rendering with 9 significant digits, like C's `%.9g`.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rows for one round: every client in id order, then the aggregate row.
pub fn metrics_rows(m: &RoundMetrics) -> String {
    let mut out = String::new();
    for c in &m.clients {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.round,
            c.client_id,
            c.arch.0,
            format_float(c.loss.ce),
            format_float(c.loss.mse),
            format_float(c.loss.kl),
            format_float(c.loss.total),
            format_float(c.test_accuracy),
            c.knowledge_bytes,
            c.weight_bytes
        );
    }
    let mean = m.mean_loss();
    let _ = writeln!(
        out,
        "{},-1,-1,{},{},{},{},{},{},{}",
        m.round,
        format_float(mean.ce),
        format_float(mean.mse),
        format_float(mean.kl),
        format_float(mean.total),
        format_float(m.mean_accuracy()),
        m.knowledge_bytes(),
        m.weight_bytes()
    );
    out
}

pub fn metrics_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rounds {
        out.push_str(&metrics_rows(m));
    }
    out
}

pub fn cvae_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = format!("{CVAE_HEADER}\n");
    for m in rounds {
        for (epoch, p) in m.cvae_trace.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{epoch},{},{},{}",
                m.round,
                format_float(p.kl_to_prior),
                format_float(p.reconstruction),
                format_float(p.total)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(2.0 / 3.0), "0.666666667");
        assert_eq!(format_float(123456789.0), "123456789");
        assert_eq!(format_float(1234567891.0), "1.23456789e+09");
        assert_eq!(format_float(0.0001234), "0.0001234");
        assert_eq!(format_float(1.5e-7), "1.5e-07");
        assert_eq!(format_float(-0.123456789012), "-0.123456789");
        assert_eq!(format_float(99999999.95), "100000000");
    }
}
