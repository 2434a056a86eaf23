//! Progress trace sinks and the console table formats.

/// Receives human-readable progress output.
pub trait TraceSink: Send {
    /// Emit a full line.
    fn line(&mut self, s: &str);
    /// Emit an inline fragment (no newline), e.g. bootstrap counters.
    fn fragment(&mut self, s: &str);
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullTrace;

impl TraceSink for NullTrace {
    fn line(&mut self, _: &str) {}
    fn fragment(&mut self, _: &str) {}
}

/// Prints to stdout.
#[derive(Debug, Default)]
pub struct StdoutTrace;

impl TraceSink for StdoutTrace {
    fn line(&mut self, s: &str) {
        println!("{s}");
    }
    fn fragment(&mut self, s: &str) {
        use std::io::Write;
        print!("{s}");
        let _ = std::io::stdout().flush();
    }
}

/// Collects lines for inspection in tests.
#[derive(Debug, Default)]
pub struct BufferTrace {
    pub lines: Vec<String>,
}

impl TraceSink for BufferTrace {
    fn line(&mut self, s: &str) {
        self.lines.push(s.to_string());
    }
    fn fragment(&mut self, s: &str) {
        self.lines.push(s.to_string());
    }
}

/// C-style `%.6g` formatting: 6 significant digits, trailing zeros stripped,
/// scientific notation outside [1e-4, 1e6).
pub fn fmt_g6(x: f64) -> String {
    fmt_g(x, 6)
}

/// C-style `%.<sig>g` formatting.
pub fn fmt_g(x: f64, sig: usize) -> String {
    let sig = sig.max(1);
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let e: i32 = exp.parse().expect("numeric exponent");
    if e < -4 || e >= sig as i32 {
        format!(
            "{}e{}{:02}",
            strip_zeros(mant),
            if e < 0 { "-" } else { "+" },
            e.abs()
        )
    } else {
        let decimals = (sig as i32 - 1 - e).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, x))
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Numeric columns of the EM trace table, by model kind.
#[derive(Debug, Clone, Copy)]
pub(crate) enum TableKind {
    Homogeneous,
    Tc,
    Tv,
    TcTv,
}

impl TableKind {
    fn labels(self) -> &'static [&'static str] {
        match self {
            TableKind::Homogeneous => &["lk"],
            TableKind::Tc => &["G", "lk", "(lk-lko)"],
            TableKind::Tv => &["m", "lk", "(lk-lko)"],
            TableKind::TcTv => &["m", "G", "lk", "(lk-lko)"],
        }
    }

    pub(crate) fn separator(self) -> String {
        let mut s = String::from("------------|");
        for _ in self.labels() {
            s.push_str("-------------|");
        }
        s
    }

    pub(crate) fn header(self) -> String {
        // centered in 13 columns with the extra space on the left
        let mut s = String::from("  iteration |");
        for label in self.labels() {
            let left = (13 - label.len() + 1) / 2;
            let right = 13 - label.len() - left;
            s.push_str(&" ".repeat(left));
            s.push_str(label);
            s.push_str(&" ".repeat(right));
            s.push('|');
        }
        s
    }

    pub(crate) fn row(self, iteration: usize, fields: &[String]) -> String {
        let mut s = format!("{:>11} |", iteration);
        for f in fields {
            s.push_str(&format!("{:>12} |", f));
        }
        s.push(' ');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_matches_printf() {
        assert_eq!(fmt_g6(-1682.314), "-1682.31");
        assert_eq!(fmt_g6(-1607.5000001), "-1607.5");
        assert_eq!(fmt_g6(4.64719e-6), "4.64719e-06");
        assert_eq!(fmt_g6(0.00400722), "0.00400722");
        assert_eq!(fmt_g6(11.8652), "11.8652");
        assert_eq!(fmt_g6(0.366345), "0.366345");
        assert_eq!(fmt_g6(9.32048e-5), "9.32048e-05");
        assert_eq!(fmt_g6(0.0), "0");
        assert_eq!(fmt_g6(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g6(999999.4), "999999");
    }

    #[test]
    fn g7_for_loglik_footers() {
        assert_eq!(fmt_g(-1540.6931, 7), "-1540.693");
        assert_eq!(fmt_g(-1607.1099, 7), "-1607.11");
        assert_eq!(fmt_g(-1575.7950001, 7), "-1575.795");
    }

    #[test]
    fn table_layout_matches_console_format() {
        let k = TableKind::Tc;
        assert_eq!(k.separator(), "------------|-------------|-------------|-------------|");
        assert_eq!(
            k.header(),
            "  iteration |      G      |      lk     |   (lk-lko)  |"
        );
        let row = k.row(0, &["2".into(), "-1682.31".into(), "NA".into()]);
        assert_eq!(row, "          0 |           2 |    -1682.31 |          NA | ");
    }
}
