//! Companion gnuplot scripts for the CSV outputs.

use std::fmt::Write as _;

/// Script plotting every column of `csv` against the first one.
pub fn script(csv: &str, header: &str, log_y: bool) -> String {
    let cols: Vec<&str> = header.trim().split(',').collect();
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set xlabel '{}'", cols[0]);
    if log_y {
        let _ = writeln!(s, "set logscale y");
    }
    let series: Vec<String> = (2..=cols.len())
        .map(|k| {
            let file = if k == 2 {
                format!("'{csv}'")
            } else {
                "''".to_string()
            };
            format!("{file} using 1:{k} with lines")
        })
        .collect();
    let _ = writeln!(s, "plot {}", series.join(", \\\n     "));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_series_per_column() {
        let s = script("trace.csv", "t_s,E_x_kbt,E_y_kbt\n", false);
        assert!(s.contains("plot 'trace.csv' using 1:2 with lines"));
        assert!(s.contains("'' using 1:3 with lines"));
        assert!(!s.contains("logscale"));
        assert!(script("psd.csv", "f_hz,psd", true).contains("set logscale y"));
    }
}
