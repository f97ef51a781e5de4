//! RFC 4180 CSV emission: LF line endings, mandatory header row, quoting only
//! when a field contains a comma, quote, or line break. Floats are written
//! with Rust's shortest round-trip formatting, so files parse back to the
//! exact same bits.

pub fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn number(x: f64) -> String {
    format!("{x}")
}

pub fn write_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    push_row(&mut out, header);
    for row in rows {
        push_row(&mut out, row);
    }
    out
}

fn push_row(out: &mut String, fields: &[String]) {
    let mut first = true;
    for f in fields {
        if !first {
            out.push(',');
        }
        out.push_str(&escape(f));
        first = false;
    }
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting_follows_rfc_4180() {
        assert_eq!(escape("plain"), "plain");
        assert_eq!(escape("a,b"), "\"a,b\"");
        assert_eq!(escape("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn floats_round_trip_through_display() {
        for x in [1.0 / 3.0, 2.0_f64.sqrt(), 1e-300, -0.125, f64::INFINITY] {
            let s = number(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
        assert!(number(f64::NAN).parse::<f64>().unwrap().is_nan());
    }

    #[test]
    fn table_uses_lf_and_header() {
        let csv = write_table(
            &["a".into(), "b".into()],
            &[vec!["1".into(), "2".into()]],
        );
        assert_eq!(csv, "a,b\n1,2\n");
        assert!(!csv.contains('\r'));
    }
}
