use std::cmp::Ordering;

/// Decimal with at most `sig` significant digits, trailing zeros trimmed,
/// never in exponent form.
pub fn sig_digits(x: f64, sig: usize) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - magnitude).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    // rounding may carry into a new leading digit; one more pass fixes it
    if let Ok(r) = s.parse::<f64>() {
        if r != 0.0 && r.abs().log10().floor() as i64 > magnitude && decimals > 0 {
            s = format!("{x:.prec$}", prec = decimals - 1);
        }
    }
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// CSV form of a report number: six significant digits.
pub fn csv_num(x: f64) -> String {
    sig_digits(x, 6)
}

/// Orders strings treating digit runs as numbers: `b2 < b10`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let mut ai = a.chars().peekable();
    let mut bi = b.chars().peekable();
    loop {
        match (ai.peek().copied(), bi.peek().copied()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let take = |it: &mut std::iter::Peekable<std::str::Chars>| {
                    let mut d = String::new();
                    while let Some(c) = it.peek().copied().filter(char::is_ascii_digit) {
                        d.push(c);
                        it.next();
                    }
                    d
                };
                let (da, db) = (take(&mut ai), take(&mut bi));
                let (ta, tb) = (da.trim_start_matches('0'), db.trim_start_matches('0'));
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
                if ord != Ordering::Equal {
                    return ord;
                }
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(&y);
                }
                ai.next();
                bi.next();
            }
        }
    }
}
