//! Separates config-key flags (`--lambda 2`, `--train.lambda=2`) from the
//! flags clap knows about.

const CLAP_FLAGS: &[&str] = &[
    "config", "reference", "checkpoint", "method", "seeds", "sizes", "input", "output", "help", "version",
];
const CLAP_SWITCHES: &[&str] = &["reference", "help", "version"];

/// Returns the argv for clap and the `(key, value)` overrides, in order.
pub fn split_overrides(argv: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut kept = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| !f.is_empty()) else {
            kept.push(a.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if CLAP_FLAGS.contains(&name) {
            kept.push(a.clone());
            if inline.is_none() && !CLAP_SWITCHES.contains(&name) {
                if let Some(v) = it.next() {
                    kept.push(v.clone());
                }
            }
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((kept, overrides))
}
