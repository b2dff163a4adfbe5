//! Single-line, machine-parsable error reporting: `error[Class]: message`.

use thermoforge::bench::BenchError;
use thermoforge::checkpoint::CheckpointError;
use thermoforge::deeponet::HeadError;
use thermoforge::geomgen::GeomError;
use thermoforge::heatfd::SolveError;
use thermoforge::metrics::MetricError;
use thermoforge::ndmath::MathError;
use thermoforge::vrrae::ModelError;

/// Failures owned by the CLI layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("study cell {0} is missing")]
    MissingCell(String),
    #[error("{what} was produced from manifest {recorded}, current manifest is {current} (use --force to override)")]
    ConfigMismatch { what: String, recorded: String, current: String },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Leaf variant name of a `Debug` rendering, descending through wrapper
/// variants such as `Model(MissingBasis)`.
fn leaf_variant(debug: &str) -> String {
    let mut s = debug;
    loop {
        let end = s.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(s.len());
        let ident = &s[..end];
        let rest = &s[end..];
        let descend = matches!(ident, "Model" | "Math" | "Checkpoint" | "Head" | "Solve" | "Geometry" | "Geom")
            && rest.starts_with('(')
            && rest[1..].starts_with(|c: char| c.is_ascii_uppercase());
        if !descend {
            return ident.to_string();
        }
        s = &rest[1..];
    }
}

/// `(class, exit code)`: library and CLI domain errors exit 2, I/O and
/// anything else 1.
pub fn classify(err: &anyhow::Error) -> (String, i32) {
    for cause in err.chain() {
        macro_rules! try_domain {
            ($($t:ty),*) => {$(
                if let Some(e) = cause.downcast_ref::<$t>() {
                    let class = leaf_variant(&format!("{e:?}"));
                    let code = if class == "Io" { 1 } else { 2 };
                    return (class, code);
                }
            )*};
        }
        try_domain!(CliError, GeomError, SolveError, ModelError, HeadError, MetricError, CheckpointError, BenchError, MathError);
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("Io".into(), 1);
        }
    }
    ("Error".into(), 1)
}

pub fn render(err: &anyhow::Error) -> (String, i32) {
    let (class, code) = classify(err);
    let msg = format!("{err:#}").replace('\n', " ");
    (format!("error[{class}]: {msg}"), code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_leaf_variants() {
        let e: anyhow::Error = HeadError::Model(ModelError::MissingBasis).into();
        assert_eq!(classify(&e), ("MissingBasis".into(), 2));
        let e: anyhow::Error = CliError::MissingCell("AE+CNN".into()).into();
        assert_eq!(classify(&e), ("MissingCell".into(), 2));
        let e = anyhow::Error::new(ModelError::ShapeMismatch("x".into())).context("loading");
        let (line, code) = render(&e);
        assert_eq!(code, 2);
        assert!(line.starts_with("error[ShapeMismatch]: loading: "), "{line}");
        let e: anyhow::Error = std::io::Error::other("disk").into();
        assert_eq!(classify(&e), ("Io".into(), 1));
        let e: anyhow::Error = GeomError::Io(std::io::Error::other("gone")).into();
        assert_eq!(classify(&e), ("Io".into(), 1));
    }
}
