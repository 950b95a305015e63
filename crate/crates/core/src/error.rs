use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at step {step}: loss={loss} aux={aux} lr={lr} tau={tau}")]
    NonFinite {
        step: u64,
        loss: f64,
        aux: f64,
        lr: f64,
        tau: f64,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Contract(_) => 1,
            Error::Config { .. } => 2,
            Error::Data(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Checkpoint(_) => 5,
            Error::Io(_) => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Data(_) => "data",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }

    /// Single-line JSON object with `error`, `status` and `message`, plus
    /// the offending field or the numeric snapshot where relevant.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "status": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            Error::Config { field, .. } => v["field"] = field.clone().into(),
            Error::NonFinite { step, loss, aux, lr, tau } => {
                v["snapshot"] = serde_json::json!({
                    "step": step,
                    "loss": loss.to_string(),
                    "aux": aux.to_string(),
                    "lr": lr,
                    "tau": tau,
                });
            }
            _ => {}
        }
        v.to_string()
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_are_distinct_and_json_is_one_line() {
        let errors = [
            Error::contract("x"),
            Error::config("top_k", "too big"),
            Error::Data("d".into()),
            Error::NonFinite {
                step: 3,
                loss: f64::NAN,
                aux: 0.0,
                lr: 1e-3,
                tau: 2.0,
            },
            Error::Checkpoint(CheckpointError::Checksum),
            Error::Io(std::io::Error::other("disk")),
        ];
        let codes: Vec<i32> = errors.iter().map(Error::exit_code).collect();
        assert_eq!(codes, vec![1, 2, 3, 4, 5, 6]);
        for e in &errors {
            let line = e.to_json();
            assert!(!line.contains('\n'));
            let v: serde_json::Value = serde_json::from_str(&line).unwrap();
            assert_eq!(v["status"], e.exit_code());
        }
        assert!(errors[1].to_json().contains(r#""field":"top_k""#));
        assert!(errors[3].to_json().contains(r#""loss":"NaN""#));
    }
}
