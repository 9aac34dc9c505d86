use std::fmt::{Debug, Display};
use std::str::FromStr;

/// Element type of all tensors: `f32` or `f64`.
///
/// Everything downstream of the tensor kernels is generic over this trait;
/// the harness layers instantiate `f64` (the crate-wide default parameter).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + FromStr
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// Converts an `f64` literal (tolerances, hyperparameters).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal converts")
    }

    /// Widens to `f64` for reporting and hashing.
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// Shortest decimal string that parses back to the identical value.
    fn encode(self) -> String {
        format!("{}", self)
    }

    fn decode(s: &str) -> Option<Self> {
        s.parse::<Self>().ok()
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}
