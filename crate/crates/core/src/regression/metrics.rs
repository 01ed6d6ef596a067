use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::series::Series;

/// Goodness of fit over the slots where prediction and observation are
/// both defined. `r2` is `-inf` (serialized as `null`) when the observed
/// values are constant and the fit is not exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Metrics<T = f64> {
    #[serde(serialize_with = "r2_out", deserialize_with = "r2_in")]
    pub r2: T,
    pub rmse: T,
    pub mae: T,
    pub n: usize,
}

fn r2_out<T: Scalar, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        v.serialize(s)
    } else {
        s.serialize_none()
    }
}

fn r2_in<'de, T: Scalar, D: Deserializer<'de>>(d: D) -> std::result::Result<T, D::Error> {
    Ok(Option::<T>::deserialize(d)?.unwrap_or_else(T::neg_infinity))
}

fn pairs<'a, T: Scalar>(pred: &'a Series<T>, obs: &'a Series<T>) -> impl Iterator<Item = (T, T)> + 'a {
    pred.iter()
        .zip(obs)
        .flat_map(|(p, o)| p.iter().zip(o))
        .filter_map(|(p, o)| Some(((*p)?, (*o)?)))
}

pub fn compute_metrics<T: Scalar>(pred: &Series<T>, obs: &Series<T>) -> Result<Metrics<T>> {
    let (mut n, mut sum_o) = (0usize, T::zero());
    for (_, o) in pairs(pred, obs) {
        n += 1;
        sum_o += o;
    }
    if n == 0 {
        return Err(Error::Metrics("prediction and observation never overlap".into()));
    }
    let nf = T::of(n as f64);
    let mean_o = sum_o / nf;
    let (mut ss_res, mut ss_tot, mut abs) = (T::zero(), T::zero(), T::zero());
    for (p, o) in pairs(pred, obs) {
        let r = o - p;
        ss_res += r * r;
        abs += r.abs();
        ss_tot += (o - mean_o) * (o - mean_o);
    }
    let r2 = if ss_tot > T::zero() {
        T::one() - ss_res / ss_tot
    } else if ss_res == T::zero() {
        T::one()
    } else {
        T::neg_infinity()
    };
    Ok(Metrics {
        r2,
        rmse: (ss_res / nf).sqrt(),
        mae: abs / nf,
        n,
    })
}

/// Sum of squared residuals over the overlapping slots.
pub fn sum_squared_error<T: Scalar>(pred: &Series<T>, obs: &Series<T>) -> T {
    pairs(pred, obs).map(|(p, o)| (o - p) * (o - p)).sum()
}
