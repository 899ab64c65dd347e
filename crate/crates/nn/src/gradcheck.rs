//! Central finite-difference checks against the tape gradients.

use std::collections::BTreeMap;

use crate::{ParamStore, Tensor};

/// Worst-case relative error over every parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` over every
/// entry of `params`.
///
/// The relative error of an entry is `|a - n| / max(|a| + |n|, floor)`;
/// the floor keeps entries whose true gradient is zero from dominating.
pub fn check_params(
    params: &ParamStore<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), checked: 0 };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).map(Tensor::len).unwrap_or(0);
        let zeros = Tensor::zeros(params.get(&name).unwrap().shape().to_vec());
        let an = analytic.get(&name).unwrap_or(&zeros);
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = loss(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = loss(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = an.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    report
}
