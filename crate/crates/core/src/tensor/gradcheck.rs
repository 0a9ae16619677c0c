use rand::seq::index::sample;

use super::{Graph, Var};
use crate::error::{Result, SanError};
use crate::params::{named_rng, ParamStore};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where `max_rel_error` occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

/// Options for [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Cap on coordinates probed per parameter tensor; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Builds graphs with a broken tanh adjoint (detector sanity check).
    pub faulty_tanh: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            faulty_tanh: false,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn gradcheck<F>(params: &ParamStore, f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(SanError::Usage("gradcheck step must be positive".into()));
    }
    let new_graph = || {
        if opts.faulty_tanh {
            Graph::with_faulty_tanh()
        } else {
            Graph::new()
        }
    };
    let mut g = new_graph();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss)?.into_params();

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, p)?;
        g.value(v).item()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(cap) if cap < n => {
                let mut rng = named_rng(opts.seed, name);
                let mut idx = sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x = tensor.data()[i];
            probe.get_mut(name).expect("cloned store").data_mut()[i] = x + opts.step;
            let fp = eval(&probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[i] = x - opts.step;
            let fm = eval(&probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[i] = x;

            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
