use super::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements of each parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

fn eval(f: &impl Fn(&mut Tape, &ParameterStore) -> Result<Var>, store: &ParameterStore) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("grad_check aborted: loss evaluated to {x}")));
    }
    Ok(x)
}

/// Compares backward gradients of the scalar function `f` against central
/// finite differences for every unfrozen parameter of `store`.
pub fn grad_check(
    f: impl Fn(&mut Tape, &ParameterStore) -> Result<Var>,
    store: &ParameterStore,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.step <= 0.0 {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    eval(&f, store)?;
    let mut analytic = store.clone();
    analytic.clear_grads();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &analytic)?;
        tape.backward_into(loss, &mut analytic)?;
    }

    let mut probe = store.clone();
    let mut params = Vec::new();
    let names: Vec<String> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let numel = store.get(&name)?.numel();
        let zeros = vec![0.0; numel];
        let grad = analytic.grad(&name).map_or(&zeros[..], |g| g.data()).to_vec();
        let picks: Vec<usize> = match opts.max_elements {
            Some(cap) if cap < numel => (0..cap).map(|i| i * numel / cap).collect(),
            _ => (0..numel).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = store.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let up = eval(&f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let down = eval(&f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
        }
        params.push(ParamCheck {
            name,
            checked: picks.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}
