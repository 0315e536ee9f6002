use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst element of one parameter.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Rounding error of a central difference, `ROUNDING_ULPS` units of the
/// loss value in each evaluation divided by `2h`.
pub const ROUNDING_ULPS: f64 = 16.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    /// `ROUNDING_ULPS * eps * |loss| / (2h)`.
    pub rounding_floor: f64,
    /// Elements over tolerance whose absolute error also exceeds the
    /// rounding floor.
    pub unexplained: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    /// Every element is within tolerance or within the rounding floor.
    pub fn passed_above_rounding_floor(&self) -> bool {
        self.unexplained == 0
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval<T: Scalar, F>(store: &ParamStore<T>, f: &F) -> Result<T>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Rank {
            op: "grad_check",
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `model_fn` against central finite
/// differences, element by element, for each listed parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<T: Scalar, F>(
    store: &ParamStore<T>,
    params: &[ParamId],
    model_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Config(format!(
            "finite-difference step {step} outside (0, 1e-2]"
        )));
    }
    let first = eval(store, &model_fn)?;
    let second = eval(store, &model_fn)?;
    if first != second {
        return Err(Error::Determinism {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }

    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let out = model_fn(&mut tape, &analytic)?;
    tape.backward(out, &mut analytic)?;

    let h = T::lit(step);
    let rounding_floor =
        ROUNDING_ULPS * T::epsilon().as_f64() * first.as_f64().abs() / (2.0 * step);
    let mut unexplained = 0;
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(params.len());
    for &id in params {
        let mut entry = GradCheckEntry {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work, &model_fn)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work, &model_fn)?;
            work.value_mut(id).data_mut()[i] = orig;

            let numeric = ((plus - minus) / (h + h)).as_f64();
            let a = analytic.grad(id).data()[i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if !(rel <= tolerance || (a - numeric).abs() <= rounding_floor) {
                unexplained += 1;
            }
            if rel > entry.max_rel_error || rel.is_nan() {
                entry.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport {
        entries,
        tolerance,
        rounding_floor,
        unexplained,
    })
}
