use super::param::ParamStore;
use super::tape::Var;
use super::tensor::Tensor;
use super::{Ctx, Mode};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms: the relative
/// error denominator is `max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst disagreement occurred, e.g. `input 0 [3]` or
    /// `param spatial.mha.query.weight [7]`.
    pub worst: String,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, over every input entry and every trainable
/// parameter entry of `store`.
///
/// `f` is evaluated in [`Mode::Check`] so it must be deterministic.
pub fn gradient_check<F>(store: &ParamStore, inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut ctx = Ctx::new(store, Mode::Check, None);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        scalar_value(&ctx, out)
    };

    let mut ctx = Ctx::new(store, Mode::Check, None);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    scalar_value(&ctx, out)?;
    let grads = ctx.tape.backward(out)?;
    let param_grads = ctx.param_grads(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let mut record = |analytic: f64, numeric: f64, loc: String| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!("gradient at {loc}: analytic {analytic}, numeric {numeric}")));
        }
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = loc;
        }
        Ok(())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(store, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            record(analytic.data()[j], (plus - minus) / (2.0 * step), format!("input {i} [{j}]"))?;
        }
    }

    let mut perturbed = store.clone();
    for id in store.ids() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let analytic = param_grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for j in 0..p.value.len() {
            let orig = p.value.data()[j];
            perturbed.get_mut(id).value.data_mut()[j] = orig + step;
            let plus = eval(&perturbed, inputs)?;
            perturbed.get_mut(id).value.data_mut()[j] = orig - step;
            let minus = eval(&perturbed, inputs)?;
            perturbed.get_mut(id).value.data_mut()[j] = orig;
            record(analytic.data()[j], (plus - minus) / (2.0 * step), format!("param {} [{j}]", p.name))?;
        }
    }
    Ok(report)
}

fn scalar_value(ctx: &Ctx, out: Var) -> Result<f64> {
    let v = ctx.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", v.shape())));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("function output {x}")));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let store = ParamStore::new();
        // tanh is correct; a mul by itself through a constant copy is not
        // differentiated w.r.t. the copy, so the check must flag it.
        let report = gradient_check(&store, &[Tensor::row(vec![0.3, -0.7])], 1e-5, |ctx, v| {
            let c = ctx.tape.constant(ctx.value(v[0]).clone());
            let y = ctx.tape.mul(v[0], c)?;
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1, "{report:?}");
    }

    #[test]
    fn non_finite_output_reported() {
        let store = ParamStore::new();
        let err = gradient_check(&store, &[Tensor::scalar(1.0)], 1e-5, |ctx, v| {
            let y = ctx.tape.scale(v[0], f64::INFINITY);
            Ok(ctx.tape.sum(y))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
