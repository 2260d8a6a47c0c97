//! Central finite-difference verification of [`Graph::backward`].

use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::ModelParams;
use super::SlotError;

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(name, ‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖, floor·‖g_a,global‖))` per
    /// parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
    /// Same ratio over all parameters jointly.
    pub global: f64,
    pub analytic_norm: f64,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.per_tensor.iter().map(|x| x.1).fold(self.global, f64::max)
    }
}

/// Compares `backward` against central differences with step `h` for the
/// scalar built by `loss`. `floor`, relative to the global analytic norm,
/// guards the ratio for tensors whose exact gradient vanishes (e.g. biases
/// that shift every softmax logit equally).
pub fn check_gradients<T, F>(params: &ModelParams<T>, h: f64, floor: f64, loss: F) -> Result<GradCheck, SlotError>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g);
        g.backward(l)?
    };
    let eval = |p: &ModelParams<T>| -> f64 {
        let mut g = Graph::new(p);
        let l = loss(&mut g);
        g.value(l).data()[0].as_f64()
    };

    let floor = floor * analytic.global_norm().as_f64();
    let mut work = params.clone();
    let mut per_tensor = Vec::with_capacity(params.len());
    let (mut diff_all, mut a_all, mut n_all) = (0.0, 0.0, 0.0);
    for (ti, name) in params.names().iter().enumerate() {
        let (mut diff, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..params.tensors()[ti].len() {
            let orig = work.tensors()[ti].data()[j];
            work.tensors_mut()[ti].data_mut()[j] = orig + T::lit(h);
            let up = eval(&work);
            work.tensors_mut()[ti].data_mut()[j] = orig - T::lit(h);
            let down = eval(&work);
            work.tensors_mut()[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.tensors[ti].data()[j].as_f64();
            diff += (an - fd).powi(2);
            a2 += an * an;
            n2 += fd * fd;
        }
        per_tensor.push((name.clone(), diff.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor)));
        diff_all += diff;
        a_all += a2;
        n_all += n2;
    }
    Ok(GradCheck {
        per_tensor,
        global: diff_all.sqrt() / a_all.sqrt().max(n_all.sqrt()).max(f64::MIN_POSITIVE),
        analytic_norm: a_all.sqrt(),
    })
}
