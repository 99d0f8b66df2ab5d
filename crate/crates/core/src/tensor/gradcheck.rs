use super::{Graph, ParamStore, Result, Var};

/// Denominator floor for relative error, so gradients that are zero up to
/// rounding do not report huge relative errors.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences over every value of every entry in `store`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(store: &ParamStore, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic_store)?;
    g.backward(out, &mut analytic_store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.scalar(out))
    };

    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let analytic = analytic_store.get(&name)?.grad().map(<[f64]>::to_vec).unwrap_or_default();
        let base = store.get(&name)?.data().to_vec();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..base.len() {
            let mut vals = base.clone();
            vals[i] = base[i] + step;
            probe.set_values(&name, &vals)?;
            let plus = eval(&probe)?;
            vals[i] = base[i] - step;
            probe.set_values(&name, &vals)?;
            let minus = eval(&probe)?;
            probe.set_values(&name, &base)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
