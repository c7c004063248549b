use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check only this many parameter entries, picked by `seed`. Every
    /// parameter tensor contributes at least one entry when the budget allows.
    pub sample: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error, scaled by `max(1, |f|)`.
    /// Entries whose true gradient is zero are then compared against the
    /// round-off that a difference of two large losses carries.
    pub floor: f64,
    /// Entries whose relative error exceeds `refine_above` are re-measured
    /// with steps `h / 10`, `h / 100`, ... up to `refine_steps` times and
    /// keep the best agreement. A kink of a piecewise-smooth loss within `h`
    /// of the point spoils the wide difference but not the narrow ones; the
    /// floor grows with `1 / h` to keep pace with round-off.
    pub refine_above: f64,
    pub refine_steps: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            sample: None,
            seed: 0,
            floor: 1e-6,
            refine_above: f64::INFINITY,
            refine_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries that needed a narrower step.
    pub refined: usize,
    /// `(parameter, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares tape gradients of the scalar `f` against central finite
/// differences. The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor * max(1, |f|))`.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let analytic = tape.backward(loss)?.aligned(store);
    let floor = opts.floor * tape.item(loss).abs().max(1.0);
    drop(tape);

    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    match opts.sample {
        None => {
            for id in store.ids() {
                entries.extend((0..store.value(id).len()).map(|e| (id, e)));
            }
        }
        Some(budget) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut rest = Vec::new();
            for id in store.ids() {
                let mut all: Vec<usize> = (0..store.value(id).len()).collect();
                all.shuffle(&mut rng);
                if let Some((&first, tail)) = all.split_first() {
                    entries.push((id, first));
                    rest.extend(tail.iter().map(|&e| (id, e)));
                }
            }
            rest.shuffle(&mut rng);
            entries.truncate(budget);
            let left = budget.saturating_sub(entries.len());
            entries.extend(rest.into_iter().take(left));
        }
    }

    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let v = f(&t, s)?;
        Ok(t.item(v))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        refined: 0,
        worst: None,
    };
    for (id, e) in entries {
        let original = probe.value(id).data()[e];
        let a = analytic[id.index()].data()[e];
        let mut central = |h: f64| -> Result<(f64, f64)> {
            probe.data_mut(id)[e] = original + h;
            let plus = eval(&probe)?;
            probe.data_mut(id)[e] = original - h;
            let minus = eval(&probe)?;
            probe.data_mut(id)[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let fl = floor * opts.h / h;
            Ok((numeric, (a - numeric).abs() / a.abs().max(numeric.abs()).max(fl)))
        };
        let (mut numeric, mut rel) = central(opts.h)?;
        let mut h = opts.h;
        for _ in 0..opts.refine_steps {
            if rel <= opts.refine_above {
                break;
            }
            h /= 10.0;
            let (n2, r2) = central(h)?;
            if r2 < rel {
                (numeric, rel) = (n2, r2);
            }
        }
        if h != opts.h {
            report.refined += 1;
        }
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.name(id).to_string(), e, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::matrix(1, 3, vec![0.4, -1.3, 2.2]))
            .unwrap();
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]);
        let report = grad_check(
            &store,
            |t, s| {
                let x = t.param(s, "x")?;
                let av = t.leaf(a.clone());
                let xa = t.matmul(x, av)?;
                let q = t.mul(xa, x)?;
                t.sum(q, None)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn relu_network_away_from_kinks() {
        // Inputs nudged by 1e-3 away from zero so no pre-activation sits on
        // the kink.
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(2, 2, vec![0.7, -0.2, 0.3, 0.9]))
            .unwrap();
        let x = Tensor::matrix(2, 2, vec![1.001, -0.5, 0.25, 0.001]);
        let report = grad_check(
            &store,
            |t, s| {
                let w = t.param(s, "w")?;
                let xv = t.leaf(x.clone());
                let h = t.matmul(xv, w)?;
                let r = t.relu(h)?;
                let q = t.mul(r, r)?;
                t.sum(q, None)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sampling_covers_every_tensor() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[10, 10])).unwrap();
        store.insert("b", Tensor::zeros(&[1, 3])).unwrap();
        let report = grad_check(
            &store,
            |t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let sa = t.sum(a, None)?;
                let sb = t.sum(b, None)?;
                t.add(sa, sb)
            },
            &GradCheckOptions {
                sample: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn narrower_steps_resolve_a_nearby_kink() {
        // |x - 3e-6| at x = 0: the default step straddles the kink
        let mut store = ParamStore::new();
        store.insert("x", Tensor::matrix(1, 1, vec![0.0])).unwrap();
        let f = |t: &Tape, s: &ParamStore| {
            let x = t.param(s, "x")?;
            let right = t.relu(t.add_scalar(x, -3e-6)?)?;
            let left = t.relu(t.add_scalar(t.scale(x, -1.0)?, 3e-6)?)?;
            let v = t.add(right, left)?;
            t.sum(v, None)
        };
        let plain = grad_check(&store, f, &GradCheckOptions::default()).unwrap();
        assert!(plain.max_rel_error > 0.5, "{plain:?}");
        assert_eq!(plain.refined, 0);
        let opts = GradCheckOptions {
            refine_above: 1e-5,
            refine_steps: 2,
            ..Default::default()
        };
        let refined = grad_check(&store, f, &opts).unwrap();
        assert!(refined.max_rel_error < 1e-6, "{refined:?}");
        assert_eq!(refined.refined, 1);
    }
}
