//! Central-difference validation of tape gradients. Each case builds a
//! scalar loss from leaf tensors, compares the analytic gradient against
//! (f(x + h) - f(x - h)) / 2h coordinate by coordinate, and reports the
//! worst error in mixed absolute/relative form:
//! |a - fd| / max(1, |a|, |fd|).
//!
//! Three suites: `primitives` covers every differentiable tape op on small
//! tensors, `lif` runs the smooth-mode neuron recurrence through time under
//! both reset forms, and `full` probes a few coordinates of every parameter
//! of the real backbone + projection head + contrastive loss stack.

use std::time::Instant;

use rand::Rng;

use crate::autodiff::{SurrogateMode, Tape, Tensor, ValueId};
use crate::contrastive::{aggregate_time_mean, nt_xent_tape};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::snn::{
    build_mini_sew, build_projection_head, forward_sequence, lif_tape, LifConfig, ResetForm,
    TapeLifState,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckScope {
    Primitives,
    Lif,
    Full,
}

impl GradcheckScope {
    pub fn all() -> [GradcheckScope; 3] {
        [GradcheckScope::Primitives, GradcheckScope::Lif, GradcheckScope::Full]
    }

    pub fn parse(s: &str) -> Result<GradcheckScope> {
        match s {
            "primitives" => Ok(GradcheckScope::Primitives),
            "lif" => Ok(GradcheckScope::Lif),
            "full" => Ok(GradcheckScope::Full),
            other => Err(Error::config(format!(
                "unknown gradcheck scope '{other}' (expected primitives, lif, or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    pub max_abs_err: f64,
    /// Worst |a - fd| / max(1, |a|, |fd|).
    pub max_rel_err: f64,
    pub elapsed_s: f64,
    pub passed: bool,
}

type BuildFn = Box<dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId>>;

struct Case {
    name: String,
    inputs: Vec<Tensor>,
    /// None checks every coordinate.
    probes_per_tensor: Option<usize>,
    build: BuildFn,
}

fn probe_coords(numel: usize, probes: Option<usize>) -> Vec<usize> {
    match probes {
        Some(k) if numel > k && k > 1 => {
            let mut out: Vec<usize> =
                (0..k).map(|j| j * (numel - 1) / (k - 1)).collect();
            out.dedup();
            out
        }
        Some(k) if numel > k => vec![0],
        _ => (0..numel).collect(),
    }
}

fn run_case(case: &Case, h: f64, tol: f64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = (case.build)(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut checked = 0;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        let zero;
        let g = match grads.get(ids[i]) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(input.shape());
                &zero
            }
        };
        for c in probe_coords(input.numel(), case.probes_per_tensor) {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[c] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[c] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = g.data()[c];
            let err = (a - fd).abs();
            let rel = err / 1.0_f64.max(a.abs()).max(fd.abs());
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        name: case.name.clone(),
        checked,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        elapsed_s: start.elapsed().as_secs_f64(),
        passed: max_rel <= tol,
    })
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn primitives_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let mut rng = stream_rng(7, "gradcheck.primitives", &[]);

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    cases.push(Case {
        name: "add_sub_mul_scale".into(),
        inputs: vec![a, b],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let d = t.sub(s, ids[1])?;
            let m = t.mul(d, ids[0])?;
            let sc = t.scale(m, 1.7);
            let sh = t.add_scalar(sc, 0.3);
            Ok(t.mean_all(sh))
        }),
    });

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    cases.push(Case {
        name: "matmul_transpose".into(),
        inputs: vec![a, b],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let p = t.matmul(ids[0], ids[1])?;
            let pt = t.transpose2(p)?;
            let q = t.matmul(ids[1], pt)?;
            Ok(t.mean_all(q))
        }),
    });

    let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    cases.push(Case {
        name: "conv2d_pad1_bias".into(),
        inputs: vec![x, w, bias],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let c = t.conv2d(ids[0], ids[1], 1, 1)?;
            let c = t.add_bias_channel(c, ids[2])?;
            Ok(t.mean_all(c))
        }),
    });

    let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
    cases.push(Case {
        name: "conv2d_stride2".into(),
        inputs: vec![x, w],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let c = t.conv2d(ids[0], ids[1], 2, 0)?;
            Ok(t.mean_all(c))
        }),
    });

    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    cases.push(Case {
        name: "pool_and_gap".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let p = t.sum_pool2(ids[0], 2)?;
            let g = t.global_avg_pool(p)?;
            Ok(t.mean_all(g))
        }),
    });

    let mut x = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.2 {
            *v += 0.4;
        }
    }
    cases.push(Case {
        name: "relu_away_from_kink".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let r = t.relu(ids[0]);
            Ok(t.mean_all(r))
        }),
    });

    let x = rand_tensor(&mut rng, &[2, 3], 0.5, 2.0);
    cases.push(Case {
        name: "exp_log".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let e = t.exp(ids[0]);
            let l = t.log(e);
            let m = t.mul(l, ids[0])?;
            Ok(t.mean_all(m))
        }),
    });

    let x = rand_tensor(&mut rng, &[3, 4], 0.3, 1.5);
    cases.push(Case {
        name: "l2_normalize_rows".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let n = t.l2_normalize_rows(ids[0])?;
            let w = t.exp(n);
            Ok(t.mean_all(w))
        }),
    });

    let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    cases.push(Case {
        name: "row_logsumexp".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let l = t.row_logsumexp(ids[0])?;
            let e = t.exp(l);
            Ok(t.mean_all(e))
        }),
    });

    let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    cases.push(Case {
        name: "log_softmax_rows".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let l = t.log_softmax_rows(ids[0])?;
            let sq = t.mul(l, l)?;
            Ok(t.mean_all(sq))
        }),
    });

    let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let coeff = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let offset = rand_tensor(&mut rng, &[2, 3], -0.3, 0.3);
    cases.push(Case {
        name: "mul_add_const".into(),
        inputs: vec![x, y],
        probes_per_tensor: None,
        build: Box::new(move |t, ids| {
            let m = t.mul_add_const(ids[0], ids[1], coeff.clone(), offset.clone())?;
            let e = t.exp(m);
            Ok(t.mean_all(e))
        }),
    });

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    cases.push(Case {
        name: "concat_slice".into(),
        inputs: vec![a, b],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let cat = t.concat0(&[ids[0], ids[1]])?;
            let s = t.slice0(cat, 1, 3)?;
            let m = t.mul(s, s)?;
            Ok(t.mean_all(m))
        }),
    });

    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    cases.push(Case {
        name: "axis_reductions".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let s = t.sum_axis(ids[0], 1)?;
            let m = t.mean_axis(s, 0)?;
            let e = t.exp(m);
            Ok(t.mean_all(e))
        }),
    });

    let x = rand_tensor(&mut rng, &[2, 4], -2.0, 2.0);
    cases.push(Case {
        name: "smooth_surrogate".into(),
        inputs: vec![x],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let s = t.spike_surrogate(ids[0], 2.0, SurrogateMode::Smooth)?;
            let m = t.mul(s, s)?;
            Ok(t.mean_all(m))
        }),
    });

    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    cases.push(Case {
        name: "add_bias_row".into(),
        inputs: vec![x, bias],
        probes_per_tensor: None,
        build: Box::new(|t, ids| {
            let b = t.add_bias_row(ids[0], ids[1])?;
            let e = t.exp(b);
            Ok(t.mean_all(e))
        }),
    });

    cases
}

fn lif_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (label, reset) in [
        ("lif_smooth_zero_then_decay", ResetForm::ZeroThenDecay),
        ("lif_smooth_subtract", ResetForm::Subtract),
    ] {
        let mut rng = stream_rng(11, "gradcheck.lif", &[reset as u64]);
        let w = rand_tensor(&mut rng, &[3, 3], -0.8, 0.8);
        let steps: Vec<Tensor> =
            (0..4).map(|_| rand_tensor(&mut rng, &[2, 3], -0.5, 1.5)).collect();
        let mut inputs = vec![w];
        inputs.extend(steps);
        let cfg = LifConfig {
            mode: SurrogateMode::Smooth,
            reset,
            v_reset: 0.2,
            beta: 0.8,
            ..LifConfig::default()
        };
        cases.push(Case {
            name: label.into(),
            inputs,
            probes_per_tensor: None,
            build: Box::new(move |t, ids| {
                let mut state: Option<TapeLifState> = None;
                let mut outs = Vec::new();
                for &x in &ids[1..] {
                    let z = t.matmul(x, ids[0])?;
                    let (s, st) = lif_tape(t, z, state.as_ref(), &cfg)?;
                    state = Some(st);
                    outs.push(s);
                }
                let agg = aggregate_time_mean(t, &outs)?;
                let sq = t.mul(agg, agg)?;
                Ok(t.mean_all(sq))
            }),
        });
    }
    cases
}

fn full_case() -> Result<Case> {
    let lif = LifConfig { mode: SurrogateMode::Smooth, ..LifConfig::default() };
    let backbone = build_mini_sew(8, 8, lif, 77)?;
    let head = build_projection_head(32, 16, lif, 78)?;
    let split = backbone.params.len();
    let mut inputs: Vec<Tensor> = backbone.params.iter().map(|p| p.value.clone()).collect();
    inputs.extend(head.params.iter().map(|p| p.value.clone()));

    let mut rng = stream_rng(13, "gradcheck.full", &[]);
    let views: Vec<Tensor> =
        (0..3).map(|_| rand_tensor(&mut rng, &[4, 2, 8, 8], 0.0, 2.0)).collect();

    Ok(Case {
        name: "full_contrastive_stack".into(),
        inputs,
        probes_per_tensor: Some(4),
        build: Box::new(move |t, ids| {
            let step_ids: Vec<ValueId> =
                views.iter().map(|v| t.constant(v.clone())).collect();
            let feats = forward_sequence(t, &backbone, &ids[..split], &step_ids)?;
            let embeds = forward_sequence(t, &head, &ids[split..], &feats)?;
            let agg = aggregate_time_mean(t, &embeds)?;
            nt_xent_tape(t, agg, 0.5)
        }),
    })
}

/// Run the requested suites with the default step and tolerance.
pub fn run_gradcheck(scopes: &[GradcheckScope]) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for scope in scopes {
        let cases = match scope {
            GradcheckScope::Primitives => primitives_cases(),
            GradcheckScope::Lif => lif_cases(),
            GradcheckScope::Full => vec![full_case()?],
        };
        for case in &cases {
            reports.push(run_case(case, DEFAULT_STEP, DEFAULT_TOLERANCE)?);
        }
    }
    Ok(reports)
}

/// Fold failed reports into a gradient-check error.
pub fn ensure_passed(reports: &[GradcheckReport]) -> Result<()> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (max_rel_err {:.3e})", r.name, r.max_rel_err))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Gradcheck(failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let reports = run_gradcheck(&[GradcheckScope::Primitives]).unwrap();
        assert_eq!(reports.len(), 15);
        for r in &reports {
            assert!(r.passed, "{}: max_rel_err {}", r.name, r.max_rel_err);
            assert!(r.checked > 0);
        }
        assert!(ensure_passed(&reports).is_ok());
    }

    #[test]
    fn lif_recurrence_gradients_match_finite_differences() {
        let reports = run_gradcheck(&[GradcheckScope::Lif]).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert!(r.passed, "{}: max_rel_err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        let reports = run_gradcheck(&[GradcheckScope::Full]).unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert!(r.passed, "max_rel_err {}", r.max_rel_err);
        assert!(r.checked >= 4 * 10);
    }

    /// Negative control: the binary spiking forward has zero derivative
    /// almost everywhere, so its surrogate gradient must fail the check.
    #[test]
    fn spiking_surrogate_fails_finite_difference_as_expected() {
        let mut rng = stream_rng(99, "gradcheck.negative", &[]);
        let x = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let case = Case {
            name: "spiking_negative_control".into(),
            inputs: vec![x],
            probes_per_tensor: None,
            build: Box::new(|t, ids| {
                let s = t.spike_surrogate(ids[0], 2.0, SurrogateMode::Spiking)?;
                Ok(t.mean_all(s))
            }),
        };
        let report = run_case(&case, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(!report.passed);
        assert!(ensure_passed(&[report]).is_err());
    }
}
