//! Every primitive's gradient against central differences on random
//! small inputs (100 cases each).

use cfvsr::diffcore::{finite_difference_check, Array, DiffError, Tape, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn weights(n: usize, seed: u64) -> Array {
    // deterministic weights with magnitude in [0.5, 1.5] and mixed sign
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((s >> 11) as f64) / ((1u64 << 53) as f64);
            let mag = 0.5 + u;
            if (s >> 7) & 1 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Array::from_vec(data)
}

/// `sum(w * op(x))` with fixed random weights.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>, DiffError> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = tape.constant(weights(n, seed).reshaped(&shape)?);
    y.mul(w)?.sum()
}

fn check<F>(x: Vec<f64>, shape: &[usize], step: f64, f: F) -> Result<(), TestCaseError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    let x = Array::new(shape, x).unwrap();
    let report = finite_difference_check(f, &x, step).unwrap();
    prop_assert!(
        report.max_rel_error < TOL,
        "max rel error {} at {} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst_index,
        report.analytic[report.worst_index],
        report.numeric[report.worst_index]
    );
    Ok(())
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_sub_mul(x in values(12, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[2, 6], 1e-4, |t, v| {
            let a = v.slice(0, 0, 1)?;
            let b = v.slice(0, 1, 1)?;
            let y = a.add(b)?.mul(a)?.sub(b.mul(b)?)?;
            weighted(t, y, seed)
        })?;
    }

    #[test]
    fn add_row_scale(x in values(12, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[12], 1e-4, |t, v| {
            let m = v.slice(0, 0, 9)?.reshape(&[3, 3])?;
            let b = v.slice(0, 9, 3)?;
            weighted(t, m.add_row(b)?.scale(-1.7)?.add_scalar(0.3)?, seed)
        })?;
    }

    #[test]
    fn matmul(x in values(20, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[20], 1e-4, |t, v| {
            let a = v.slice(0, 0, 8)?.reshape(&[2, 4])?;
            let b = v.slice(0, 8, 12)?.reshape(&[4, 3])?;
            weighted(t, a.matmul(b)?, seed)
        })?;
    }

    #[test]
    fn bmm_transpose(x in values(24, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[24], 1e-4, |t, v| {
            let a = v.slice(0, 0, 12)?.reshape(&[2, 2, 3])?;
            let b = v.slice(0, 12, 12)?.reshape(&[2, 2, 3])?;
            weighted(t, a.bmm(b.transpose()?)?, seed)
        })?;
    }

    #[test]
    fn permute_concat(x in values(24, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[2, 3, 4], 1e-4, |t, v| {
            let p = v.permute(&[2, 0, 1])?;
            let c = t.concat(&[p, v.reshape(&[4, 2, 3])?], 1)?;
            weighted(t, c.mul(c)?, seed)
        })?;
    }

    #[test]
    fn exp(x in values(6, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[6], 1e-5, |t, v| weighted(t, v.exp()?, seed))?;
    }

    #[test]
    fn log(x in values(6, 0.3, 3.0), seed in any::<u64>()) {
        check(x, &[6], 1e-6, |t, v| weighted(t, v.log()?, seed))?;
    }

    #[test]
    fn relu(x in values(6, -2.0, 2.0).prop_filter("away from kink", |v| v.iter().all(|x| x.abs() > 1e-3)), seed in any::<u64>()) {
        check(x, &[6], 1e-5, |t, v| weighted(t, v.relu()?, seed))?;
    }

    #[test]
    fn sigmoid_silu_glu(x in values(8, -1.0, 2.0), seed in any::<u64>()) {
        check(x.clone(), &[8], 1e-5, |t, v| weighted(t, v.sigmoid()?, seed))?;
        check(x.clone(), &[8], 1e-5, |t, v| weighted(t, v.silu()?, seed))?;
        check(x, &[2, 4], 1e-5, |t, v| weighted(t, v.glu()?, seed))?;
    }

    #[test]
    fn reduce_sum(x in values(6, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[2, 3], 1e-4, |t, v| weighted(t, v.sum_last()?, seed))?;
    }

    #[test]
    fn reduce_logsumexp(x in values(6, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[2, 3], 1e-5, |t, v| weighted(t, v.logsumexp_last()?, seed))?;
    }

    #[test]
    fn softmax(x in values(8, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[2, 4], 1e-5, |t, v| weighted(t, v.softmax()?, seed))?;
    }

    #[test]
    fn log_softmax(x in values(8, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[2, 4], 1e-5, |t, v| weighted(t, v.log_softmax()?, seed))?;
    }

    #[test]
    fn l2_normalize(x in values(8, -2.0, 2.0).prop_filter("nonzero rows", |v| v.chunks(4).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 0.1)), seed in any::<u64>()) {
        check(x, &[2, 4], 1e-5, |t, v| weighted(t, v.l2_normalize()?, seed))?;
    }

    #[test]
    fn masked_fill(x in values(8, -2.0, 2.0), seed in any::<u64>()) {
        let mask: Vec<bool> = (0..8).map(|i| (seed >> i) & 1 == 1 && i % 4 != 0).collect();
        check(x, &[2, 4], 1e-5, move |t, v| weighted(t, v.scale(2.0)?.masked_fill(&mask, -1e30)?.log_softmax()?.masked_fill(&mask, 0.0)?, seed))?;
    }

    #[test]
    fn layer_norm(x in values(16, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[16], 1e-5, |t, v| {
            let h = v.slice(0, 0, 8)?.reshape(&[2, 4])?;
            let g = v.slice(0, 8, 4)?;
            let b = v.slice(0, 12, 4)?;
            weighted(t, h.layer_norm(g, b, 1e-5)?, seed)
        })?;
    }

    #[test]
    fn depthwise_conv(x in values(21, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[21], 1e-4, |t, v| {
            let h = v.slice(0, 0, 12)?.reshape(&[1, 4, 3])?;
            let w = v.slice(0, 12, 9)?.reshape(&[3, 3])?;
            weighted(t, h.depthwise_conv1d(w)?, seed)
        })?;
    }

    #[test]
    fn gather_select(x in values(12, -2.0, 2.0), seed in any::<u64>()) {
        check(x, &[4, 3], 1e-4, |t, v| {
            let g = t.gather_rows(v, &[2, 0, 2, 3])?;
            let s = g.select_per_row(&[1, 0, 2, 1])?;
            weighted(t, s.mul(s)?, seed)
        })?;
    }
}
