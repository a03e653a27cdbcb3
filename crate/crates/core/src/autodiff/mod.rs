//! Reverse-mode automatic differentiation over dense real matrices.
//!
//! Complex tensors are carried in the `[Re | Im]` column layout and
//! differentiated as independent real and imaginary parts, which is all a
//! real-valued loss needs.

mod params;
mod tape;
mod tensor;

use std::sync::Arc;

pub use params::{AdamState, CheckpointError, ParamSet};
pub use tape::{AdError, BlockOp, ComplexBlockOp, Grads, Tape, Var};
pub use tensor::Mat;

/// `sum_k S^k X H_k` applied per `n`-row block; `powers[k]` holds `S^k` for
/// `k >= 1` (`powers[0]` is unused, the identity is implied).
pub fn graph_filter(tape: &mut Tape, powers: &[Arc<ComplexBlockOp>], x: Var, taps: &[Var]) -> Result<Var, AdError> {
    let mut out: Option<Var> = None;
    for (k, &h) in taps.iter().enumerate() {
        let shifted = if k == 0 { x } else { tape.complex_block_left(&powers[k], x)? };
        let term = tape.complex_matmul(shifted, h)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    out.ok_or(AdError::Shape { op: "graph_filter", lhs: (0, 0), rhs: tape.shape(x) })
}

/// Full-width temporal kernel: output column `tau` is `X Gamma[:, tau]`.
pub fn temporal_conv(tape: &mut Tape, x: Var, gamma: Var) -> Result<Var, AdError> {
    tape.complex_matmul(x, gamma)
}

/// `S^0 .. S^{k-1}` of a complex operator given by its parts.
pub fn complex_powers(re: &Mat, im: &Mat, k: usize) -> Vec<Arc<ComplexBlockOp>> {
    let n = re.rows;
    let mut out = Vec::with_capacity(k);
    let (mut pr, mut pi) = (Mat::identity(n), Mat::zeros(n, n));
    for _ in 0..k {
        out.push(ComplexBlockOp::new(pr.clone(), pi.clone()));
        let exec = crate::exec::Exec::Sequential;
        let nr = pr.matmul(re, exec).zip_map(&pi.matmul(im, exec), |a, b| a - b);
        let ni = pr.matmul(im, exec).zip_map(&pi.matmul(re, exec), |a, b| a + b);
        pr = nr;
        pi = ni;
    }
    out
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Compares `backward` against central finite differences with step `h` for
/// every entry of every input. The relative error of an input is
/// `|analytic - numeric| / max(|analytic|, |numeric|)` in the 2-norm.
pub fn gradcheck<F>(inputs: &[(Mat, bool)], h: f64, build: F) -> Result<GradCheck, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let eval = |vals: &[Mat]| -> Result<f64, AdError> {
        let mut tape = Tape::new(crate::exec::Exec::Sequential);
        let vars = vals
            .iter()
            .zip(inputs)
            .map(|(m, (_, c))| if *c { tape.complex_constant(m.clone()) } else { Ok(tape.constant(m.clone())) })
            .collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };
    let mut tape = Tape::new(crate::exec::Exec::Sequential);
    let vars = inputs
        .iter()
        .map(|(m, c)| if *c { tape.complex_variable(m.clone()) } else { Ok(tape.variable(m.clone())) })
        .collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut vals: Vec<Mat> = inputs.iter().map(|(m, _)| m.clone()).collect();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zero(v);
        let mut diff = 0.0;
        let mut scale: f64 = 0.0;
        let mut num_norm = 0.0;
        for i in 0..vals[k].data.len() {
            let orig = vals[k].data[i];
            vals[k].data[i] = orig + h;
            let up = eval(&vals)?;
            vals[k].data[i] = orig - h;
            let down = eval(&vals)?;
            vals[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic.data[i] - numeric).powi(2);
            num_norm += numeric * numeric;
        }
        scale = scale.max(analytic.norm()).max(num_norm.sqrt());
        per_input.push(if scale == 0.0 { diff.sqrt() } else { diff.sqrt() / scale });
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, per_input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn crelu_examples_and_kink() {
        let mut t = Tape::new(Default::default());
        let z = t.complex_variable(Mat::from_vec(2, 2, vec![1.0, -2.0, -1.0, 3.0])).unwrap();
        let y = t.crelu(z).unwrap();
        assert_eq!(t.value(y).data, vec![1.0, 0.0, 0.0, 3.0]);
        let x = t.variable(Mat::row_vector(&[0.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data, vec![0.0]);
        let real = t.variable(Mat::scalar(1.0));
        assert!(matches!(t.crelu(real), Err(AdError::Dtype { .. })));
    }

    #[test]
    fn quadratic_and_identity_gradients() {
        let mut t = Tape::new(Default::default());
        let x = t.variable(Mat::row_vector(&[1.0, 2.0]));
        let sq = t.square(x);
        let loss = t.sum(sq);
        assert_eq!(t.backward(loss).unwrap().wrt(x).unwrap().data, vec![2.0, 4.0]);

        let mut t = Tape::new(Default::default());
        let p = t.variable(Mat::scalar(3.0));
        assert_eq!(t.backward(p).unwrap().wrt(p).unwrap().data, vec![1.0]);
        let v = t.variable(Mat::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(AdError::NonScalar((1, 2)))));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut t = Tape::new(Default::default());
        let x = t.variable(Mat::row_vector(&[0.3, -0.7]));
        let f = t.square(x);
        let g = t.sin(x);
        let h = t.add(f, g).unwrap();
        let loss = t.sum(h);
        let grad = t.backward(loss).unwrap();
        let want: Vec<f64> = [0.3_f64, -0.7].iter().map(|v| 2.0 * v + v.cos()).collect();
        for (a, b) in grad.wrt(x).unwrap().data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_and_dtype_errors() {
        let mut t = Tape::new(Default::default());
        let a = t.variable(Mat::zeros(2, 3));
        let b = t.variable(Mat::zeros(2, 2));
        assert!(matches!(t.matmul(a, b), Err(AdError::Shape { .. })));
        assert!(matches!(t.add(a, b), Err(AdError::Shape { .. })));
        let z = t.complex_variable(Mat::zeros(2, 2)).unwrap();
        assert!(matches!(t.add(z, b), Err(AdError::Dtype { .. })));
    }

    #[test]
    fn sigmoid_layer_matches_finite_differences() {
        let mut r = rng();
        let w = Mat::randn(4, 3, 1.0, &mut r);
        let x = Mat::randn(3, 2, 1.0, &mut r);
        let chk = gradcheck(&[(w, false), (x, false)], 1e-5, |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let s = t.sigmoid(z);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(chk.max_rel_error < 1e-5, "{chk:?}");
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        let mut r = rng();
        let a = Mat::randn(3, 4, 1.0, &mut r);
        let b = Mat::randn(3, 4, 1.0, &mut r);
        let row = Mat::randn(1, 4, 1.0, &mut r);
        let col = Mat::randn(3, 1, 1.0, &mut r);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AdError>>)> = vec![
            ("add-sub-mul", Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                Ok(t.sum(m))
            })),
            ("rows-cols", Box::new(|t, v| {
                let x = t.add_row(v[0], v[2])?;
                let y = t.mul_row(x, v[2])?;
                let z = t.mul_col(y, v[3])?;
                let q = t.tanh(z);
                let s = t.sum_rows(q);
                let w = t.square(s);
                Ok(t.mean(w))
            })),
            ("trig-scale", Box::new(|t, v| {
                let s = t.sin(v[0]);
                let c = t.cos(v[1]);
                let m = t.mul(s, c)?;
                let k = t.scale(m, 1.7);
                let k = t.add_scalar(k, 0.3);
                let r = t.sum_cols(k);
                let q = t.square(r);
                Ok(t.sum(q))
            })),
            ("reshape-select-cat", Box::new(|t, v| {
                let x = t.reshape(v[0], 4, 3)?;
                let s = t.select_cols(x, vec![2, 0, 2])?;
                let s = t.select_rows(s, vec![3, 1])?;
                let h = t.hcat(&[s, s])?;
                let y = t.vcat(&[h, h])?;
                let q = t.sigmoid(y);
                let q = t.square(q);
                Ok(t.sum(q))
            })),
        ];
        let inputs = vec![(a, false), (b, false), (row, false), (col, false)];
        for (name, f) in cases {
            let chk = gradcheck(&inputs, 1e-5, f).unwrap();
            assert!(chk.max_rel_error < 1e-5, "{name}: {chk:?}");
        }
    }

    #[test]
    fn complex_primitives_pass_gradcheck() {
        let mut r = rng();
        let x = Mat::randn(6, 4, 1.0, &mut r); // 6 x 2 complex
        let w = Mat::randn(2, 6, 1.0, &mut r); // 2 x 3 complex
        let y = Mat::randn(6, 4, 1.0, &mut r);
        let sre = Mat::randn(3, 3, 0.5, &mut r);
        let sim = Mat::randn(3, 3, 0.5, &mut r);
        let op = ComplexBlockOp::new(sre.clone(), sim.clone());
        let real_op = BlockOp::new(sre);
        let chk = gradcheck(&[(x, true), (w, true), (y, true)], 1e-5, |t, v| {
            let a = t.complex_matmul(v[0], v[1])?;
            let b = t.complex_block_left(&op, v[2])?;
            let c = t.complex_mul(b, v[0])?;
            let c = t.conj(c)?;
            let re = t.real_part(c)?;
            let im = t.imag_part(c)?;
            let z = t.complex(im, re)?;
            let m = t.magnitude(z)?;
            let n = t.square_norm(a)?;
            let bl = t.block_left(&real_op, v[0])?;
            let bn = t.tanh(bl);
            let s1 = t.sum(m);
            let s2 = t.mean(n);
            let s3 = t.sum(bn);
            let s = t.add(s1, s2)?;
            t.add(s, s3)
        })
        .unwrap();
        assert!(chk.max_rel_error < 1e-5, "{chk:?}");
    }

    #[test]
    fn complex_crelu_objective_gradients() {
        let mut r = rng();
        let h = Mat::randn(1, 2, 1.0, &mut r);
        let x = Mat::randn(5, 2, 1.0, &mut r);
        let chk = gradcheck(&[(h, true), (x, true)], 1e-5, |t, v| {
            let y = t.complex_matmul(v[1], v[0])?;
            let c = t.crelu(y)?;
            let n = t.square_norm(c)?;
            Ok(t.sum(n))
        })
        .unwrap();
        assert!(chk.max_rel_error < 1e-5, "{chk:?}");
    }

    fn complex_at(m: &Mat, i: usize, j: usize) -> num_complex::Complex64 {
        num_complex::Complex64::new(m.at(i, j), m.at(i, j + m.cols / 2))
    }

    #[test]
    fn graph_filter_matches_naive_sum() {
        let mut r = rng();
        let n = 3;
        let (sre, sim) = (Mat::randn(n, n, 0.4, &mut r), Mat::randn(n, n, 0.4, &mut r));
        let x = Mat::randn(n, 4, 1.0, &mut r);
        let h0 = Mat::randn(2, 2, 1.0, &mut r);
        let h1 = Mat::randn(2, 2, 1.0, &mut r);
        let powers = complex_powers(&sre, &sim, 2);
        let mut t = Tape::new(Default::default());
        let xv = t.complex_constant(x.clone()).unwrap();
        let taps = [t.complex_constant(h0.clone()).unwrap(), t.complex_constant(h1.clone()).unwrap()];
        let out = graph_filter(&mut t, &powers, xv, &taps).unwrap();
        let got = t.value(out);
        let s = |i, j| num_complex::Complex64::new(sre.at(i, j), sim.at(i, j));
        for i in 0..n {
            for f in 0..1 {
                let mut want = num_complex::Complex64::new(0.0, 0.0);
                for g in 0..2 {
                    want += complex_at(&x, i, g) * complex_at(&h0, g, f);
                    for m in 0..n {
                        want += s(i, m) * complex_at(&x, m, g) * complex_at(&h1, g, f);
                    }
                }
                assert!((complex_at(got, i, f) - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_filter_special_cases() {
        let mut r = rng();
        let x = Mat::randn(3, 4, 1.0, &mut r);
        let h0 = Mat::randn(2, 2, 1.0, &mut r);
        let h1 = Mat::randn(2, 2, 1.0, &mut r);
        // identity shift collapses powers
        let powers = complex_powers(&Mat::identity(3), &Mat::zeros(3, 3), 2);
        let mut t = Tape::new(Default::default());
        let xv = t.complex_constant(x.clone()).unwrap();
        let a = t.complex_constant(h0.clone()).unwrap();
        let b = t.complex_constant(h1.clone()).unwrap();
        let two = graph_filter(&mut t, &powers, xv, &[a, b]).unwrap();
        let hs = t.add(a, b).unwrap();
        let direct = t.complex_matmul(xv, hs).unwrap();
        assert!(t.value(two).zip_map(t.value(direct), |p, q| p - q).max_abs() < 1e-12);
        // a single tap never mixes nodes
        let one = graph_filter(&mut t, &powers, xv, &[a]).unwrap();
        let plain = t.complex_matmul(xv, a).unwrap();
        assert_eq!(t.value(one), t.value(plain));
    }

    #[test]
    fn temporal_conv_selector_and_zero() {
        let mut r = rng();
        let (n, t_len) = (4, 3);
        let x = Mat::randn(n, 2 * 2 * t_len, 1.0, &mut r); // N x 2T complex
        let mut gamma = Mat::zeros(2 * t_len, 2 * 2); // 2T x 2 complex
        *gamma.at_mut(0, 0) = 1.0;
        let mut t = Tape::new(Default::default());
        let xv = t.complex_constant(x.clone()).unwrap();
        let g = t.complex_constant(gamma).unwrap();
        let y = temporal_conv(&mut t, xv, g).unwrap();
        for i in 0..n {
            assert_eq!(complex_at(t.value(y), i, 0), complex_at(&x, i, 0));
        }
        let z = t.complex_constant(Mat::zeros(2 * t_len, 4)).unwrap();
        let y0 = temporal_conv(&mut t, xv, z).unwrap();
        assert_eq!(t.value(y0).max_abs(), 0.0);
    }

    #[test]
    fn adam_examples_and_trace() {
        let mut p = ParamSet::new();
        p.add("w", Mat::row_vector(&[1.0, -2.0]));
        let mut adam = AdamState::new(&p, 1e-3);
        adam.step(&mut p, &[Mat::zeros(1, 2)]);
        assert_eq!(p.values[0].data, vec![1.0, -2.0]);

        let mut s = ParamSet::new();
        s.add("x", Mat::scalar(0.5));
        let mut adam = AdamState::new(&s, 1e-3);
        adam.step(&mut s, &[Mat::scalar(1.0)]);
        assert!((s.values[0].data[0] - (0.5 - 1e-3)).abs() < 1e-9);

        // three steps on f(x) = (x - 3)^2 against a hand-rolled reference
        let mut q = ParamSet::new();
        q.add("x", Mat::scalar(0.0));
        let mut adam = AdamState::new(&q, 0.1);
        let (mut x, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
        for k in 1..=3 {
            let g = 2.0 * (q.values[0].data[0] - 3.0);
            adam.step(&mut q, &[Mat::scalar(g)]);
            let gr = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            x -= 0.1 * (m / (1.0 - 0.9_f64.powi(k))) / ((v / (1.0 - 0.999_f64.powi(k))).sqrt() + 1e-8);
            assert!((q.values[0].data[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let mut p = ParamSet::new();
        p.add("w", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.5]));
        p.add_complex("h", Mat::from_vec(1, 2, vec![0.25, -1.0]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(ParamSet::load(&path).unwrap(), p);
        let mut q = p.zero_like();
        q.load_into(&path).unwrap();
        assert_eq!(q, p);
        let bad = p.to_json().replace("\"version\":1", "\"version\":9");
        assert!(matches!(ParamSet::from_json(&bad), Err(CheckpointError::Header { .. })));
        let mut other = ParamSet::new();
        other.add("w", Mat::zeros(3, 3));
        assert!(matches!(other.load_into(&path), Err(CheckpointError::Mismatch(_))));
    }
}
