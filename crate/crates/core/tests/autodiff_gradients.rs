use dmqn::autodiff::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Input {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Input {
    Input {
        rows,
        cols,
        values: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Compares reverse-mode gradients of `build` with central differences of
/// the double-precision `reference` (step 1e-3).
fn check<B, R>(inputs: &[Input], build: B, reference: R)
where
    B: Fn(&mut Graph<'_>, &[Var]) -> Var,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let mut g = Graph::new(0);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.input(i.rows, i.cols, i.values.clone(), true).unwrap())
        .collect();
    let loss = build(&mut g, &vars);
    let mut point: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.iter().map(|&v| v as f64).collect()).collect();
    assert!((g.scalar(loss) as f64 - reference(&point)).abs() < 1e-4, "forward mismatch");
    g.backward(loss).unwrap();
    let h = 1e-3;
    for (k, &v) in vars.iter().enumerate() {
        let grad = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].values.len()]);
        for c in 0..grad.len() {
            let orig = point[k][c];
            point[k][c] = orig + h;
            let up = reference(&point);
            point[k][c] = orig - h;
            let down = reference(&point);
            point[k][c] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad[c] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-3, "input {k}[{c}]: autodiff {a}, finite difference {fd}");
        }
    }
}

fn mm(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softmax(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().zip(mask).map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new(0);
    let x = g.input(1, 3, vec![0.5, -2.0, 4.0], true).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient_is_two_x() {
    let mut g = Graph::new(0);
    let x = g.input(1, 1, vec![3.0], true).unwrap();
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn silu_reference_values() {
    let mut g = Graph::new(0);
    let x = g.input(1, 3, vec![0.0, 20.0, 1.0], false).unwrap();
    let y = g.silu(x);
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 20.0).abs() < 1e-6);
    assert!((v[2] as f64 - 0.731_058_578_630_005).abs() < 1e-6);
}

#[test]
fn layer_norm_reference_values() {
    let mut g = Graph::new(0);
    let x = g.input(2, 2, vec![3.0, 3.0, 1.0, -1.0], false).unwrap();
    let gain = g.input(1, 2, vec![1.0, 1.0], false).unwrap();
    let offset = g.input(1, 2, vec![0.0, 0.0], false).unwrap();
    let y = g.layer_norm(x, gain, offset, 1e-12).unwrap();
    let v = g.value(y);
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] - 1.0).abs() < 1e-6 && (v[3] + 1.0).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row: Vec<f32> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut g = Graph::new(0);
    let x = g.input(1, 7, row.clone(), false).unwrap();
    let gain = g.input(1, 7, vec![1.0; 7], false).unwrap();
    let offset = g.input(1, 7, vec![0.0; 7], false).unwrap();
    let y = g.layer_norm(x, gain, offset, 1e-5).unwrap();
    let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    let mean = r.iter().sum::<f64>() / 7.0;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
    for (got, x) in g.value(y).iter().zip(&r) {
        assert!((*got as f64 - (x - mean) / (var + 1e-5).sqrt()).abs() < 1e-5);
    }
}

#[test]
fn dense_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        random_input(&mut rng, 3, 4),
        random_input(&mut rng, 4, 5),
        random_input(&mut rng, 1, 5),
        random_input(&mut rng, 1, 5),
        random_input(&mut rng, 1, 5),
        random_input(&mut rng, 3, 5),
    ];
    check(
        &inputs,
        |g, v| {
            let z = g.matmul(v[0], v[1]).unwrap();
            let z = g.add_row(z, v[2]).unwrap();
            let z = g.silu(z);
            let n = g.layer_norm(z, v[3], v[4], 1e-5).unwrap();
            let p = g.mul(n, v[5]).unwrap();
            g.sum(p)
        },
        |p| {
            let z = mm(&p[0], 3, 4, &p[1], 5);
            let mut total = 0.0;
            for r in 0..3 {
                let row: Vec<f64> = (0..5).map(|c| silu(z[r * 5 + c] + p[2][c])).collect();
                let mean = row.iter().sum::<f64>() / 5.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                for c in 0..5 {
                    let n = (row[c] - mean) / (var + 1e-5).sqrt() * p[3][c] + p[4][c];
                    total += n * p[5][r * 5 + c];
                }
            }
            total
        },
    );
}

#[test]
fn masked_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mask = [true, false, true, true];
    let inputs = [
        random_input(&mut rng, 1, 3),
        random_input(&mut rng, 4, 3),
        random_input(&mut rng, 4, 3),
    ];
    check(
        &inputs,
        |g, v| {
            let l = g.matmul_bt(v[0], v[1]).unwrap();
            let l = g.scale(l, 0.7);
            let w = g.masked_softmax(l, &mask).unwrap();
            let o = g.matmul(w, v[2]).unwrap();
            let s = g.sum(o);
            let p = g.sigmoid(s);
            g.logloss(p, 1.0, 1e-7).unwrap()
        },
        |p| {
            let logits: Vec<f64> = (0..4)
                .map(|k| 0.7 * (0..3).map(|c| p[0][c] * p[1][k * 3 + c]).sum::<f64>())
                .collect();
            let w = softmax(&logits, &mask);
            let s: f64 = (0..4).map(|k| w[k] * (0..3).map(|c| p[2][k * 3 + c]).sum::<f64>()).sum();
            -(1.0 / (1.0 + (-s).exp())).ln()
        },
    );
}

#[test]
fn layout_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [
        random_input(&mut rng, 5, 2),
        random_input(&mut rng, 3, 4),
        random_input(&mut rng, 1, 5),
        random_input(&mut rng, 3, 3),
    ];
    let rows = [4, 0, 4];
    let mask = [true, false, true];
    check(
        &inputs,
        |g, v| {
            let t = g.gather(v[0], &rows).unwrap();
            let s = g.slice_cols(v[1], 1, 2).unwrap();
            let c = g.concat_cols(&[t, s]).unwrap();
            let c = g.shift(c, &[0.1, -0.2, 0.3, 0.0, 0.5, 0.5, 0.5, 0.5, -1.0, 0.0, 1.0, 2.0]).unwrap();
            let x = g.matmul_bt(c, c).unwrap();
            let x = g.add_rel_bias(x, v[2]).unwrap();
            let x = g.add(x, v[3]).unwrap();
            let x = g.silu(x);
            let x = g.mask_cols(x, &mask).unwrap();
            let x = g.mask_rows(x, &mask).unwrap();
            let both = g.concat_rows(&[x, v[3]]).unwrap();
            let m = g.mean_rows(both);
            let sq = g.mul(m, m).unwrap();
            g.sum(sq)
        },
        |p| {
            let shift = [0.1, -0.2, 0.3, 0.0, 0.5, 0.5, 0.5, 0.5, -1.0, 0.0, 1.0, 2.0];
            let c: Vec<f64> = (0..3)
                .flat_map(|r| {
                    let t = &p[0][rows[r] * 2..rows[r] * 2 + 2];
                    let s = &p[1][r * 4 + 1..r * 4 + 3];
                    [t[0], t[1], s[0], s[1]].into_iter().enumerate().map(move |(j, v)| v + shift[r * 4 + j])
                })
                .collect();
            let mut x = [0.0; 9];
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..4).map(|j| c[a * 4 + j] * c[b * 4 + j]).sum();
                    let off = (b as isize - a as isize).clamp(-2, 2) + 2;
                    let v = silu(dot + p[2][off as usize] + p[3][a * 3 + b]);
                    x[a * 3 + b] = if mask[a] && mask[b] { v } else { 0.0 };
                }
            }
            (0..3)
                .map(|col| {
                    let m = (0..3).map(|r| x[r * 3 + col] + p[3][r * 3 + col]).sum::<f64>() / 6.0;
                    m * m
                })
                .sum()
        },
    );
}

#[test]
fn straight_through_pool_matches_relaxed_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (l, w, d) = (6, 3, 2);
    let inputs = [random_input(&mut rng, l, w), random_input(&mut rng, l, d), random_input(&mut rng, w, d)];
    let mut g = Graph::new(0);
    let s = g.input(l, w, inputs[0].values.clone(), false).unwrap();
    let p = g.softmax(s);
    let indices: Vec<usize> = g.value(p).chunks_exact(w).map(dmqn::tensor::argmax).collect();
    let pbar: Vec<f64> = g.value(p).iter().map(|&v| v as f64).collect();
    check(
        &inputs,
        |g, v| {
            let p = g.softmax(v[0]);
            let r = g.st_pool(p, v[1], &indices, 1e-9).unwrap();
            let m = g.mul(r, v[2]).unwrap();
            g.sum(m)
        },
        |q| {
            let mut total = 0.0;
            for k in (0..w).filter(|k| indices.contains(k)) {
                let mut num = vec![0.0; d];
                let mut den = 0.0;
                for i in 0..l {
                    let row: Vec<f64> = q[0][i * w..(i + 1) * w].to_vec();
                    let p = softmax(&row, &[true; 3]);
                    let s = f64::from(u8::from(indices[i] == k)) + p[k] - pbar[i * w + k];
                    den += s;
                    for c in 0..d {
                        num[c] += s * q[1][i * d + c];
                    }
                }
                total += (0..d).map(|c| num[c] / den * q[2][k * d + c]).sum::<f64>();
            }
            total
        },
    );
}
