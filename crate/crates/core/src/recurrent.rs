//! Graph-convolutional GRU over the input window and the spatial branch
//! projection.

use crate::autodiff::{TensorError, Var};
use crate::graph::{aggregate, GraphConv};

/// One recurrent layer: the update/reset gates share a transform producing
/// `2F` columns (`z` first, then `r`); the candidate has its own.
#[derive(Clone, Copy)]
pub struct GruLayer<'t> {
    pub gates: GraphConv<'t>,
    pub candidate: GraphConv<'t>,
}

impl GruLayer<'_> {
    pub fn hidden(&self) -> usize {
        self.candidate.out_features()
    }

    pub fn input_features(&self) -> usize {
        self.candidate.in_features() - self.hidden()
    }
}

/// Intermediate values of one update, kept for inspection.
#[derive(Clone, Copy)]
pub struct GruStep<'t> {
    pub z: Var<'t>,
    pub r: Var<'t>,
    pub candidate: Var<'t>,
    pub h: Var<'t>,
}

/// Affine map from the last hidden state to the `m·2` outputs of each node.
#[derive(Clone, Copy)]
pub struct Projection<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> Projection<'t> {
    /// `rows [R × in] → [R × out]`.
    pub fn apply(&self, rows: Var<'t>) -> Result<Var<'t>, TensorError> {
        let r = rows.shape()[0];
        rows.matmul(self.w)?.add(self.b.tile(r)?)
    }
}

/// One update for node-major `[N × B × ·]` activations, with `agg_x` the
/// already aggregated input `S · x_t`:
///
/// ```text
/// z = σ(G([x, h]; W_z))   r = σ(G([x, h]; W_r))
/// ĥ = tanh(G([x, r⊙h]; W_ĥ))
/// h' = z⊙h + (1 − z)⊙ĥ
/// ```
pub fn gru_update<'t>(
    layer: &GruLayer<'t>,
    support: Var<'t>,
    agg_x: Var<'t>,
    h: Var<'t>,
) -> Result<GruStep<'t>, TensorError> {
    let f = layer.hidden();
    let agg_h = aggregate(support, h)?;
    let zr = layer.gates.apply(agg_x.concat(agg_h)?)?.sigmoid();
    let z = zr.slice_last(0, f)?;
    let r = zr.slice_last(f, f)?;
    let agg_rh = aggregate(support, r.mul(h)?)?;
    let candidate = layer.candidate.apply(agg_x.concat(agg_rh)?)?.tanh();
    let h = z.blend(h, candidate)?;
    Ok(GruStep { z, r, candidate, h })
}

/// Single-snapshot form: `x_t [N × C]`, `h_prev [N × F]`, support `[N × N]`.
/// The layer must be bound for batch size 1.
pub fn gru_step<'t>(
    x_t: Var<'t>,
    h_prev: Var<'t>,
    layer: &GruLayer<'t>,
    support: Var<'t>,
) -> Result<GruStep<'t>, TensorError> {
    let (n, c) = (x_t.shape()[0], x_t.shape()[1]);
    let f = layer.hidden();
    if c != layer.input_features() || h_prev.shape() != [n, f] {
        return Err(TensorError::ShapeMismatch {
            op: "gru_step",
            left: x_t.shape(),
            right: h_prev.shape(),
        });
    }
    let agg_x = aggregate(support, x_t.reshape(&[n, 1, c])?)?;
    let step = gru_update(layer, support, agg_x, h_prev.reshape(&[n, 1, f])?)?;
    let flat = |v: Var<'t>| v.reshape(&[n, f]);
    Ok(GruStep {
        z: flat(step.z)?,
        r: flat(step.r)?,
        candidate: flat(step.candidate)?,
        h: flat(step.h)?,
    })
}

/// Unrolls the stacked layers over `x [N × T × B × C]` from `h₀ = 0` and
/// projects the top layer's final state: returns `[N × B × out]`.
pub fn encode_batch<'t>(
    x: Var<'t>,
    layers: &[GruLayer<'t>],
    support: Var<'t>,
    projection: &Projection<'t>,
) -> Result<Var<'t>, TensorError> {
    let shape = x.shape();
    let (n, steps, batch, c) = match shape[..] {
        [n, t, b, c] if t > 0 => (n, t, b, c),
        _ => {
            return Err(TensorError::Precondition(format!(
                "encoder input must be a non-empty [N, T, B, C] sequence, got {shape:?}"
            )))
        }
    };
    let tape = x.tape();
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| TensorError::Precondition("encoder needs at least one layer".into()))?;
    if first.input_features() != c {
        return Err(TensorError::ShapeMismatch {
            op: "encode_sequence",
            left: shape,
            right: vec![first.input_features()],
        });
    }

    // Aggregating the raw inputs once covers every step of the first layer.
    let agg_all = aggregate(support, x.reshape(&[n, steps * batch, c])?)?.reshape(&[n, steps, batch, c])?;
    let mut inputs: Vec<Var<'t>> = (0..steps)
        .map(|t| agg_all.select(1, t))
        .collect::<Result<_, _>>()?;
    let mut aggregated = true;
    let mut h = None;
    for layer in std::iter::once(first).chain(rest) {
        let f = layer.hidden();
        let mut state = tape.constant(crate::autodiff::Tensor::zeros(&[n, batch, f]));
        let mut outputs = Vec::with_capacity(steps);
        for &input in &inputs {
            let agg_x = if aggregated { input } else { aggregate(support, input)? };
            state = gru_update(layer, support, agg_x, state)?.h;
            outputs.push(state);
        }
        inputs = outputs;
        aggregated = false;
        h = Some(state);
    }
    let h = h.expect("at least one layer");
    let f = h.shape()[2];
    let out = projection.apply(h.reshape(&[n * batch, f])?)?;
    let width = out.shape()[1];
    out.reshape(&[n, batch, width])
}

/// Single-window form: `x_seq [T × N × C]` to `y_s [N × out]`. Layers must be
/// bound for batch size 1.
pub fn encode_sequence<'t>(
    x_seq: Var<'t>,
    layers: &[GruLayer<'t>],
    support: Var<'t>,
    projection: &Projection<'t>,
) -> Result<Var<'t>, TensorError> {
    let shape = x_seq.shape();
    let (steps, n, c) = match shape[..] {
        [t, n, c] if t > 0 => (t, n, c),
        _ => {
            return Err(TensorError::Precondition(format!(
                "sequence must be a non-empty [T, N, C] tensor, got {shape:?}"
            )))
        }
    };
    let x = x_seq.permute(&[1, 0, 2])?.reshape(&[n, steps, 1, c])?;
    let y = encode_batch(x, layers, support, projection)?;
    let width = y.shape()[2];
    y.reshape(&[n, width])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{check_gradients, Tape, Tensor};
    use crate::graph::{adaptive_adjacency, with_self_loops};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    /// NAPL layer bound on `tape` from pools `[w_z, w_r, w_h, b_z, b_r, b_h]`.
    fn napl_layer<'t>(e: Var<'t>, pools: &[Var<'t>], batch: usize) -> GruLayer<'t> {
        let w_zr = pools[0].concat(pools[1]).unwrap();
        let b_zr = pools[3].concat(pools[4]).unwrap();
        GruLayer {
            gates: GraphConv::napl(e, w_zr, b_zr, batch).unwrap(),
            candidate: GraphConv::napl(e, pools[2], pools[5], batch).unwrap(),
        }
    }

    fn pools(rng: &mut ChaCha8Rng, d: usize, c: usize, f: usize, scale: f64) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..3).map(|_| random(rng, &[d, c + f, f], scale)).collect();
        out.extend((0..3).map(|_| random(rng, &[d, f], scale)));
        out
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn scalar_gru_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            // N=1, F=1, C=2, d=1: support is 2, Θ = e·W
            let e = rng.gen_range(-1.0..1.0);
            let p: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (x0, x1, hp) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            let tape = Tape::inference();
            let c = |v: &[f64], s: &[usize]| tape.constant(Tensor::new(s.to_vec(), v.to_vec()).unwrap());
            let ev = c(&[e], &[1, 1]);
            let ps = [
                c(&p[0..3], &[1, 3, 1]),
                c(&p[3..6], &[1, 3, 1]),
                c(&p[6..9], &[1, 3, 1]),
                c(&p[9..10], &[1, 1]),
                c(&p[10..11], &[1, 1]),
                c(&p[11..12], &[1, 1]),
            ];
            let layer = napl_layer(ev, &ps, 1);
            let support = with_self_loops(adaptive_adjacency(ev).unwrap()).unwrap();
            let step = gru_step(c(&[x0, x1], &[1, 2]), c(&[hp], &[1, 1]), &layer, support).unwrap();

            let g = |w: &[f64], b: f64, h: f64| e * (2.0 * (x0 * w[0] + x1 * w[1] + h * w[2])) + e * b;
            let z = sigmoid(g(&p[0..3], p[9], hp));
            let r = sigmoid(g(&p[3..6], p[10], hp));
            let cand = g(&p[6..9], p[11], r * hp).tanh();
            let h = z * hp + (1.0 - z) * cand;
            assert!((step.h.item() - h).abs() < 1e-12);
            assert!((step.z.item() - z).abs() < 1e-12);
            assert!(step.z.item() > 0.0 && step.z.item() < 1.0);
            assert!(step.r.item() > 0.0 && step.r.item() < 1.0);
            let (lo, hi) = (hp.min(cand), hp.max(cand));
            assert!(step.h.item() >= lo - 1e-15 && step.h.item() <= hi + 1e-15);
        }
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, c, f) = (3, 2, 4);
        let tape = Tape::inference();
        let e = tape.constant(Tensor::full(&[n, 1], 1.0));
        let mut p = pools(&mut rng, 1, c, f, 1.0);
        p[0] = Tensor::zeros(&[1, c + f, f]);
        p[3] = Tensor::full(&[1, f], 800.0);
        let vars: Vec<Var> = p.iter().map(|t| tape.leaf(t)).collect();
        let layer = napl_layer(e, &vars, 1);
        let h_prev = random(&mut rng, &[n, f], 1.0);
        let x = random(&mut rng, &[n, c], 1.0);
        let support = tape.constant(Tensor::from_fn(&[n, n], |k| if k % (n + 1) == 0 { 2.0 } else { 0.0 }));
        let step = gru_step(tape.leaf(&x), tape.leaf(&h_prev), &layer, support).unwrap();
        assert_eq!(step.h.to_tensor().data(), h_prev.data());
    }

    #[test]
    fn closed_update_gate_gives_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, c, f) = (3, 2, 4);
        let tape = Tape::inference();
        let e = tape.constant(Tensor::full(&[n, 1], 1.0));
        let mut p = pools(&mut rng, 1, c, f, 1.0);
        p[0] = Tensor::zeros(&[1, c + f, f]);
        p[3] = Tensor::full(&[1, f], -800.0);
        let vars: Vec<Var> = p.iter().map(|t| tape.leaf(t)).collect();
        let layer = napl_layer(e, &vars, 1);
        let support = with_self_loops(tape.constant(Tensor::full(&[n, n], 1.0 / n as f64))).unwrap();
        let x = random(&mut rng, &[n, c], 1.0);
        let step = gru_step(tape.leaf(&x), tape.constant(Tensor::zeros(&[n, f])), &layer, support).unwrap();
        assert_eq!(step.h.value(), step.candidate.value());
        assert!(step.h.value().iter().all(|v| v.abs() < 1.0));
    }

    fn encoder_inputs(seed: u64, n: usize, c: usize, f: usize, out: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = vec![random(&mut rng, &[n, 2], 1.0), random(&mut rng, &[n, 2], 1.0)];
        t.extend(pools(&mut rng, 2, c, f, 0.7));
        t.push(random(&mut rng, &[f, out], 0.7));
        t.push(random(&mut rng, &[out], 0.7));
        t
    }

    fn encode_with<'t>(v: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let support = with_self_loops(adaptive_adjacency(v[0])?)?;
        let layer = napl_layer(v[1], &v[2..8], 1);
        let projection = Projection { w: v[8], b: v[9] };
        encode_sequence(x, &[layer], support, &projection)
    }

    #[test]
    fn hidden_state_stays_inside_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, c, f) = (3, 2, 5);
        let tape = Tape::inference();
        let e = tape.leaf(&random(&mut rng, &[n, 2], 1.0));
        let p: Vec<Var> = pools(&mut rng, 2, c, f, 1.0).iter().map(|t| tape.leaf(t)).collect();
        let layer = napl_layer(e, &p, 1);
        let support = with_self_loops(adaptive_adjacency(e).unwrap()).unwrap();
        let mut h = tape.constant(Tensor::zeros(&[n, f]));
        for _ in 0..20 {
            let x = tape.leaf(&random(&mut rng, &[n, c], 2.0));
            let step = gru_step(x, h, &layer, support).unwrap();
            let (hp, hn, cand) = (h.value(), step.h.value(), step.candidate.value());
            for k in 0..hn.len() {
                assert!(hn[k].abs() < 1.0);
                assert!(hn[k] >= hp[k].min(cand[k]) - 1e-15 && hn[k] <= hp[k].max(cand[k]) + 1e-15);
            }
            h = step.h;
        }
    }

    #[test]
    fn single_step_sequence_is_one_update_plus_projection() {
        let (n, c, f, out) = (3, 2, 4, 6);
        let inputs = encoder_inputs(5, n, c, f, out);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[1, n, c], 1.0);
        let tape = Tape::inference();
        let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let y = encode_with(&v, tape.leaf(&x)).unwrap();

        let support = with_self_loops(adaptive_adjacency(v[0]).unwrap()).unwrap();
        let layer = napl_layer(v[1], &v[2..8], 1);
        let x0 = tape.leaf(&x.clone().reshape(&[n, c]).unwrap());
        let h = gru_step(x0, tape.constant(Tensor::zeros(&[n, f])), &layer, support).unwrap().h;
        let want = Projection { w: v[8], b: v[9] }.apply(h).unwrap();
        assert_eq!(y.value(), want.value());
    }

    #[test]
    fn zero_inputs_and_biases_give_projection_bias() {
        let (n, c, f, out) = (3, 2, 4, 6);
        let mut inputs = encoder_inputs(7, n, c, f, out);
        for b in &mut inputs[5..8] {
            *b = Tensor::zeros(b.shape());
        }
        let tape = Tape::inference();
        let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let y = encode_with(&v, tape.constant(Tensor::zeros(&[4, n, c]))).unwrap();
        let bias = inputs[9].data();
        for row in y.value().chunks(out) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn longer_constant_input_changes_output() {
        let (n, c, f, out) = (3, 2, 4, 6);
        let inputs = encoder_inputs(8, n, c, f, out);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frame = random(&mut rng, &[n, c], 1.0);
        let repeat = |t: usize| Tensor::from_fn(&[t, n, c], |k| frame.data()[k % (n * c)]);
        let tape = Tape::inference();
        let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let short = encode_with(&v, tape.leaf(&repeat(3))).unwrap().value();
        let long = encode_with(&v, tape.leaf(&repeat(6))).unwrap().value();
        assert_ne!(short, long);
    }

    #[test]
    fn unrolled_gradients_pass_check() {
        let (n, c, f, out) = (3, 2, 3, 4);
        let mut inputs = encoder_inputs(10, n, c, f, out);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        inputs.push(random(&mut rng, &[3, n, c], 1.5));
        inputs.push(random(&mut rng, &[n, out], 1.0));
        let report = check_gradients(
            &inputs,
            |_, v| Ok(encode_with(v, v[10])?.mul(v[11])?.sum()),
            1e-5,
        )
        .unwrap();
        assert!(report.overall() < 1e-4, "{:?}", report.max_relative_error);
    }

    #[test]
    fn batched_encoder_matches_per_window_runs() {
        let (n, c, f, out, steps, batch) = (3, 2, 4, 5, 4, 3);
        let inputs = encoder_inputs(12, n, c, f, out);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let windows: Vec<Tensor> = (0..batch).map(|_| random(&mut rng, &[steps, n, c], 1.0)).collect();
        let tape = Tape::inference();
        let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        // [N, T, B, C]
        let stacked = Tensor::from_fn(&[n, steps, batch, c], |k| {
            let (i, rest) = (k / (steps * batch * c), k % (steps * batch * c));
            let (t, rest) = (rest / (batch * c), rest % (batch * c));
            let (b, ch) = (rest / c, rest % c);
            windows[b].at(&[t, i, ch])
        });
        let support = with_self_loops(adaptive_adjacency(v[0]).unwrap()).unwrap();
        let layer = napl_layer(v[1], &v[2..8], batch);
        let y = encode_batch(tape.leaf(&stacked), &[layer], support, &Projection { w: v[8], b: v[9] })
            .unwrap()
            .to_tensor();
        for (b, w) in windows.iter().enumerate() {
            let single = encode_with(&v, tape.leaf(w)).unwrap().to_tensor();
            for i in 0..n {
                for k in 0..out {
                    assert!((y.at(&[i, b, k]) - single.at(&[i, k])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let tape = Tape::inference();
        let (n, c, f, out) = (2, 2, 2, 2);
        let inputs = encoder_inputs(14, n, c, f, out);
        let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let x = tape.constant(Tensor::zeros(&[n, c]));
        assert!(encode_with(&v, x).is_err());
    }
}
