//! Randomized finite-difference checks of every differentiable op and of
//! the whole adapted transformer, in `f64`, against central differences
//! extrapolated to zero step. Each check reports the largest
//! per-coordinate relative error (see [`max_relative_error`]).

use crate::adapters::{inject, AdapterSet, AdapterSpec, Gate};
use crate::autodiff::{extrapolate, extrapolated_diff_check, max_relative_error, Graph, Segment, Tensor, Var};
use crate::backbone::{Backbone, Batch, ForwardCtx, ModelConfig};
use crate::error::Result;
use crate::objectives::gate_loss;
use crate::rng::Rng;

/// Initial step of the extrapolated central differences. Small gradients
/// (deep attention weights, products of small inputs) reach 1e-9, below the
/// rounding noise (≈1e-16/h) of any single small-step difference.
pub const STEP: f64 = 1e-2;
pub const TOLERANCE: f64 = 1e-4;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Weighted sum of squares, so no output coordinate has a trivial gradient.
fn probe(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w);
    let p = g.scale_mul(wv, y)?;
    let sq = g.scale_mul(p, y)?;
    Ok(g.sum(sq))
}

/// One check per differentiable op, on shapes and values drawn from `seed`.
pub fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(seed);
    let (m, k, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(3));
    let a = rand_t(&mut rng, &[m, k]);
    let b = rand_t(&mut rng, &[k, n]);
    let bt = rand_t(&mut rng, &[n, k]);
    let wmn = rand_t(&mut rng, &[m, n]);
    let wmk = rand_t(&mut rng, &[m, k]);
    let row = rand_t(&mut rng, &[k]);
    let gain = rand_t(&mut rng, &[k]);
    let bias = rand_t(&mut rng, &[k]);
    let targets: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
    let c = rng.uniform(-2.0, 2.0);
    let mut out = Vec::new();
    let mut check = |name, f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>| -> Result<()> {
        out.push((name, extrapolated_diff_check(|g: &mut Graph<f64>, v| f(g, v), x, STEP)?));
        Ok(())
    };

    check("matmul", &|g, v| {
        let bv = g.constant(&b);
        let y = g.matmul(v, bv)?;
        probe(g, y, &wmn)
    }, &a)?;
    check("matmul (right operand)", &|g, v| {
        let av = g.constant(&a);
        let y = g.matmul(av, v)?;
        probe(g, y, &wmn)
    }, &b)?;
    check("matmul_nt", &|g, v| {
        let bv = g.constant(&bt);
        let y = g.matmul_nt(v, bv)?;
        probe(g, y, &wmn)
    }, &a)?;
    check("matmul_nt (right operand)", &|g, v| {
        let av = g.constant(&a);
        let y = g.matmul_nt(av, v)?;
        probe(g, y, &wmn)
    }, &bt)?;
    check("add (broadcast row)", &|g, v| {
        let av = g.constant(&a);
        let y = g.add(av, v)?;
        probe(g, y, &wmk)
    }, &row)?;
    check("scale_mul", &|g, v| {
        let av = g.constant(&a);
        let y = g.scale_mul(v, av)?;
        probe(g, y, &wmk)
    }, &a)?;
    check("scale", &|g, v| {
        let y = g.scale(v, c);
        probe(g, y, &wmk)
    }, &a)?;
    check("softmax (rows)", &|g, v| {
        let y = g.softmax(v, 1)?;
        probe(g, y, &wmk)
    }, &a)?;
    check("softmax (columns)", &|g, v| {
        let y = g.softmax(v, 0)?;
        probe(g, y, &wmk)
    }, &a)?;
    let k_ln = k.max(2);
    let x_ln = rand_t(&mut rng, &[m, k_ln]);
    let w_ln = rand_t(&mut rng, &[m, k_ln]);
    let g_ln = rand_t(&mut rng, &[k_ln]);
    let b_ln = rand_t(&mut rng, &[k_ln]);
    check("layer_norm", &|g, v| {
        let gv = g.constant(&g_ln);
        let bv = g.constant(&b_ln);
        let y = g.layer_norm(v, gv, bv, 1e-5)?;
        probe(g, y, &w_ln)
    }, &x_ln)?;
    check("layer_norm (gain)", &|g, v| {
        let xv = g.constant(&x_ln);
        let bv = g.constant(&b_ln);
        let y = g.layer_norm(xv, v, bv, 1e-5)?;
        probe(g, y, &w_ln)
    }, &g_ln)?;
    check("layer_norm (bias)", &|g, v| {
        let xv = g.constant(&x_ln);
        let gv = g.constant(&g_ln);
        let y = g.layer_norm(xv, gv, v, 1e-5)?;
        probe(g, y, &w_ln)
    }, &b_ln)?;
    let _ = (gain, bias);
    check("gelu", &|g, v| {
        let y = g.gelu(v);
        probe(g, y, &wmk)
    }, &a)?;
    check("cross_entropy", &|g, v| g.cross_entropy(v, &targets, usize::MAX), &a)?;
    let ids: Vec<usize> = (0..m + 1).map(|_| rng.below(m)).collect();
    let w_emb = rand_t(&mut rng, &[ids.len(), k]);
    check("embedding", &|g, v| {
        let y = g.embedding(v, &ids)?;
        probe(g, y, &w_emb)
    }, &a)?;
    let (s0, s1) = if k > 1 { (rng.below(k - 1), k) } else { (0, 1) };
    let w_slice = rand_t(&mut rng, &[m, s1 - s0]);
    check("slice_cols", &|g, v| {
        let y = g.slice_cols(v, s0, s1)?;
        probe(g, y, &w_slice)
    }, &a)?;
    let w_rep = rand_t(&mut rng, &[m, 3 * k]);
    check("repeat_cols", &|g, v| {
        let y = g.repeat_cols(v, 3)?;
        probe(g, y, &w_rep)
    }, &a)?;
    let w_cat = rand_t(&mut rng, &[2 * m, k]);
    check("concat_rows", &|g, v| {
        let av = g.constant(&wmk);
        let y = g.concat_rows(&[v, av])?;
        probe(g, y, &w_cat)
    }, &a)?;
    let w_rs = rand_t(&mut rng, &[m, 1]);
    check("row_sum", &|g, v| {
        let y = g.row_sum(v)?;
        probe(g, y, &w_rs)
    }, &a)?;
    check("sum", &|g, v| {
        let y = g.gelu(v);
        Ok(g.sum(y))
    }, &a)?;
    check("mean", &|g, v| {
        let y = g.gelu(v);
        Ok(g.mean(y))
    }, &a)?;

    let heads = 1 + rng.below(2);
    let d = heads * (1 + rng.below(3));
    let len0 = 1 + rng.below(3);
    let len1 = 1 + rng.below(3);
    let rows = len0 + len1;
    let segs = [Segment { start: 0, len: len0 }, Segment { start: len0, len: len1 }];
    let q = rand_t(&mut rng, &[rows, d]);
    let kk = rand_t(&mut rng, &[rows, d]);
    let vv = rand_t(&mut rng, &[rows, d]);
    let w_att = rand_t(&mut rng, &[rows, d]);
    for (name, which) in [("causal_attention (q)", 0), ("causal_attention (k)", 1), ("causal_attention (v)", 2)] {
        let x = [&q, &kk, &vv][which];
        check(name, &|g, v| {
            let mut parts = [g.constant(&q), g.constant(&kk), g.constant(&vv)];
            parts[which] = v;
            let y = g.causal_attention(parts[0], parts[1], parts[2], heads, &segs)?;
            probe(g, y, &w_att)
        }, x)?;
    }
    Ok(out)
}

fn model_loss(model: &Backbone<f64>, set: &AdapterSet<f64>, batch: &Batch, targets: &[usize]) -> Result<(f64, crate::autodiff::Gradients<f64>)> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval(Some(set));
    let logits = model.forward(&mut g, batch, &mut ctx)?;
    let task = g.cross_entropy(logits, targets, usize::MAX)?;
    let gate = gate_loss(&mut g, &ctx.router_logits.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
    let half = g.scale(gate, 0.5);
    let total = g.add(task, half)?;
    Ok((g.scalar_value(total), g.backward(total)?))
}

/// Result of [`model_errors`].
#[derive(Debug)]
pub struct ModelCheck {
    /// Worst relative error per tensor.
    pub relative: Vec<(String, f64)>,
    /// Largest |gradient|, analytic or numeric, over key-projection biases.
    /// Their true gradient is zero (attention is invariant to shifting all
    /// scores of a query), so a relative error there only measures noise.
    pub shift_invariant_abs: f64,
}

/// The full adapted transformer (softmax or equal-share gate, random
/// backbone, adapters and routers) under task loss plus gate loss. Checks
/// `coords` random coordinates of every backbone and adapter tensor against
/// central differences extrapolated to zero step.
pub fn model_errors(seed: u64, coords: usize) -> Result<ModelCheck> {
    let mut rng = Rng::new(seed);
    let heads = 1 + rng.below(2);
    let cfg = ModelConfig {
        vocab_size: 7 + rng.below(5),
        d_model: 4 * heads,
        n_layers: 1 + rng.below(2),
        n_heads: heads,
        d_ff: 6,
        max_seq_len: 8,
    };
    let mut model = Backbone::<f64>::new(cfg, &mut rng)?;
    // O(1) weights: the default init leaves attention near-uniform and layer
    // norms near-degenerate, where finite differences lose their accuracy.
    for (_, t) in model.named_params_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let gate = if rng.bernoulli(0.5) { Gate::Softmax } else { Gate::EqualShare };
    let mut set = inject(&model, &AdapterSpec::molora(2 + rng.below(2), 2, gate), &mut rng)?;
    for (_, t) in set.named_params_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    let seqs: Vec<Vec<usize>> = (0..2).map(|_| (0..2 + rng.below(3)).map(|_| rng.below(cfg.vocab_size)).collect()).collect();
    let batch = Batch::new(&seqs);
    let targets: Vec<usize> = (0..batch.rows()).map(|_| rng.below(cfg.vocab_size)).collect();
    let (_, grads) = model_loss(&model, &set, &batch, &targets)?;

    let mut out = ModelCheck { relative: Vec::new(), shift_invariant_abs: 0.0 };
    let n_backbone = model.named_params().len();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).chain(set.named_params().into_iter().map(|(n, _)| n)).collect();
    for (ti, name) in names.iter().enumerate() {
        let (id, numel) = if ti < n_backbone {
            let p = &model.named_params()[ti].1;
            (p.id(), p.numel())
        } else {
            let p = &set.named_params()[ti - n_backbone].1;
            (p.id(), p.numel())
        };
        let full = grads.of_param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let picks: Vec<usize> = (0..coords.min(numel)).map(|_| rng.below(numel)).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &picks {
            let at = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut s = set.clone();
                if ti < n_backbone {
                    m.named_params_mut()[ti].1.data_mut()[i] += delta;
                } else {
                    s.named_params_mut()[ti - n_backbone].1.data_mut()[i] += delta;
                }
                Ok(model_loss(&m, &s, &batch, &targets)?.0)
            };
            numeric.push(extrapolate(|h| Ok((at(h)? - at(-h)?) / (2.0 * h)), STEP)?);
            analytic.push(full[i]);
        }
        if name.ends_with("k_proj.bias") {
            let worst = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
            out.shift_invariant_abs = out.shift_invariant_abs.max(worst);
        } else {
            out.relative.push((name.clone(), max_relative_error(&analytic, &numeric)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn every_op_matches_finite_differences(seed in any::<u64>()) {
            for (op, err) in op_errors(seed).unwrap() {
                prop_assert!(err < TOLERANCE, "{op}: {err}");
            }
        }
    }

    #[test]
    fn adapted_transformer_matches_finite_differences() {
        for seed in 0..10 {
            let check = model_errors(seed, 3).unwrap();
            for (name, err) in check.relative {
                assert!(err < TOLERANCE, "seed {seed} {name}: {err}");
            }
            assert!(check.shift_invariant_abs < 1e-9, "seed {seed}: {}", check.shift_invariant_abs);
        }
    }
}
