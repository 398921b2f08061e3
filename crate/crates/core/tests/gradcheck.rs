//! Finite-difference checks for every op in the catalog and for a full tiny
//! encoder, all in f64.

use dtqa_core::gradcheck::{check_op, fd_gradients, max_scaled_rel_err, probe_tensor, REL_TOL};
use dtqa_core::graph::{Graph, NodeId};
use dtqa_core::rng::StreamRng;
use dtqa_core::tensor::Tensor;
use dtqa_core::transformer::{span_ce_loss, Mode, ModelConfig, StandardModel};
use dtqa_core::Result;

/// Collapse any node to a scalar through a fixed random weighting, so probes
/// exercise the whole output surface.
fn weigh(g: &mut Graph<f64>, node: NodeId, seed: u64) -> Result<NodeId> {
    if g.value(node).is_scalar() {
        return Ok(node);
    }
    let n = g.value(node).numel();
    let flat = g.reshape(node, &[1, n])?;
    let w = g.input(probe_tensor(&[n, 1], seed, 1.0));
    let s = g.matmul(flat, w)?;
    g.reshape(s, &[])
}

fn assert_op_ok(
    name: &str,
    params: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
) {
    let err = check_op(params, build).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err < REL_TOL, "{name}: max scaled rel err {err}");
}

#[test]
fn matmul_gradients() {
    let params = [probe_tensor(&[3, 4], 1, 0.8), probe_tensor(&[4, 2], 2, 0.8)];
    assert_op_ok("matmul", &params, &|g, p| {
        let y = g.matmul(p[0], p[1])?;
        weigh(g, y, 10)
    });
}

#[test]
fn matmul_nt_gradients() {
    let params = [probe_tensor(&[3, 4], 3, 0.8), probe_tensor(&[5, 4], 4, 0.8)];
    assert_op_ok("matmul_nt", &params, &|g, p| {
        let y = g.matmul_nt(p[0], p[1])?;
        weigh(g, y, 11)
    });
}

#[test]
fn add_scale_and_bias_gradients() {
    let params = [
        probe_tensor(&[2, 3], 5, 1.0),
        probe_tensor(&[2, 3], 6, 1.0),
        probe_tensor(&[3], 7, 1.0),
    ];
    assert_op_ok("add+scale+add_row", &params, &|g, p| {
        let s = g.add(p[0], p[1])?;
        let s = g.scale(s, 0.37);
        let s = g.add_row(s, p[2])?;
        weigh(g, s, 12)
    });
}

#[test]
fn concat_and_slice_gradients() {
    let params = [probe_tensor(&[2, 4], 8, 1.0), probe_tensor(&[3, 4], 9, 1.0)];
    assert_op_ok("concat_rows+slice", &params, &|g, p| {
        let c = g.concat_rows(&[p[0], p[1]])?;
        let r = g.slice_rows(c, 1, 4)?;
        let r = g.slice_cols(r, 1, 3)?;
        weigh(g, r, 13)
    });
    let params = [probe_tensor(&[3, 2], 14, 1.0), probe_tensor(&[3, 3], 15, 1.0)];
    assert_op_ok("concat_cols", &params, &|g, p| {
        let c = g.concat_cols(&[p[0], p[1]])?;
        weigh(g, c, 16)
    });
}

#[test]
fn reshape_gradients() {
    let params = [probe_tensor(&[2, 6], 17, 1.0)];
    assert_op_ok("reshape", &params, &|g, p| {
        let r = g.reshape(p[0], &[3, 4])?;
        weigh(g, r, 18)
    });
}

#[test]
fn embedding_gradients() {
    let params = [probe_tensor(&[5, 3], 19, 1.0)];
    assert_op_ok("embedding", &params, &|g, p| {
        let e = g.embedding(p[0], &[0, 2, 2, 4])?;
        weigh(g, e, 20)
    });
}

#[test]
fn layernorm_gradients() {
    // Includes the stated random 4-vector case.
    let params = [
        probe_tensor(&[1, 4], 21, 1.5),
        probe_tensor(&[4], 22, 1.0),
        probe_tensor(&[4], 23, 0.5),
    ];
    assert_op_ok("layernorm", &params, &|g, p| {
        let y = g.layernorm(p[0], p[1], p[2])?;
        weigh(g, y, 24)
    });
    let params = [
        probe_tensor(&[3, 6], 25, 1.0),
        probe_tensor(&[6], 26, 1.0),
        probe_tensor(&[6], 27, 1.0),
    ];
    assert_op_ok("layernorm_wide", &params, &|g, p| {
        let y = g.layernorm(p[0], p[1], p[2])?;
        weigh(g, y, 28)
    });
}

#[test]
fn gelu_gradients() {
    let params = [probe_tensor(&[2, 5], 29, 2.0)];
    assert_op_ok("gelu", &params, &|g, p| {
        let y = g.gelu(p[0]);
        weigh(g, y, 30)
    });
}

#[test]
fn softmax_gradients_masked_and_plain() {
    let params = [probe_tensor(&[3, 5], 31, 2.0)];
    assert_op_ok("softmax", &params, &|g, p| {
        let y = g.softmax_rows(p[0], None)?;
        weigh(g, y, 32)
    });
    assert_op_ok("softmax_masked", &params, &|g, p| {
        let y = g.softmax_rows(p[0], Some(&[1, 0, 1, 1, 0]))?;
        weigh(g, y, 33)
    });
}

#[test]
fn dropout_gradients() {
    let params = [probe_tensor(&[4, 4], 34, 1.0)];
    assert_op_ok("dropout", &params, &|g, p| {
        let mut rng = StreamRng::new(99);
        let y = g.dropout(p[0], 0.4, Some(&mut rng))?;
        weigh(g, y, 35)
    });
}

#[test]
fn mse_gradients() {
    let params = [probe_tensor(&[3, 4], 36, 1.0), probe_tensor(&[3, 4], 37, 1.0)];
    assert_op_ok("mse", &params, &|g, p| g.mse(p[0], p[1], None));
    assert_op_ok("mse_masked", &params, &|g, p| {
        g.mse(p[0], p[1], Some(&[1, 0, 1]))
    });
}

#[test]
fn softmax_ce_gradients() {
    let params = [probe_tensor(&[6], 38, 2.0)];
    assert_op_ok("softmax_ce", &params, &|g, p| g.softmax_ce(p[0], 2, None));
    assert_op_ok("softmax_ce_masked", &params, &|g, p| {
        g.softmax_ce(p[0], 2, Some(&[1, 1, 1, 0, 1, 0]))
    });
}

#[test]
fn kl_gradients() {
    let params = [probe_tensor(&[5], 39, 2.0)];
    let target = {
        let raw = [0.3f64, 0.05, 0.25, 0.1, 0.3];
        raw.to_vec()
    };
    assert_op_ok("kl_from_logits", &params, &|g, p| {
        g.kl_from_logits(&target, p[0], None)
    });
}

#[test]
fn lincomb_gradients() {
    let params = [probe_tensor(&[2, 2], 40, 1.0), probe_tensor(&[2, 2], 41, 1.0)];
    assert_op_ok("lincomb", &params, &|g, p| {
        let y = g.lincomb(&[(0.25, p[0]), (-1.5, p[1])])?;
        weigh(g, y, 42)
    });
}

#[test]
fn span_loss_composite_gradients() {
    let params = [probe_tensor(&[7], 43, 1.0), probe_tensor(&[7], 44, 1.0)];
    assert_op_ok("span_ce_loss", &params, &|g, p| {
        span_ce_loss(g, p[0], p[1], (2, 4), None)
    });
}

/// Full tiny model: every parameter of a 2-layer, d=8, 2-head encoder with a
/// span loss on top, against finite differences.
#[test]
fn full_tiny_model_gradients() {
    let config = ModelConfig {
        n_layers: 2,
        hidden: 8,
        n_heads: 2,
        ffn: 16,
        vocab: 12,
        max_positions: 8,
        n_segments: 2,
        dropout: 0.0,
        attention_dropout: 0.0,
    };
    let model = StandardModel::<f64>::init(config.clone(), 220).unwrap();
    let ids = [1u32, 5, 2, 7, 8, 2];
    let segs = [0u8, 0, 0, 1, 1, 1];
    let mask = [1u8; 6];
    let gold = (3usize, 4usize);

    let params: Vec<Tensor<f64>> = model
        .parameters()
        .into_iter()
        .map(|(_, t, _)| t.clone())
        .collect();

    let analytic = {
        let mut g = Graph::<f64>::new();
        let out = model.encode(&mut g, &ids, &segs, &mask, &mut Mode::Eval).unwrap();
        let loss = span_ce_loss(&mut g, out.start_logits, out.end_logits, gold, None).unwrap();
        let mut grads = g.backward(loss).unwrap();
        g.param_nodes()
            .to_vec()
            .iter()
            .zip(&params)
            .map(|(&id, p)| grads.take_or_zeros(id, p.shape()))
            .collect::<Vec<_>>()
    };

    // Embedding rows have std ~0.035, so the layer-norm right above them is
    // sharply curved at that scale; probe with a step well below it.
    let numeric = fd_gradients(
        &params,
        &|vals: &[Tensor<f64>]| {
            let m = StandardModel::with_parameters(config.clone(), vals.to_vec())?;
            let mut g = Graph::<f64>::new();
            let out = m.encode(&mut g, &ids, &segs, &mask, &mut Mode::Eval)?;
            let loss = span_ce_loss(&mut g, out.start_logits, out.end_logits, gold, None)?;
            Ok(g.value(loss).item())
        },
        1e-5,
    )
    .unwrap();

    let err = max_scaled_rel_err(&analytic, &numeric);
    assert!(err < REL_TOL, "full model: max scaled rel err {err}");
}
