//! Central finite differences against reverse-mode gradients for every
//! differentiable primitive and for the composed encoder and aggregator.

use std::sync::Arc;

use cxl_core::aggregator::{bilstm_forward, predictor, Aggregator, AggregatorConfig, AggregatorKind};
use cxl_core::encoder::{Encoder, EncoderConfig, PermutationPlan};
use cxl_core::numerics::{check_gradients, concat, ParamSet, Tape, Tensor, Var};
use cxl_core::text::{CLS_ID, NUM_SPECIAL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Large enough that cancellation noise stays far below the 1e-6 relative
/// floor on losses of order ten; truncation error is O(h^2).
const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params(entries: &[(&str, &[usize])], seed: u64) -> ParamSet {
    let mut r = rng(seed);
    let mut p = ParamSet::new();
    for (name, shape) in entries {
        p.insert(*name, Tensor::randn(shape, 1.0, &mut r)).unwrap();
    }
    p
}

/// Fixed random weights so each output element carries a distinct gradient.
fn weigh<'t>(x: Var<'t>, seed: u64) -> Var<'t> {
    let shape = x.shape();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0x5eed));
    x.mul(x.tape().constant(w)).unwrap().sum()
}

fn assert_passes<F>(label: &str, p: &ParamSet, loss: F)
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Var<'t>,
{
    let report = check_gradients(p, STEP, None, loss);
    assert!(report.checked > 0, "{label}: nothing checked");
    assert!(
        report.max_rel_error < TOL,
        "{label}: relative error {} at {}[{}]",
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
}

macro_rules! unary_check {
    ($name:ident, $shape:expr, |$x:ident| $body:expr) => {
        pub fn $name() {
            let p = params(&[("x", &$shape)], 11);
            assert_passes(stringify!($name), &p, |t, p| {
                let $x = p.var(t, "x").unwrap();
                weigh($body, 3)
            });
        }
    };
}

unary_check!(sigmoid, [3, 4], |x| x.sigmoid());
unary_check!(tanh, [3, 4], |x| x.tanh());
unary_check!(gelu, [3, 4], |x| x.gelu());
unary_check!(scale, [3, 4], |x| x.scale(-1.7));
unary_check!(scale_by, [2, 3], |x| x
    .scale_by(vec![0.0, 2.0, -1.0, 0.5, 1.0, 3.0])
    .unwrap());
unary_check!(transpose, [3, 4], |x| x.transpose().unwrap());
unary_check!(softmax_rows, [3, 4], |x| x.softmax(1).unwrap());
unary_check!(softmax_cols, [3, 4], |x| x.softmax(0).unwrap());
unary_check!(log_softmax, [3, 5], |x| x.log_softmax());
unary_check!(slice_cols, [3, 6], |x| x.slice(1, 2, 3).unwrap());
unary_check!(slice_rows, [4, 2], |x| x.slice(0, 1, 2).unwrap());
unary_check!(sum_axis_0, [3, 4], |x| x.sum_axis(0).unwrap());
unary_check!(sum_axis_1, [3, 4], |x| x.sum_axis(1).unwrap());
unary_check!(mean_axis_1, [3, 4], |x| x.mean_axis(1).unwrap());
unary_check!(select_rows_repeated, [4, 3], |x| x.select_rows(&[2, 0, 2]).unwrap());
unary_check!(pick, [3, 4], |x| x.pick(&[1, 3, 1]).unwrap());
unary_check!(gather_repeats, [2, 3], |x| x
    .gather(Arc::new(vec![5, 0, 0, 3, 5, 1]), vec![3, 2])
    .unwrap());
unary_check!(embedding_repeats, [5, 3], |x| x.embedding(&[4, 1, 4, 0]).unwrap());
unary_check!(masked_softmax, [3, 4], |x| x
    .masked_softmax(&[true, false, true, true, false, true, false, false, false, false, false, false])
    .unwrap());

pub fn sum_and_mean() {
    let p = params(&[("x", &[3, 4])], 1);
    assert_passes("sum", &p, |t, p| p.var(t, "x").unwrap().tanh().sum());
    assert_passes("mean", &p, |t, p| p.var(t, "x").unwrap().sigmoid().mean());
}

pub fn binary_elementwise() {
    let p = params(&[("a", &[3, 4]), ("b", &[3, 4])], 2);
    assert_passes("add", &p, |t, p| {
        weigh(p.var(t, "a").unwrap().add(p.var(t, "b").unwrap()).unwrap(), 1)
    });
    assert_passes("sub", &p, |t, p| {
        weigh(p.var(t, "a").unwrap().sub(p.var(t, "b").unwrap()).unwrap(), 1)
    });
    assert_passes("mul", &p, |t, p| {
        weigh(p.var(t, "a").unwrap().mul(p.var(t, "b").unwrap()).unwrap(), 1)
    });
    assert_passes("mul self", &p, |t, p| {
        let a = p.var(t, "a").unwrap();
        weigh(a.mul(a).unwrap(), 1)
    });
}

pub fn matmul_and_add_row() {
    let p = params(&[("a", &[3, 4]), ("b", &[4, 2]), ("r", &[2])], 3);
    assert_passes("matmul", &p, |t, p| {
        let y = p.var(t, "a").unwrap().matmul(p.var(t, "b").unwrap()).unwrap();
        weigh(y.add_row(p.var(t, "r").unwrap()).unwrap(), 2)
    });
}

pub fn layer_norm() {
    let p = params(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5])], 4);
    assert_passes("layer_norm", &p, |t, p| {
        let x = p.var(t, "x").unwrap();
        weigh(
            x.layer_norm(p.var(t, "g").unwrap(), p.var(t, "b").unwrap(), 1e-12)
                .unwrap(),
            5,
        )
    });
}

pub fn concat_both_axes() {
    let p = params(&[("a", &[2, 3]), ("b", &[2, 2]), ("c", &[1, 3])], 5);
    assert_passes("concat cols", &p, |t, p| {
        weigh(concat(&[p.var(t, "a").unwrap(), p.var(t, "b").unwrap()], 1).unwrap(), 6)
    });
    assert_passes("concat rows", &p, |t, p| {
        weigh(concat(&[p.var(t, "a").unwrap(), p.var(t, "c").unwrap()], 0).unwrap(), 6)
    });
}

pub fn bce_both_targets() {
    let p = params(&[("z", &[1])], 6);
    for target in [0.0, 1.0] {
        assert_passes("bce", &p, move |t, p| {
            p.var(t, "z").unwrap().sigmoid().sum().bce(target).unwrap()
        });
    }
}

fn small_encoder_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_inner: 16,
        max_len: 16,
        vocab_size,
        mem_len: 0,
        predict_fraction: 0.25,
        dropout: 0.0,
    }
}

/// Encoder with every parameter nudged off its structured initialization
/// (zero head, unit gains, zero biases).
fn jittered_encoder(vocab_size: usize, seed: u64) -> Encoder {
    let mut enc = Encoder::init(small_encoder_config(vocab_size), seed).unwrap();
    enc.jitter(0.3, &mut rng(seed + 1));
    enc
}

fn random_ids(len: usize, vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut ids = vec![CLS_ID];
    ids.extend((1..len).map(|_| r.random_range(NUM_SPECIAL..vocab_size)));
    ids
}

pub fn encoder_plm_loss_all_parameters() {
    let vocab = NUM_SPECIAL + 9;
    let enc = jittered_encoder(vocab, 21);
    let ids = random_ids(16, vocab, 22);
    let plan = PermutationPlan::for_tokens(&ids, 0.25, &mut rng(23)).unwrap();
    assert!(plan.targets().len() >= 3);
    let p = enc.params().clone();
    assert_passes("encoder plm", &p, |t, p| {
        let lp = enc.target_log_probs_with(p, t, &ids, &plan, None).unwrap().unwrap();
        lp.mean().scale(-1.0)
    });
}

pub fn encoder_content_stream_all_parameters() {
    let vocab = NUM_SPECIAL + 9;
    let enc = jittered_encoder(vocab, 31);
    let ids = random_ids(16, vocab, 32);
    let mask = vec![true; 16 * 16];
    let p = enc.params().clone();
    assert_passes("encoder content", &p, |t, p| {
        let pass = enc.content_pass_with(p, t, &ids, &mask, None, 0, &mut None).unwrap();
        weigh(pass.hidden, 7)
    });
}

fn agg_config() -> AggregatorConfig {
    AggregatorConfig {
        hidden_size: 8,
        n_layers: 2,
        predictor_width: 8,
        ..AggregatorConfig::default()
    }
}

fn jitter_params(p: &mut ParamSet, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = p.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let t = p.by_id_mut(id);
        let noise = Tensor::randn(t.shape(), std, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
}

pub fn aggregator_bilstm_and_predictor() {
    let cfg = agg_config();
    let mut agg = Aggregator::init(AggregatorKind::BiLstm, cfg.clone(), 5, 41).unwrap();
    jitter_params(agg.params_mut(), 0.2, 42);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng(43));
    let p = agg.params().clone();
    assert_passes("bilstm", &p, |t, p| {
        let h = bilstm_forward(t, p, cfg.n_layers, cfg.hidden_size, t.constant(x.clone())).unwrap();
        predictor(t, p, h).unwrap().bce(1.0).unwrap()
    });
    assert_passes("bilstm single step", &p, |t, p| {
        let x1 = t.constant(Tensor::new(vec![1, 5], x.data()[..5].to_vec()).unwrap());
        let h = bilstm_forward(t, p, cfg.n_layers, cfg.hidden_size, x1).unwrap();
        predictor(t, p, h).unwrap().bce(0.0).unwrap()
    });
}

pub fn aggregator_mean_path() {
    let mut agg = Aggregator::init(AggregatorKind::Mean, agg_config(), 5, 51).unwrap();
    jitter_params(agg.params_mut(), 0.2, 52);
    let embs: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..5).map(|j| (i * 5 + j) as f64 * 0.1 - 0.7).collect())
        .collect();
    let p = agg.params().clone();
    assert_passes("mean aggregator", &p, |t, p| {
        let z = agg.latent_var(t, p, &embs).unwrap();
        predictor(t, p, z).unwrap().bce(1.0).unwrap()
    });
}

/// Encoder -> [CLS] per note -> Bi-LSTM -> predictor -> BCE, differentiated
/// end to end through one parameter set.
pub fn composed_encoder_bilstm() {
    let vocab = NUM_SPECIAL + 9;
    let enc = jittered_encoder(vocab, 61);
    let cfg = agg_config();
    let mut agg = Aggregator::init(AggregatorKind::BiLstm, cfg.clone(), 8, 62).unwrap();
    jitter_params(agg.params_mut(), 0.2, 63);
    let mut p = enc.params().clone();
    for (_, name, value) in agg.params().iter() {
        p.insert(name, value.clone()).unwrap();
    }
    let notes = [
        random_ids(16, vocab, 64),
        random_ids(9, vocab, 65),
        random_ids(12, vocab, 66),
    ];
    let masks: Vec<Vec<bool>> = notes.iter().map(|n| vec![true; n.len() * n.len()]).collect();
    assert_passes("composed", &p, |t, p| {
        let cls: Vec<Var> = notes
            .iter()
            .zip(&masks)
            .map(|(ids, mask)| {
                let h = enc
                    .content_pass_with(p, t, ids, mask, None, 0, &mut None)
                    .unwrap()
                    .hidden;
                h.select_rows(&[0]).unwrap()
            })
            .collect();
        let x = concat(&cls, 0).unwrap();
        let z = bilstm_forward(t, p, cfg.n_layers, cfg.hidden_size, x).unwrap();
        predictor(t, p, z).unwrap().bce(1.0).unwrap()
    });
}

/// Every check, in a fixed order.
pub const CASES: &[(&str, fn())] = &[
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("gelu", gelu),
    ("scale", scale),
    ("scale_by", scale_by),
    ("transpose", transpose),
    ("softmax_rows", softmax_rows),
    ("softmax_cols", softmax_cols),
    ("log_softmax", log_softmax),
    ("slice_cols", slice_cols),
    ("slice_rows", slice_rows),
    ("sum_axis_0", sum_axis_0),
    ("sum_axis_1", sum_axis_1),
    ("mean_axis_1", mean_axis_1),
    ("select_rows_repeated", select_rows_repeated),
    ("pick", pick),
    ("gather_repeats", gather_repeats),
    ("embedding_repeats", embedding_repeats),
    ("masked_softmax", masked_softmax),
    ("sum_and_mean", sum_and_mean),
    ("binary_elementwise", binary_elementwise),
    ("matmul_and_add_row", matmul_and_add_row),
    ("layer_norm", layer_norm),
    ("concat_both_axes", concat_both_axes),
    ("bce_both_targets", bce_both_targets),
    ("encoder_plm_loss_all_parameters", encoder_plm_loss_all_parameters),
    (
        "encoder_content_stream_all_parameters",
        encoder_content_stream_all_parameters,
    ),
    ("aggregator_bilstm_and_predictor", aggregator_bilstm_and_predictor),
    ("aggregator_mean_path", aggregator_mean_path),
    ("composed_encoder_bilstm", composed_encoder_bilstm),
];
