mod common;

use std::collections::BTreeMap;

use cellclat::ccnn::{encode, encode_trimmed, readout_prefix, CcnnConfig, ComplexBatch, Encoder, NormMode, PreparedGraph};
use cellclat::diffcore::{check_store_gradients, ParamGroup, ParameterStore, Tape, Tensor};
use cellclat::graph_io::Graph;
use cellclat::trim_scheduler::{gumbel_noise, gumbel_softmax, trim_logits, BIAS, WEIGHT};
use common::{prepare, random_connected, random_permutation, random_store, readout_at_zero};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAX_DEGREE: usize = 7;

fn cfg() -> CcnnConfig {
    CcnnConfig {
        in_dim: MAX_DEGREE + 1,
        num_layers: 2,
        hidden: 5,
        proj_layers: 2,
        proj_dim: 6,
        normalization: true,
    }
}

fn embed_one(store: &ParameterStore, cfg: &CcnnConfig, p: &PreparedGraph) -> Tensor {
    encode(store, cfg, &ComplexBatch::new(&[p]).unwrap()).unwrap()
}

#[test]
fn full_mask_is_bit_identical_to_plain_readout() {
    let c = cfg();
    let store = random_store(&c, 1);
    let data = prepare(&[Graph::complete(4), Graph::petersen(), Graph::path(4)], MAX_DEGREE, 6);
    let refs: Vec<&PreparedGraph> = data.iter().collect();
    let batch = ComplexBatch::new(&refs).unwrap();
    let plain = encode(&store, &c, &batch).unwrap();
    let ones = vec![1.0; batch.counts[2]];
    assert_eq!(encode_trimmed(&store, &c, &batch, &ones).unwrap(), plain);
    let no_rings = ComplexBatch::new(&[&data[2]]).unwrap();
    assert_eq!(encode_trimmed(&store, &c, &no_rings, &[]).unwrap(), encode(&store, &c, &no_rings).unwrap());
}

#[test]
fn empty_mask_leaves_readout_perceptron_at_zero() {
    let c = cfg();
    let mut store = random_store(&c, 2);
    for dim in 0..2 {
        for s in ["lin2.weight", "lin2.bias"] {
            let p = store.get_mut(&format!("{}.{s}", readout_prefix(dim))).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let data = prepare(&[Graph::complete(4)], MAX_DEGREE, 6);
    let batch = ComplexBatch::new(&[&data[0]]).unwrap();
    let h = encode_trimmed(&store, &c, &batch, &vec![0.0; batch.counts[2]]).unwrap();
    let expect = readout_at_zero(&store, 2);
    for (a, b) in h.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let full = encode(&store, &c, &batch).unwrap();
    assert!(full.max_abs_diff(&h) > 1e-6);
}

#[test]
fn masks_act_per_graph() {
    let c = cfg();
    let store = random_store(&c, 3);
    let data = prepare(&[Graph::complete(4), Graph::cycle(5)], MAX_DEGREE, 6);
    let batch = ComplexBatch::new(&[&data[0], &data[1]]).unwrap();
    let n0 = data[0].num_two_cells();
    let mut mask = vec![1.0; batch.counts[2]];
    let base = encode_trimmed(&store, &c, &batch, &mask).unwrap();
    mask[..n0].iter_mut().for_each(|v| *v = 0.3);
    let trimmed = encode_trimmed(&store, &c, &batch, &mask).unwrap();
    assert_eq!(base.row_slice(1), trimmed.row_slice(1));
    assert_ne!(base.row_slice(0), trimmed.row_slice(0));
}

#[test]
fn eval_rows_do_not_depend_on_batch_mates() {
    let c = cfg();
    let store = random_store(&c, 4);
    let data = prepare(&[Graph::complete(5), Graph::cycle(4), Graph::petersen()], MAX_DEGREE, 6);
    let refs: Vec<&PreparedGraph> = data.iter().collect();
    let together = encode(&store, &c, &ComplexBatch::new(&refs).unwrap()).unwrap();
    for (i, p) in data.iter().enumerate() {
        let alone = embed_one(&store, &c, p);
        for (a, b) in alone.data().iter().zip(together.row_slice(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn trimmed_embedding_gradient_wrt_scheduler() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let store = random_store(&c, seed);
        let graphs: Vec<Graph> = (0..2).map(|_| random_connected(7, 0.5, &mut rng)).collect();
        let data = prepare(&graphs, MAX_DEGREE, 6);
        let refs: Vec<&PreparedGraph> = data.iter().collect();
        let batch = ComplexBatch::new(&refs).unwrap();
        if batch.counts[2] == 0 {
            continue;
        }
        let noise = gumbel_noise(batch.counts[2], seed);
        let weights: Vec<f64> = (0..2 * c.jump_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = Tensor::matrix(2, c.jump_width(), weights).unwrap();
        let run = |st: &ParameterStore, grads: bool| {
            let mut tape = Tape::new();
            tape.track_relu_signs();
            let bind = st.bind(&mut tape);
            let mut enc = Encoder::new(&c, st, &bind, NormMode::Eval);
            let states = enc.message_passing(&mut tape, &batch).unwrap();
            let lambda = trim_logits(&mut tape, &bind, states.jump[2]).unwrap();
            let y = gumbel_softmax(&mut tape, lambda, &noise, 0.7).unwrap();
            let m = tape.select_col(y, 1).unwrap();
            let h = enc.readout(&mut tape, &states, &batch, Some(m)).unwrap();
            let t = tape.constant(target.clone());
            let prod = tape.mul(h, t).unwrap();
            let loss = tape.sum(prod).unwrap();
            let signs = tape.relu_signs().unwrap().to_vec();
            let value = tape.value(loss).item();
            let mut g = BTreeMap::new();
            if grads {
                let all = tape.backward(loss).unwrap();
                for name in [WEIGHT, BIAS] {
                    g.insert(name.to_string(), all.get(bind.get(name).unwrap()).unwrap().clone());
                }
            }
            (value, signs, g)
        };
        let (_, _, analytic) = run(&store, true);
        let report = check_store_gradients(&store, &analytic, 1e-6, |st| -> Result<_, ()> {
            let (v, s, _) = run(st, false);
            Ok((v, s))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.checked > 0);
    }
}

#[test]
fn relaxed_sample_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 6;
    let lambda: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.05..1.0)).collect();
    let noise = gumbel_noise(n, 8);
    let weights: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut store = ParameterStore::new();
    store.insert("lambda", ParamGroup::Scheduler, Tensor::matrix(n, 2, lambda).unwrap()).unwrap();
    let f = |st: &ParameterStore, grads: bool| {
        let mut tape = Tape::new();
        let bind = st.bind(&mut tape);
        let y = gumbel_softmax(&mut tape, bind.get("lambda").unwrap(), &noise, 0.5).unwrap();
        let w = tape.constant(Tensor::matrix(n, 2, weights.clone()).unwrap());
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p).unwrap();
        let value = tape.value(l).item();
        let mut g = BTreeMap::new();
        if grads {
            let all = tape.backward(l).unwrap();
            g.insert("lambda".to_string(), all.get(bind.get("lambda").unwrap()).unwrap().clone());
        }
        (value, g)
    };
    let (_, analytic) = f(&store, true);
    let r = check_store_gradients(&store, &analytic, 1e-6, |st| -> Result<_, ()> { Ok((f(st, false).0, vec![])) }).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relabeling_nodes_leaves_embedding_unchanged(seed in any::<u64>(), n in 3usize..9) {
        let c = cfg();
        let store = random_store(&c, seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::random(n, 0.5, &mut rng);
        let h = g.relabel(&random_permutation(n, &mut rng));
        let data = prepare(&[g, h], MAX_DEGREE, 6);
        let a = embed_one(&store, &c, &data[0]);
        let b = embed_one(&store, &c, &data[1]);
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }
}
