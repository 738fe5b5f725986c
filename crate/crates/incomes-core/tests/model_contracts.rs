//! Structural guarantees of the model: the training graph and the
//! inference path compute the same function bit for bit, attention is
//! causal, extension and empty pools are exact identities, and pools are
//! order-free.

use incomes_core::model::graph::{self, GraphPool};
use incomes_core::model::infer::{self, ForwardReq};
use incomes_core::model::{KVCache, ModelConfig, ModelState, PoolTensors};
use incomes_core::rng;
use incomes_core::tensor::tape::Tape;
use incomes_core::tensor::Tensor;
use incomes_core::Error;
use rand::Rng as _;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        max_seq_len: 48,
        cross_layers: ModelConfig::second_half(4),
        zero_gist: true,
        gist_key_position: None,
        train_temperature: 1.0,
        infer_temperature: 0.45,
    }
}

fn rand_tokens(c: &ModelConfig, s: usize, r: &mut rng::Rng) -> Vec<u32> {
    (0..s).map(|_| r.gen_range(0..c.vocab_size as u32)).collect()
}

fn rand_pool(c: &ModelConfig, n: usize, r: &mut rng::Rng) -> PoolTensors<f32> {
    let d = c.d_model;
    let mk = |r: &mut rng::Rng| {
        (0..c.cross_layers.len())
            .map(|_| Tensor::<f32>::randn(&[n, d], 0.5, r).data().to_vec())
            .collect::<Vec<_>>()
    };
    PoolTensors {
        n,
        keys: mk(r),
        values: mk(r),
    }
}

/// Fill the model's cross output projections so the cross path actually
/// contributes (extension inits them to zero).
fn energize_cross(m: &mut ModelState<f32>, seed: u64) {
    for (i, cb) in m.cross.iter_mut().enumerate() {
        let mut r = rng::stream(seed, &format!("energize.{i}"));
        let shape = cb.wo.shape().to_vec();
        cb.wo = Tensor::randn(&shape, 0.2, &mut r).with_grad();
    }
}

fn graph_logits(
    c: &ModelConfig,
    m: &ModelState<f32>,
    tokens: &[u32],
    pool: Option<(&PoolTensors<f32>, f32)>,
) -> Vec<f32> {
    let mut tape: Tape<f32> = Tape::new();
    let gp = graph::bind(&mut tape, m);
    let gpool = pool.map(|(p, t)| {
        let keys = p
            .keys
            .iter()
            .map(|k| tape.constant(&[p.n, c.d_model], k.clone()).unwrap())
            .collect();
        let values = p
            .values
            .iter()
            .map(|v| tape.constant(&[p.n, c.d_model], v.clone()).unwrap())
            .collect();
        (
            GraphPool {
                n: p.n,
                keys,
                values,
            },
            t,
        )
    });
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let fwd = graph::forward_graph(
        &mut tape,
        &gp,
        c,
        tokens,
        gpool.as_ref().map(|(g, t)| (g, *t)),
        &rows,
    )
    .unwrap();
    tape.value(fwd.logits).to_vec()
}

fn assert_bitwise(a: &[f32], b: &[f32], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "{what}: element {i}: {x} vs {y}");
    }
}

#[test]
fn graph_and_inference_agree_bitwise_without_pool() {
    let c = cfg();
    for seed in 0..5u64 {
        let m: ModelState<f32> = ModelState::init(&c, seed).unwrap();
        let mut r = rng::stream(seed, "tokens");
        let tokens = rand_tokens(&c, 9, &mut r);
        let inf = infer::sequence_logits(&m, &c, &tokens, None, None).unwrap();
        let gr = graph_logits(&c, &m, &tokens, None);
        assert_bitwise(&gr, &inf, "base forward");
    }
}

#[test]
fn graph_and_inference_agree_bitwise_with_pool() {
    for (zero_gist, key_pos) in [(true, None), (false, None), (true, Some(0u32))] {
        let mut c = cfg();
        c.zero_gist = zero_gist;
        c.gist_key_position = key_pos;
        let mut m: ModelState<f32> = ModelState::init(&c, 11).unwrap();
        m.extend(&c, 11).unwrap();
        energize_cross(&mut m, 12);
        let mut r = rng::stream(13, "tokens");
        let tokens = rand_tokens(&c, 8, &mut r);
        let pool = rand_pool(&c, 3, &mut r);
        let inf = infer::sequence_logits(&m, &c, &tokens, Some((&pool, 0.45)), None).unwrap();
        let gr = graph_logits(&c, &m, &tokens, Some((&pool, 0.45)));
        assert_bitwise(&gr, &inf, "pool forward");
    }
}

#[test]
fn logits_are_causal() {
    // Changing token j must leave every earlier row's logits untouched,
    // bit for bit.
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 21).unwrap();
    let mut r = rng::stream(21, "tokens");
    let tokens = rand_tokens(&c, 10, &mut r);
    let base = infer::sequence_logits(&m, &c, &tokens, None, None).unwrap();
    for j in [3usize, 7, 9] {
        let mut t2 = tokens.clone();
        t2[j] = (t2[j] + 1) % c.vocab_size as u32;
        let alt = infer::sequence_logits(&m, &c, &t2, None, None).unwrap();
        let v = c.vocab_size;
        assert_bitwise(&alt[..j * v], &base[..j * v], "rows before the edit");
        let changed = alt[j * v..].iter().zip(&base[j * v..]).any(|(a, b)| a != b);
        assert!(changed, "perturbing token {j} changed nothing after it");
    }
}

#[test]
fn freshly_extended_model_is_the_base_model() {
    // Zero output projections make the cross path a no-op, whatever the
    // pool holds.
    for seed in 0..20u64 {
        let c = cfg();
        let base: ModelState<f32> = ModelState::init(&c, seed).unwrap();
        let mut ext = base.clone();
        ext.extend(&c, seed ^ 0xabcd).unwrap();
        let mut r = rng::stream(seed, "ext-tokens");
        let tokens = rand_tokens(&c, 7, &mut r);
        let pool = rand_pool(&c, 4, &mut r);
        let a = infer::sequence_logits(&base, &c, &tokens, None, None).unwrap();
        let b = infer::sequence_logits(&ext, &c, &tokens, Some((&pool, 0.45)), None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() == 0.0, "extension shifted a logit: {x} vs {y}");
        }
    }
}

#[test]
fn empty_pool_is_the_base_model() {
    // With nothing to attend to, all mass lands on the zero entry, whose
    // value is pinned at zero — so even a trained cross path adds nothing.
    let c = cfg();
    let mut m: ModelState<f32> = ModelState::init(&c, 31).unwrap();
    m.extend(&c, 31).unwrap();
    energize_cross(&mut m, 32);
    let mut r = rng::stream(33, "tokens");
    let tokens = rand_tokens(&c, 9, &mut r);
    let empty = PoolTensors::empty(c.cross_layers.len());
    let a = infer::sequence_logits(&m, &c, &tokens, None, None).unwrap();
    let b = infer::sequence_logits(&m, &c, &tokens, Some((&empty, 0.45)), None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() == 0.0, "empty pool shifted a logit: {x} vs {y}");
    }
}

#[test]
fn pool_order_does_not_matter() {
    let c = cfg();
    let mut m: ModelState<f32> = ModelState::init(&c, 41).unwrap();
    m.extend(&c, 41).unwrap();
    energize_cross(&mut m, 42);
    let mut r = rng::stream(43, "tokens");
    let tokens = rand_tokens(&c, 8, &mut r);
    let pool = rand_pool(&c, 5, &mut r);
    let perm = [4usize, 1, 3, 0, 2];
    let d = c.d_model;
    let permuted = PoolTensors {
        n: pool.n,
        keys: pool
            .keys
            .iter()
            .map(|k| {
                let mut out = vec![0.0f32; k.len()];
                for (dst, &src) in perm.iter().enumerate() {
                    out[dst * d..(dst + 1) * d].copy_from_slice(&k[src * d..(src + 1) * d]);
                }
                out
            })
            .collect(),
        values: pool
            .values
            .iter()
            .map(|v| {
                let mut out = vec![0.0f32; v.len()];
                for (dst, &src) in perm.iter().enumerate() {
                    out[dst * d..(dst + 1) * d].copy_from_slice(&v[src * d..(src + 1) * d]);
                }
                out
            })
            .collect(),
    };
    let a = infer::sequence_logits(&m, &c, &tokens, Some((&pool, 0.45)), None).unwrap();
    let b = infer::sequence_logits(&m, &c, &tokens, Some((&permuted, 0.45)), None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6, "permutation moved a logit: {x} vs {y}");
    }
}

#[test]
fn incremental_decode_matches_full_forward_bitwise() {
    let c = cfg();
    let mut m: ModelState<f32> = ModelState::init(&c, 51).unwrap();
    m.extend(&c, 51).unwrap();
    energize_cross(&mut m, 52);
    let mut r = rng::stream(53, "tokens");
    let tokens = rand_tokens(&c, 10, &mut r);
    let pool = rand_pool(&c, 3, &mut r);
    for pl in [None, Some((&pool, 0.45f32))] {
        let full = infer::sequence_logits(&m, &c, &tokens, pl, None).unwrap();
        let v = c.vocab_size;
        // prefill 4 tokens, then one at a time
        let mut cache = KVCache::new(c.n_layers);
        let mut req = match pl {
            Some((p, t)) => ForwardReq::with_pool(p, t),
            None => ForwardReq::base(),
        };
        req.logit_rows = None;
        let fo = infer::forward(&m, &c, &tokens[..4], &mut cache, &req).unwrap();
        assert_bitwise(&fo.logits, &full[..4 * v], "prefill rows");
        for (i, &t) in tokens.iter().enumerate().skip(4) {
            let mut req = match pl {
                Some((p, tt)) => ForwardReq::with_pool(p, tt),
                None => ForwardReq::base(),
            };
            req.logit_rows = None;
            let fo = infer::forward(&m, &c, &[t], &mut cache, &req).unwrap();
            assert_bitwise(&fo.logits, &full[i * v..(i + 1) * v], "decode row");
        }
    }
}

#[test]
fn restricting_logit_rows_changes_nothing_else() {
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 61).unwrap();
    let mut r = rng::stream(61, "tokens");
    let tokens = rand_tokens(&c, 9, &mut r);
    let full = infer::sequence_logits(&m, &c, &tokens, None, None).unwrap();
    let rows = [2usize, 5, 8];
    let some = infer::sequence_logits(&m, &c, &tokens, None, Some(&rows)).unwrap();
    let v = c.vocab_size;
    for (i, &row) in rows.iter().enumerate() {
        assert_bitwise(
            &some[i * v..(i + 1) * v],
            &full[row * v..(row + 1) * v],
            "row-restricted logits",
        );
    }
}

#[test]
fn sequence_capacity_is_enforced() {
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 71).unwrap();
    let tokens = vec![1u32; c.max_seq_len + 1];
    match infer::sequence_logits(&m, &c, &tokens, None, None) {
        Err(Error::Capacity { len, max }) => {
            assert_eq!(len, c.max_seq_len + 1);
            assert_eq!(max, c.max_seq_len);
        }
        other => panic!("expected capacity error, got {other:?}"),
    }
}

#[test]
fn pool_forward_requires_extension() {
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 81).unwrap();
    let mut r = rng::stream(81, "tokens");
    let tokens = rand_tokens(&c, 5, &mut r);
    let pool = rand_pool(&c, 2, &mut r);
    assert!(matches!(
        infer::sequence_logits(&m, &c, &tokens, Some((&pool, 0.45)), None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn compression_capture_matches_graph_capture_bitwise() {
    let c = cfg();
    let mut m: ModelState<f32> = ModelState::init(&c, 91).unwrap();
    m.extend(&c, 91).unwrap();
    let mut r = rng::stream(91, "edit");
    let edit = rand_tokens(&c, 12, &mut r);

    let inf = infer::encode_gist(&m, &c, &edit).unwrap();
    assert_eq!(inf.len(), c.cross_layers.len());

    let mut tape: Tape<f32> = Tape::new();
    let gp = graph::bind(&mut tape, &m);
    let caps = graph::compress_graph(&mut tape, &gp, &c, &edit).unwrap();
    for (g, (kid, vid)) in inf.iter().zip(&caps) {
        assert_bitwise(tape.value(*kid), &g.k, "gist key");
        assert_bitwise(tape.value(*vid), &g.v, "gist value");
    }
}

#[test]
fn greedy_decode_is_deterministic_and_sized() {
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 95).unwrap();
    let mut r = rng::stream(95, "prompt");
    let prompt = rand_tokens(&c, 6, &mut r);
    let a = infer::greedy_decode(&m, &c, &prompt, None, 5).unwrap();
    let b = infer::greedy_decode(&m, &c, &prompt, None, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|&t| (t as usize) < c.vocab_size));
}
