//! On-disk formats: bit-exact round trips and rejection of mismatched or
//! corrupt files.

use incomes_core::gist::{
    compress, entry_payload_bytes, pool_io, pool_payload_bytes, GistPool,
};
use incomes_core::model::{checkpoint, ModelConfig, ModelState};
use incomes_core::rng;
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

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.incs");
    let c = cfg();
    let mut m: ModelState<f32> = ModelState::init(&c, 3).unwrap();
    m.extend(&c, 3).unwrap();
    checkpoint::save(&path, &c, &m).unwrap();
    let (c2, m2) = checkpoint::load(&path).unwrap();
    assert_eq!(c2, c);
    assert_eq!(checkpoint::state_digest(&m2), checkpoint::state_digest(&m));
    // learnability is restored structurally
    for (name, t) in m2.params() {
        assert_eq!(
            t.requires_grad(),
            !name.ends_with("zero_value"),
            "{name} learnability"
        );
    }
}

#[test]
fn unextended_checkpoint_round_trips_without_cross_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.incs");
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 4).unwrap();
    checkpoint::save(&path, &c, &m).unwrap();
    let (_, m2) = checkpoint::load(&path).unwrap();
    assert!(!m2.is_extended());
    assert_eq!(checkpoint::state_digest(&m2), checkpoint::state_digest(&m));
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.incs");
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 5).unwrap();
    checkpoint::save(&path, &c, &m).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let bad = dir.path().join("bad.incs");
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    std::fs::write(&bad, &corrupt).unwrap();
    assert!(checkpoint::load(&bad).is_err());

    let short = dir.path().join("short.incs");
    std::fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&short).is_err());
}

#[test]
fn pool_round_trip_is_bit_exact_and_sized_by_the_formula() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edits.incp");
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 6).unwrap();
    let mut r = rng::stream(7, "edits");
    let edits: Vec<(u64, Vec<u32>)> = (0..9u64)
        .map(|i| {
            let len = r.gen_range(6..14);
            (
                i * 3 + 1,
                (0..len)
                    .map(|_| r.gen_range(0..(c.vocab_size - 1) as u32))
                    .collect(),
            )
        })
        .collect();
    let entries = compress::compress_batch(&m, &c, &edits, 1).unwrap();
    let pool = GistPool::from_entries(entries).unwrap();
    pool_io::save_pool(&path, &c, &pool).unwrap();

    // header = magic + version + fingerprint + count; per entry id + payload
    let file_len = std::fs::metadata(&path).unwrap().len() as usize;
    let header = 4 + 4 + 32 + 4;
    let ids = 8 * pool.len();
    assert_eq!(
        file_len,
        header + ids + pool_payload_bytes(&c, pool.len()),
        "payload bytes must equal the advertised footprint"
    );
    assert_eq!(
        pool_payload_bytes(&c, pool.len()),
        pool.len() * entry_payload_bytes(&c)
    );

    let back = pool_io::load_pool(&path, &c).unwrap();
    assert_eq!(back.ids(), pool.ids());
    for (a, b) in back.entries().iter().zip(pool.entries()) {
        for (ka, kb) in a.kv.iter().zip(&b.kv) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ka.k), bits(&kb.k));
            assert_eq!(bits(&ka.v), bits(&kb.v));
        }
    }
}

#[test]
fn pool_from_a_different_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edits.incp");
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 8).unwrap();
    let entries = compress::compress_batch(&m, &c, &[(1, vec![1, 2, 3])], 1).unwrap();
    let pool = GistPool::from_entries(entries).unwrap();
    pool_io::save_pool(&path, &c, &pool).unwrap();

    let mut other = cfg();
    other.infer_temperature = 0.5;
    let err = pool_io::load_pool(&path, &other).unwrap_err();
    assert!(err.to_string().contains("different model config"), "{err}");

    // same config loads fine
    assert_eq!(pool_io::load_pool(&path, &c).unwrap().len(), 1);
}

#[test]
fn pool_rejects_trailing_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edits.incp");
    let c = cfg();
    let m: ModelState<f32> = ModelState::init(&c, 9).unwrap();
    let entries = compress::compress_batch(&m, &c, &[(1, vec![4, 5])], 1).unwrap();
    let pool = GistPool::from_entries(entries).unwrap();
    pool_io::save_pool(&path, &c, &pool).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(pool_io::load_pool(&path, &c).is_err());
}
