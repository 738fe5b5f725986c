//! Edit compression and gist pools.
//!
//! An edit (a short token statement) is compressed by running it through
//! the plain decoder with the reserved gist token appended and keeping only
//! the gist row's self-attention key and value at each cross layer. Those
//! few rows are the edit's entire footprint from then on: they join a
//! [`GistPool`], and the extended model consults the pool through cross
//! attention instead of re-reading edit text.
//!
//! The pool's zero entry (the "attend to nothing" option) is not stored
//! here — it lives in the model parameters and every attention call adds it
//! as entry 0.

pub mod compress;
pub mod pool_io;

use crate::error::{Error, Result};
use crate::model::infer::GistKV;
use crate::model::{ModelConfig, PoolTensors};
use crate::tensor::kernels;
use crate::tensor::scalar::Scalar;

/// One compressed edit: its id and one key/value row pair per cross layer
/// (ascending layer order). Keys are stored pre-rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct GistEntry<T> {
    pub edit_id: u64,
    pub kv: Vec<GistKV<T>>,
}

/// An ordered set of compressed edits with unique ids.
#[derive(Debug, Clone, Default)]
pub struct GistPool<T> {
    entries: Vec<GistEntry<T>>,
}

impl<T: Scalar> GistPool<T> {
    pub fn new() -> Self {
        GistPool {
            entries: Vec::new(),
        }
    }

    /// # Errors
    /// Contract error on a duplicate id.
    pub fn from_entries(entries: Vec<GistEntry<T>>) -> Result<Self> {
        let mut pool = GistPool::new();
        for e in entries {
            pool.add(e)?;
        }
        Ok(pool)
    }

    /// Append an entry.
    ///
    /// # Errors
    /// Contract error if the id is already present or the entry's layer
    /// count differs from the pool's.
    pub fn add(&mut self, entry: GistEntry<T>) -> Result<()> {
        if self.index_of(entry.edit_id).is_some() {
            return Err(Error::contract(format!(
                "edit {} is already in the pool",
                entry.edit_id
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.kv.len() != entry.kv.len() {
                return Err(Error::contract("entry layer count differs from the pool"));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Remove an entry by id; later entries shift down, none change bytes.
    ///
    /// # Errors
    /// Contract error if the id is absent.
    pub fn remove(&mut self, edit_id: u64) -> Result<GistEntry<T>> {
        match self.index_of(edit_id) {
            Some(i) => Ok(self.entries.remove(i)),
            None => Err(Error::contract(format!("edit {edit_id} is not in the pool"))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GistEntry<T>] {
        &self.entries
    }

    /// Position of an edit in the pool; this plus one is its column in
    /// attention probability rows (entry 0 is the zero entry).
    pub fn index_of(&self, edit_id: u64) -> Option<usize> {
        self.entries.iter().position(|e| e.edit_id == edit_id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.edit_id).collect()
    }

    /// Lay the pool out for attention. Keys are rotated at the fixed key
    /// position when the config pins one; otherwise both sides stay
    /// position-free.
    ///
    /// # Errors
    /// Contract error if entries disagree with the config's cross layers.
    pub fn tensors(&self, cfg: &ModelConfig) -> Result<PoolTensors<T>> {
        let nc = cfg.cross_layers.len();
        let d = cfg.d_model;
        let n = self.entries.len();
        for e in &self.entries {
            if e.kv.len() != nc {
                return Err(Error::contract(format!(
                    "edit {} holds {} layers, config has {nc}",
                    e.edit_id,
                    e.kv.len()
                )));
            }
            for kv in &e.kv {
                if kv.k.len() != d || kv.v.len() != d {
                    return Err(Error::contract("gist row width differs from d_model"));
                }
            }
        }
        let mut keys = vec![vec![T::ZERO; n * d]; nc];
        let mut values = vec![vec![T::ZERO; n * d]; nc];
        for (i, e) in self.entries.iter().enumerate() {
            for (ci, kv) in e.kv.iter().enumerate() {
                keys[ci][i * d..(i + 1) * d].copy_from_slice(&kv.k);
                values[ci][i * d..(i + 1) * d].copy_from_slice(&kv.v);
            }
        }
        if let Some(p) = cfg.gist_key_position {
            for k in &mut keys {
                for row in 0..n {
                    kernels::rope_rows(
                        &mut k[row * d..(row + 1) * d],
                        1,
                        d,
                        cfg.n_heads,
                        p as usize,
                        false,
                    );
                }
            }
        }
        Ok(PoolTensors { n, keys, values })
    }
}

/// Serialized bytes one entry's payload occupies: per cross layer and head,
/// a key row and a value row of `head_dim` f32s.
pub fn entry_payload_bytes(cfg: &ModelConfig) -> usize {
    cfg.cross_layers.len() * cfg.n_heads * 2 * cfg.head_dim() * 4
}

/// Serialized payload bytes of an `n`-entry pool — the edit-store footprint
/// the efficiency harness reports.
pub fn pool_payload_bytes(cfg: &ModelConfig, n: usize) -> usize {
    n * entry_payload_bytes(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            cross_layers: vec![1],
            zero_gist: true,
            gist_key_position: None,
            train_temperature: 1.0,
            infer_temperature: 0.45,
        }
    }

    fn entry(id: u64, c: &ModelConfig, r: &mut rng::Rng) -> GistEntry<f32> {
        let d = c.d_model;
        GistEntry {
            edit_id: id,
            kv: (0..c.cross_layers.len())
                .map(|_| GistKV {
                    k: (0..d).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
                    v: (0..d).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn add_remove_never_touch_other_entries() {
        let c = cfg();
        let mut r = rng::stream(1, "pool");
        let mut pool = GistPool::new();
        for id in 0..5 {
            pool.add(entry(id, &c, &mut r)).unwrap();
        }
        let before: Vec<GistEntry<f32>> = pool.entries().to_vec();
        pool.remove(2).unwrap();
        assert_eq!(pool.ids(), vec![0, 1, 3, 4]);
        for e in pool.entries() {
            let orig = before.iter().find(|b| b.edit_id == e.edit_id).unwrap();
            assert_eq!(e, orig);
        }
        pool.add(entry(9, &c, &mut r)).unwrap();
        for e in pool.entries().iter().take(4) {
            let orig = before.iter().find(|b| b.edit_id == e.edit_id).unwrap();
            assert_eq!(e, orig);
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let c = cfg();
        let mut r = rng::stream(2, "pool");
        let mut pool = GistPool::new();
        pool.add(entry(7, &c, &mut r)).unwrap();
        assert!(pool.add(entry(7, &c, &mut r)).is_err());
        assert!(pool.remove(8).is_err());
    }

    #[test]
    fn tensors_put_entry_i_in_row_i() {
        let c = cfg();
        let mut r = rng::stream(3, "pool");
        let mut pool = GistPool::new();
        for id in [4u64, 11, 2] {
            pool.add(entry(id, &c, &mut r)).unwrap();
        }
        let t = pool.tensors(&c).unwrap();
        let d = c.d_model;
        assert_eq!(t.n, 3);
        for (i, e) in pool.entries().iter().enumerate() {
            assert_eq!(&t.keys[0][i * d..(i + 1) * d], e.kv[0].k.as_slice());
            assert_eq!(&t.values[0][i * d..(i + 1) * d], e.kv[0].v.as_slice());
        }
        assert_eq!(pool.index_of(11), Some(1));
        assert_eq!(pool.index_of(5), None);
    }

    #[test]
    fn fixed_key_position_rotates_keys_only() {
        let mut c = cfg();
        c.gist_key_position = Some(6);
        let mut r = rng::stream(4, "pool");
        let mut pool = GistPool::new();
        pool.add(entry(1, &c, &mut r)).unwrap();
        let t = pool.tensors(&c).unwrap();
        let d = c.d_model;
        let mut expect = pool.entries()[0].kv[0].k.clone();
        kernels::rope_rows(&mut expect, 1, d, c.n_heads, 6, false);
        assert_eq!(&t.keys[0][..d], expect.as_slice());
        assert_eq!(&t.values[0][..d], pool.entries()[0].kv[0].v.as_slice());
    }

    #[test]
    fn payload_bytes_formula() {
        let c = cfg();
        // 1 cross layer x 2 heads x 2 rows x 4 head_dim x 4 bytes
        assert_eq!(entry_payload_bytes(&c), 1 * 2 * 2 * 4 * 4);
        assert_eq!(pool_payload_bytes(&c, 10), 10 * entry_payload_bytes(&c));
    }
}
