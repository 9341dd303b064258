//! File-backed proxy store with an in-memory id index.
//!
//! Layout: the 8-byte magic `CPXYSTOR`, a little-endian `u32` header length,
//! a JSON [`StoreHeader`], then `count` fixed-width records:
//!
//! ```text
//! item_id u32 | version u32 | hash_index u16 | has_fine u16 | p_coarse f32 x d | p_fine f32 x d_fine
//! ```
//!
//! `hash_index` points into `StoreHeader::hashes`. Writes append by rewriting
//! the whole file to a temporary sibling and renaming it over the original.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align2::{fine_adaptor, gate_fuse, AdaptorParams, LayerPartition, N_GROUPS};
use crate::checkpoint::write_atomic;
use crate::datagen::Item;
use crate::diffcore::optim::hex_digest;
use crate::encoder::Encoder;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CPXYSTOR";
const FIXED_BYTES: usize = 12;
/// Coarse proxies must be unit norm within this tolerance after the f32 cast.
pub const NORM_TOL: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyRecord {
    pub item_id: u32,
    pub p_coarse: Vec<f32>,
    pub p_fine: Option<Vec<f32>>,
    pub version: u32,
    pub stage1_hash: String,
    pub stage2_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HashPair {
    pub stage1: String,
    pub stage2: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub d: usize,
    pub d_fine: usize,
    pub count: usize,
    pub hashes: Vec<HashPair>,
}

impl StoreHeader {
    pub fn record_width(&self) -> usize {
        FIXED_BYTES + 4 * (self.d + self.d_fine)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub count: usize,
    /// SHA-256 of the whole file.
    pub checksum: String,
    pub header_bytes: usize,
    pub record_width: usize,
}

fn validate(records: &[ProxyRecord], d: usize, d_fine: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.item_id) {
            return Err(Error::Duplicate(r.item_id));
        }
        if r.p_coarse.len() != d {
            return Err(Error::shape("proxy record p_coarse", &[r.p_coarse.len()], &[d]));
        }
        match &r.p_fine {
            Some(f) if f.len() != d_fine => {
                return Err(Error::shape("proxy record p_fine", &[f.len()], &[d_fine]))
            }
            None if d_fine == 0 => {}
            _ => {}
        }
        if r.p_coarse.iter().chain(r.p_fine.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("proxy record {}", r.item_id)));
        }
        let norm = r.p_coarse.iter().map(|x| x * x).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Precondition(format!(
                "item {}: p_coarse norm {norm} is not 1",
                r.item_id
            )));
        }
    }
    Ok(())
}

fn encode(header: &StoreHeader, records: &[ProxyRecord]) -> Result<Vec<u8>> {
    let hjson = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(12 + hjson.len() + records.len() * header.record_width());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for r in records {
        let pair = HashPair {
            stage1: r.stage1_hash.clone(),
            stage2: r.stage2_hash.clone(),
        };
        let idx = header
            .hashes
            .iter()
            .position(|h| *h == pair)
            .expect("hash table built from records");
        buf.extend_from_slice(&r.item_id.to_le_bytes());
        buf.extend_from_slice(&r.version.to_le_bytes());
        buf.extend_from_slice(&(idx as u16).to_le_bytes());
        buf.extend_from_slice(&u16::from(r.p_fine.is_some()).to_le_bytes());
        for x in &r.p_coarse {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        match &r.p_fine {
            Some(f) => f.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            None => buf.resize(buf.len() + 4 * header.d_fine, 0),
        }
    }
    Ok(buf)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(StoreHeader, Vec<ProxyRecord>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a proxy store (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let start = 12 + hlen;
    let header: StoreHeader = serde_json::from_slice(bytes.get(12..start).unwrap_or_default())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let width = header.record_width();
    if bytes.len() != start + header.count * width {
        return Err(Error::format(
            path,
            format!("expected {} records of {width} bytes", header.count),
        ));
    }
    let f32_at = |s: usize| f32::from_le_bytes(bytes[s..s + 4].try_into().expect("4 bytes"));
    let mut records = Vec::with_capacity(header.count);
    for k in 0..header.count {
        let o = start + k * width;
        let item_id = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32::from_le_bytes(bytes[o + 4..o + 8].try_into().expect("4 bytes"));
        let idx = u16::from_le_bytes(bytes[o + 8..o + 10].try_into().expect("2 bytes")) as usize;
        let has_fine = u16::from_le_bytes(bytes[o + 10..o + 12].try_into().expect("2 bytes")) != 0;
        let hashes = header
            .hashes
            .get(idx)
            .ok_or_else(|| Error::format(path, format!("record {k}: hash index {idx} out of range")))?;
        let c0 = o + FIXED_BYTES;
        let p_coarse = (0..header.d).map(|j| f32_at(c0 + 4 * j)).collect();
        let f0 = c0 + 4 * header.d;
        let p_fine = has_fine.then(|| (0..header.d_fine).map(|j| f32_at(f0 + 4 * j)).collect());
        records.push(ProxyRecord {
            item_id,
            p_coarse,
            p_fine,
            version,
            stage1_hash: hashes.stage1.clone(),
            stage2_hash: hashes.stage2.clone(),
        });
    }
    Ok((header, records))
}

pub fn read_proxies(path: &Path) -> Result<(StoreHeader, Vec<ProxyRecord>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Appends `records` to the store at `path`, creating it if needed. The
/// dimensions of the first record fix the header of a new store.
pub fn write_proxies(records: &[ProxyRecord], path: &Path) -> Result<StoreManifest> {
    let (mut header, mut all) = if path.exists() {
        read_proxies(path)?
    } else {
        let first = records
            .first()
            .ok_or_else(|| Error::Input("no records to write".into()))?;
        let d_fine = records.iter().find_map(|r| r.p_fine.as_ref().map(Vec::len)).unwrap_or(0);
        let header = StoreHeader {
            d: first.p_coarse.len(),
            d_fine,
            count: 0,
            hashes: Vec::new(),
        };
        (header, Vec::new())
    };
    validate(records, header.d, header.d_fine)?;
    for r in records {
        let pair = HashPair {
            stage1: r.stage1_hash.clone(),
            stage2: r.stage2_hash.clone(),
        };
        if !header.hashes.contains(&pair) {
            header.hashes.push(pair);
        }
    }
    all.extend_from_slice(records);
    header.count = all.len();
    let bytes = encode(&header, &all)?;
    write_atomic(path, &bytes)?;
    Ok(StoreManifest {
        count: header.count,
        checksum: checksum(&bytes),
        header_bytes: bytes.len() - header.count * header.record_width(),
        record_width: header.record_width(),
    })
}

pub fn checksum(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

/// An opened store: every record in memory plus an index of the latest
/// version of each item.
#[derive(Clone, Debug)]
pub struct ProxyStore {
    pub header: StoreHeader,
    records: Vec<ProxyRecord>,
    index: HashMap<u32, usize>,
}

impl ProxyStore {
    pub fn open(path: &Path) -> Result<Self> {
        let (header, records) = read_proxies(path)?;
        let mut index: HashMap<u32, usize> = HashMap::with_capacity(records.len());
        for (k, r) in records.iter().enumerate() {
            match index.get(&r.item_id) {
                // later records win ties
                Some(&j) if records[j].version > r.version => {}
                _ => {
                    index.insert(r.item_id, k);
                }
            }
        }
        Ok(Self { header, records, index })
    }

    pub fn lookup(&self, item_id: u32) -> Result<&ProxyRecord> {
        self.index
            .get(&item_id)
            .map(|&k| &self.records[k])
            .ok_or_else(|| Error::NotFound(format!("item {item_id} has no stored proxy")))
    }

    /// Distinct item ids, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.index.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Stage artifacts needed to compute proxies for unseen items.
#[derive(Clone, Debug)]
pub struct GenerationArtifacts<'a> {
    pub encoder: &'a Encoder,
    pub partition: &'a LayerPartition,
    pub adaptor: &'a AdaptorParams,
    /// Encoder hash the adaptor was trained against.
    pub expected_stage1_hash: String,
    pub stage2_hash: String,
}

/// Coarse and fine proxies for `items`, stamped with `version`.
pub fn batch_generate(items: &[Item], arts: &GenerationArtifacts, version: u32) -> Result<Vec<ProxyRecord>> {
    let stage1_hash = arts.encoder.param_hash();
    if stage1_hash != arts.expected_stage1_hash {
        return Err(Error::HashMismatch(format!(
            "encoder hash {} but the adaptor was trained against {}",
            &stage1_hash[..12],
            &arts.expected_stage1_hash[..12.min(arts.expected_stage1_hash.len())]
        )));
    }
    if arts.adaptor.d_in() != N_GROUPS * arts.encoder.config.d_hidden {
        return Err(Error::shape(
            "batch_generate adaptor",
            &[arts.adaptor.d_in()],
            &[N_GROUPS * arts.encoder.config.d_hidden],
        ));
    }
    let start = Instant::now();
    let out = items
        .iter()
        .map(|item| {
            let prompt = arts.encoder.build_prompt(item)?;
            let coarse = arts.encoder.proxy(&prompt).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("item {}: {m}", item.item_id)),
                other => other,
            })?;
            let z = arts.encoder.pooled_layers(&prompt, &arts.partition.layers)?;
            let raw = fine_adaptor(&z[0], &z[1], &z[2], arts.adaptor)?;
            let (fine, _) = gate_fuse(&coarse, &raw, arts.adaptor)?;
            Ok(ProxyRecord {
                item_id: item.item_id,
                p_coarse: coarse.iter().map(|&x| x as f32).collect(),
                p_fine: Some(fine.iter().map(|&x| x as f32).collect()),
                version,
                stage1_hash: stage1_hash.clone(),
                stage2_hash: arts.stage2_hash.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64();
    log::info!(
        "generated {} proxy records in {secs:.3}s ({:.0} items/s)",
        out.len(),
        out.len() as f64 / secs.max(1e-9)
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u32, version: u32, seed: f32) -> ProxyRecord {
        let mut c = vec![seed, 1.0, -0.5, 0.25];
        let n = c.iter().map(|x| x * x).sum::<f32>().sqrt();
        c.iter_mut().for_each(|x| *x /= n);
        ProxyRecord {
            item_id: id,
            p_coarse: c,
            p_fine: Some(vec![seed; 3]),
            version,
            stage1_hash: "s1".into(),
            stage2_hash: "s2".into(),
        }
    }

    #[test]
    fn round_trip_and_fixed_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let recs: Vec<ProxyRecord> = (0..10).map(|i| rec(i, 1, i as f32)).collect();
        let m = write_proxies(&recs, &path).unwrap();
        assert_eq!(m.count, 10);
        let size = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, m.header_bytes + 10 * (12 + 4 * 7));
        let (_, back) = read_proxies(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn duplicates_and_dimension_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        assert!(matches!(write_proxies(&[rec(1, 1, 0.0), rec(1, 2, 0.0)], &path), Err(Error::Duplicate(1))));
        write_proxies(&[rec(1, 1, 0.0)], &path).unwrap();
        let mut bad = rec(2, 1, 0.0);
        bad.p_fine = Some(vec![0.0; 5]);
        assert!(matches!(write_proxies(&[bad], &path), Err(Error::Shape { .. })));
    }

    #[test]
    fn latest_version_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_proxies(&[rec(7, 2, 0.5)], &path).unwrap();
        write_proxies(&[rec(7, 1, 0.1), rec(8, 1, 0.2)], &path).unwrap();
        let store = ProxyStore::open(&path).unwrap();
        assert_eq!(store.lookup(7).unwrap().version, 2);
        assert_eq!(store.ids(), vec![7, 8]);
        assert!(matches!(store.lookup(9), Err(Error::NotFound(_))));
    }
}
