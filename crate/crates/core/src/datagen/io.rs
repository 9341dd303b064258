//! Corpus directory layout: `items.jsonl`, `users.jsonl`, `interactions.jsonl`,
//! `id_table.jsonl` and `meta.json`. Reals are written as decimal strings that
//! round-trip exactly through `f64`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ClickModel, Corpus, GenConfig, IdTableEntry, Interaction, Item, User};
use crate::error::{Error, Result};

pub(crate) mod real {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:?}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

pub(crate) mod reals {
    use serde::ser::SerializeSeq;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&format!("{x:?}"))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| s.parse().map_err(D::Error::custom))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: GenConfig,
    config_hash: String,
    cutoff: u64,
    click_model: ClickModel,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("items.jsonl"), &corpus.items)?;
    write_jsonl(&dir.join("users.jsonl"), &corpus.users)?;
    write_jsonl(&dir.join("interactions.jsonl"), &corpus.interactions)?;
    save_id_table(&corpus.id_table, &dir.join("id_table.jsonl"))?;
    let meta = Meta {
        config: corpus.config.clone(),
        config_hash: corpus.config_hash(),
        cutoff: corpus.cutoff,
        click_model: corpus.click_model.clone(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::Dependency {
            path: meta_path,
            producer: "gen-data".into(),
        });
    }
    let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta =
        serde_json::from_str(&raw).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let items: Vec<Item> = read_jsonl(&dir.join("items.jsonl"))?;
    let users: Vec<User> = read_jsonl(&dir.join("users.jsonl"))?;
    let interactions: Vec<Interaction> = read_jsonl(&dir.join("interactions.jsonl"))?;
    let id_table = load_id_table(&dir.join("id_table.jsonl"))?;
    if items.iter().enumerate().any(|(k, i)| i.item_id as usize != k)
        || users.iter().enumerate().any(|(k, u)| u.user_id as usize != k)
    {
        return Err(Error::format(dir, "ids must be dense and in order"));
    }
    Ok(Corpus {
        config: meta.config,
        users,
        items,
        interactions,
        id_table,
        click_model: meta.click_model,
        cutoff: meta.cutoff,
    })
}

pub fn save_id_table(table: &[IdTableEntry], path: &Path) -> Result<()> {
    write_jsonl(path, table)
}

pub fn load_id_table(path: &Path) -> Result<Vec<IdTableEntry>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_corpus;

    #[test]
    fn reals_round_trip_exactly() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct W {
            #[serde(with = "reals")]
            v: Vec<f64>,
        }
        let w = W {
            v: vec![0.1, -1e-300, 1.0 / 3.0, 12345.678901234567, 0.0],
        };
        let s = serde_json::to_string(&w).unwrap();
        assert!(s.contains("\"0.1\""));
        let back: W = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corpus_round_trips_through_directory() {
        let c = generate_corpus(&super::super::GenConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
    }
}
