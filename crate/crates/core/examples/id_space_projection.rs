//! Projects the ID targets to 2-D and compares cluster structure between the
//! clustered and irregular ID spaces. Writes one CSV per mode.

use std::collections::BTreeMap;

use anyhow::Result;
use coldproxy::align1::preprocess_id_table;
use coldproxy::datagen::{generate_corpus, GenConfig, IdSpaceMode};
use coldproxy::evalkit::{kmeans_silhouette, project_2d, projection_csv};

fn main() -> Result<()> {
    for mode in [IdSpaceMode::Clustered, IdSpaceMode::Irregular] {
        let corpus = generate_corpus(&GenConfig {
            id_space_mode: mode,
            ..GenConfig::default()
        })?;
        let table = preprocess_id_table(&corpus.id_table, 5)?;
        let topics: BTreeMap<u32, u32> = corpus.items.iter().map(|i| (i.item_id, i.topic_id)).collect();
        let points = project_2d(&table.targets, &topics)?;
        let full: Vec<Vec<f64>> = table.targets.values().cloned().collect();
        let flat: Vec<Vec<f64>> = points.iter().map(|p| vec![p.x, p.y]).collect();
        println!(
            "{mode:?}: silhouette full {:.3}, 2-D {:.3}",
            kmeans_silhouette(&full, 3, 0)?,
            kmeans_silhouette(&flat, 3, 0)?
        );
        let path = format!("projection_{mode:?}.csv").to_lowercase();
        std::fs::write(&path, projection_csv(&points))?;
        println!("  wrote {path}");
    }
    Ok(())
}
