use super::Corpus;
use crate::error::{Error, Result};

/// Indices into `Corpus::interactions`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionSet {
    pub indices: Vec<usize>,
}

impl InteractionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn union(&self, other: &InteractionSet) -> InteractionSet {
        let mut indices: Vec<usize> = self.indices.iter().chain(&other.indices).copied().collect();
        indices.sort_unstable();
        InteractionSet { indices }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: InteractionSet,
    pub eval_warm: InteractionSet,
    pub eval_cold: InteractionSet,
}

/// Cold-item interactions go to `eval_cold`; warm interactions before the
/// cutoff are training data and the rest are `eval_warm`.
pub fn split_train_eval(corpus: &Corpus) -> Result<Splits> {
    let mut s = Splits {
        train: InteractionSet::default(),
        eval_warm: InteractionSet::default(),
        eval_cold: InteractionSet::default(),
    };
    for (k, it) in corpus.interactions.iter().enumerate() {
        if corpus.item(it.item_id).is_cold {
            s.eval_cold.indices.push(k);
        } else if it.timestamp < corpus.cutoff {
            s.train.indices.push(k);
        } else {
            s.eval_warm.indices.push(k);
        }
    }
    if s.eval_cold.is_empty() {
        return Err(Error::EmptySplit("corpus has no cold-item interactions".into()));
    }
    if s.train.is_empty() {
        return Err(Error::EmptySplit("corpus has no training interactions".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::datagen::{generate_corpus, GenConfig};

    #[test]
    fn splits_partition_interactions_and_isolate_cold_items() {
        let c = generate_corpus(&GenConfig::tiny()).unwrap();
        let s = split_train_eval(&c).unwrap();
        assert_eq!(
            s.train.len() + s.eval_warm.len() + s.eval_cold.len(),
            c.interactions.len()
        );
        let train_items: HashSet<u32> = s
            .train
            .indices
            .iter()
            .map(|&k| c.interactions[k].item_id)
            .collect();
        let cold_items: HashSet<u32> = s
            .eval_cold
            .indices
            .iter()
            .map(|&k| c.interactions[k].item_id)
            .collect();
        assert!(train_items.is_disjoint(&cold_items));
        assert!(cold_items.iter().all(|&i| c.item(i).is_cold));
        let train_ids: HashSet<usize> = s.train.indices.iter().copied().collect();
        assert!(s.eval_warm.indices.iter().all(|k| !train_ids.contains(k)));
    }

    #[test]
    fn no_cold_interactions_is_an_error() {
        let mut c = generate_corpus(&GenConfig::tiny()).unwrap();
        c.interactions.retain(|i| !c.items[i.item_id as usize].is_cold);
        assert!(matches!(split_train_eval(&c), Err(Error::EmptySplit(_))));
    }
}
