use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::datagen::Item;
use crate::error::{Error, Result};

/// Reserved ids, placed right after the content vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Special {
    Bos = 0,
    Eos,
    Emb,
    Image,
    Quote,
    The,
    Compression,
    Word,
    IsColon,
}

pub const N_SPECIAL: usize = 9;

/// Literal words of the suffix that precedes the quoted `[EMB]` slot.
pub const SUFFIX: [Special; 4] = [Special::The, Special::Compression, Special::Word, Special::IsColon];

impl Special {
    pub fn id(self, vocab_size: usize) -> u32 {
        vocab_size as u32 + self as u32
    }
}

/// `[BOS] <image> <text> The compression word is: " [EMB] " [EOS]`
///
/// Each `<image>` slot holds one patch, consumed in order by the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
    /// Row-major `n_patches x d_patch`.
    pub patches: Vec<f64>,
}

impl PromptTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn emb_position(&self, vocab_size: usize) -> Option<usize> {
        let emb = Special::Emb.id(vocab_size);
        self.ids.iter().position(|&t| t == emb)
    }
}

/// Number of prompt tokens that are not item text.
pub fn fixed_prompt_len(n_patches: usize) -> usize {
    1 + n_patches + SUFFIX.len() + 2 + 1 + 1
}

pub fn build_prompt(item: &Item, cfg: &EncoderConfig) -> Result<PromptTokens> {
    if item.content_tokens.is_empty() || item.image_patches.is_empty() {
        return Err(Error::Input(format!("item {} has empty content", item.item_id)));
    }
    if item.image_patches.len() != cfg.n_patches * cfg.d_patch {
        return Err(Error::shape(
            "build_prompt patches",
            &[item.image_patches.len()],
            &[cfg.n_patches * cfg.d_patch],
        ));
    }
    let fixed = fixed_prompt_len(cfg.n_patches);
    let text_budget = cfg.max_tokens.saturating_sub(fixed);
    let v = cfg.vocab_size;
    let mut ids = Vec::with_capacity(cfg.max_tokens);
    ids.push(Special::Bos.id(v));
    ids.extend(std::iter::repeat_n(Special::Image.id(v), cfg.n_patches));
    ids.extend(item.content_tokens.iter().take(text_budget));
    ids.extend(SUFFIX.iter().map(|s| s.id(v)));
    ids.push(Special::Quote.id(v));
    ids.push(Special::Emb.id(v));
    ids.push(Special::Quote.id(v));
    ids.push(Special::Eos.id(v));
    Ok(PromptTokens {
        ids,
        patches: item.image_patches.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(tokens: Vec<u32>) -> Item {
        Item {
            item_id: 0,
            topic_id: 0,
            latent: vec![0.0; 4],
            content_tokens: tokens,
            image_patches: vec![0.5; 32],
            is_cold: false,
        }
    }

    #[test]
    fn single_emb_with_bos_first_and_eos_last() {
        let cfg = EncoderConfig::default();
        let p = build_prompt(&item((0..16).collect()), &cfg).unwrap();
        let v = cfg.vocab_size;
        assert_eq!(p.ids.iter().filter(|&&t| t == Special::Emb.id(v)).count(), 1);
        assert_eq!(p.ids[0], Special::Bos.id(v));
        assert_eq!(*p.ids.last().unwrap(), Special::Eos.id(v));
    }

    #[test]
    fn default_length_is_constant() {
        let cfg = EncoderConfig::default();
        let p = build_prompt(&item((0..16).collect()), &cfg).unwrap();
        // BOS + 4 patches + 16 text + 4 suffix words + 2 quotes + EMB + EOS
        assert_eq!(p.len(), 1 + 4 + 16 + 4 + 2 + 1 + 1);
    }

    #[test]
    fn long_text_is_truncated_from_the_right() {
        let cfg = EncoderConfig::default();
        let p = build_prompt(&item((0..100).collect()), &cfg).unwrap();
        assert_eq!(p.len(), cfg.max_tokens);
        assert_eq!(p.ids[5], 0);
        let budget = cfg.max_tokens - fixed_prompt_len(cfg.n_patches);
        assert_eq!(p.ids[5 + budget - 1], budget as u32 - 1);
    }

    #[test]
    fn empty_content_is_rejected() {
        let cfg = EncoderConfig::default();
        assert!(matches!(build_prompt(&item(vec![]), &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn identical_content_gives_identical_prompts() {
        let cfg = EncoderConfig::default();
        let mut a = item(vec![3, 1, 4]);
        let mut b = a.clone();
        a.item_id = 1;
        b.item_id = 2;
        assert_eq!(build_prompt(&a, &cfg).unwrap(), build_prompt(&b, &cfg).unwrap());
    }
}
