//! Offline caption grammar. A [`Scene`] fixes every slot, so the same value
//! drives both the caption text and the rendered shapes image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ClassVocabulary;
use crate::error::Result;

pub const CAPTION_PREFIX: &str = "This is an image of";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::TopLeft,
        Region::TopRight,
        Region::BottomLeft,
        Region::BottomRight,
        Region::Center,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Region::TopLeft => "at top left",
            Region::TopRight => "at top right",
            Region::BottomLeft => "at bottom left",
            Region::BottomRight => "at bottom right",
            Region::Center => "in the center",
        }
    }
}

/// Color names (at most four letters) with their RGB values.
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("blue", [0.10, 0.25, 0.90]),
    ("pink", [0.95, 0.45, 0.70]),
    ("gray", [0.45, 0.45, 0.45]),
    ("teal", [0.05, 0.55, 0.55]),
    ("gold", [0.90, 0.70, 0.05]),
    ("navy", [0.05, 0.05, 0.35]),
    ("lime", [0.45, 0.90, 0.10]),
];

pub const COUNT_WORDS: [&str; 3] = ["once", "twice", "thrice"];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub class_index: usize,
    pub class: String,
    pub region: Region,
    /// Index into [`COLORS`].
    pub color: usize,
    /// Number of glyph copies, 1..=3.
    pub count: usize,
}

impl Scene {
    /// Samples the class uniformly (or by vocabulary weights) and every other
    /// slot uniformly.
    pub fn sample<R: Rng + ?Sized>(vocab: &ClassVocabulary, rng: &mut R) -> Scene {
        let class_index = vocab.sample_index(rng);
        Scene::sample_for(vocab, class_index, rng)
    }

    pub fn sample_for<R: Rng + ?Sized>(vocab: &ClassVocabulary, class_index: usize, rng: &mut R) -> Scene {
        Scene {
            class_index,
            class: vocab.names()[class_index].clone(),
            region: Region::ALL[rng.random_range(0..Region::ALL.len())],
            color: rng.random_range(0..COLORS.len()),
            count: rng.random_range(1..=COUNT_WORDS.len()),
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "{CAPTION_PREFIX} {} {} {} in {} {}",
            article(&self.class),
            self.class,
            self.region.phrase(),
            COLORS[self.color].0,
            COUNT_WORDS[self.count - 1]
        )
    }
}

pub fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Template caption for a named class.
pub fn template_caption<R: Rng + ?Sized>(vocab: &ClassVocabulary, class: &str, rng: &mut R) -> Result<Scene> {
    let idx = vocab.index_of(class)?;
    Ok(Scene::sample_for(vocab, idx, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn caption_shape() {
        let s = Scene {
            class_index: 0,
            class: "owl".into(),
            region: Region::Center,
            color: 3,
            count: 2,
        };
        assert_eq!(s.caption(), "This is an image of an owl in the center in gray twice");
    }

    #[test]
    fn every_caption_fits_the_token_budget() {
        let vocab = ClassVocabulary::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..vocab.len() {
            for _ in 0..20 {
                let c = Scene::sample_for(&vocab, i, &mut rng).caption();
                assert!(c.len() <= super::super::tokenizer::MAX_LEN - 2, "{c}");
                assert!(c.split_whitespace().count() >= 8);
            }
        }
    }
}
