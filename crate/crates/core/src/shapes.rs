//! Procedural shapes corpus: every class is a distinct 3x3 glyph drawn on a
//! patch-aligned cell grid, so each caption slot is visible in the pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capgen::template::{Region, Scene, COLORS};
use crate::capgen::{CaptionRecord, ClassVocabulary};
use crate::error::{ensure, Result};
use crate::vq::{ToyImage, VqConfig};

const GLYPH: usize = 3;

/// All 3x3 masks with 4 to 6 cells set, in ascending order.
fn glyph_table() -> Vec<u16> {
    (0u16..512).filter(|m| (4..=6).contains(&m.count_ones())).collect()
}

/// Bitmap for class `index`; distinct for every index below the table size.
pub fn glyph(index: usize) -> Result<u16> {
    let table = glyph_table();
    ensure!(index < table.len(), Parameter, "no glyph for class index {index}");
    // 5 is coprime with the table size, so the stride visits each mask once.
    Ok(table[(index * 5) % table.len()])
}

/// Top-left cell of a region on a `side x side` cell grid.
pub fn region_origin(region: Region, side: usize) -> (usize, usize) {
    let far = side - GLYPH;
    let mid = far / 2;
    match region {
        Region::TopLeft => (0, 0),
        Region::TopRight => (0, far),
        Region::BottomLeft => (far, 0),
        Region::BottomRight => (far, far),
        Region::Center => (mid, mid),
    }
}

/// Regions used for the first, second and third copy of a glyph.
pub fn placements(region: Region, count: usize) -> Vec<Region> {
    let extra = match region {
        Region::Center => [Region::TopRight, Region::BottomLeft],
        Region::TopLeft => [Region::BottomRight, Region::TopRight],
        Region::TopRight => [Region::BottomLeft, Region::TopLeft],
        Region::BottomLeft => [Region::TopRight, Region::BottomRight],
        Region::BottomRight => [Region::TopLeft, Region::BottomLeft],
    };
    std::iter::once(region).chain(extra).take(count).collect()
}

/// Renders `scene` with one glyph cell per patch and a light background
/// shade drawn from `rng`.
pub fn render<R: Rng + ?Sized>(scene: &Scene, cfg: &VqConfig, rng: &mut R) -> Result<ToyImage> {
    ensure!(
        cfg.side >= 2 * GLYPH,
        Config,
        "grid side {} too small for the shapes corpus",
        cfg.side
    );
    ensure!(
        (1..=3).contains(&scene.count),
        Parameter,
        "count {} out of range",
        scene.count
    );
    let mask = glyph(scene.class_index)?;
    let bg = [
        rng.random_range(0.80..1.0f32),
        rng.random_range(0.80..1.0f32),
        rng.random_range(0.80..1.0f32),
    ];
    let mut img = ToyImage::filled(cfg.image_side(), bg);
    let fg = COLORS[scene.color].1;
    for region in placements(scene.region, scene.count) {
        let (oy, ox) = region_origin(region, cfg.side);
        for cell in 0..GLYPH * GLYPH {
            if mask >> cell & 1 == 0 {
                continue;
            }
            let (cy, cx) = (oy + cell / GLYPH, ox + cell % GLYPH);
            for py in 0..cfg.patch {
                for px in 0..cfg.patch {
                    img.set_pixel(cy * cfg.patch + py, cx * cfg.patch + px, fg);
                }
            }
        }
    }
    Ok(img)
}

/// Template caption plus rendered image; record `i` uses seed `base_seed + i`.
#[derive(Clone, Debug)]
pub struct ShapesExample {
    pub caption: CaptionRecord,
    pub image: ToyImage,
}

pub fn shapes_corpus(vocab: &ClassVocabulary, cfg: &VqConfig, n: usize, base_seed: u64) -> Result<Vec<ShapesExample>> {
    crate::capgen::template_corpus(vocab, n, base_seed)
        .into_iter()
        .map(|caption| {
            let seed = caption.seed.expect("template records carry a seed");
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1a6e);
            let scene = caption.scene.as_ref().expect("template records carry a scene");
            let image = render(scene, cfg, &mut rng)?;
            Ok(ShapesExample { caption, image })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn glyphs_are_distinct_for_builtin_classes() {
        let g: HashSet<u16> = (0..200).map(|i| glyph(i).unwrap()).collect();
        assert_eq!(g.len(), 200);
    }

    #[test]
    fn copies_never_overlap() {
        for r in Region::ALL {
            let cells: Vec<(usize, usize)> = placements(r, 3).iter().map(|&p| region_origin(p, 8)).collect();
            for i in 0..3 {
                for j in i + 1..3 {
                    let (a, b) = (cells[i], cells[j]);
                    let overlap = a.0.abs_diff(b.0) < GLYPH && a.1.abs_diff(b.1) < GLYPH;
                    assert!(!overlap, "{r:?}: {a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn patches_are_uniform() {
        let vocab = ClassVocabulary::builtin().truncated(50).unwrap();
        let cfg = VqConfig::default();
        for ex in shapes_corpus(&vocab, &cfg, 10, 0).unwrap() {
            let p = ex.image.patches(cfg.patch).unwrap();
            for patch in p.chunks_exact(cfg.patch_dim()) {
                assert!(patch.chunks_exact(3).all(|px| px == &patch[..3]));
            }
        }
    }
}
