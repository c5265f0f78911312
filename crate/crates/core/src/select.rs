//! Token masks and feature extraction.
//!
//! An object's pixel mask is mapped onto a layer's token grid by coverage:
//! the image is cut into the grid's patch rectangles and a token belongs to
//! the object when at least `threshold` of its patch is covered. Features
//! are then read from the CLS slot, averaged over object tokens, or taken
//! from a single seeded random token.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::BitMask;
use crate::seed;
use crate::store::LayerEmbedding;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("object mask is empty")]
    EmptyObject,
    #[error("mask {mask_h}x{mask_w} is smaller than token grid {grid_h}x{grid_w}")]
    MaskTooSmall {
        mask_h: usize,
        mask_w: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("strategy {0} needs a token mask")]
    MissingMask(Strategy),
    #[error("layer has no CLS vector")]
    NoCls,
    #[error("token mask grid {mask:?} does not match embedding grid {grid:?}")]
    GridMismatch { mask: (usize, usize), grid: (usize, usize) },
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Cls,
    AvgObj,
    RandomObj,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Cls, Strategy::AvgObj, Strategy::RandomObj, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Cls => "CLS",
            Strategy::AvgObj => "AVG_OBJ",
            Strategy::RandomObj => "RANDOM_OBJ",
            Strategy::Random => "RANDOM",
        }
    }

    /// Whether the strategy reads from an object's tokens.
    pub fn needs_mask(self) -> bool {
        matches!(self, Strategy::AvgObj | Strategy::RandomObj)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy {s:?} (expected CLS, AVG_OBJ, RANDOM_OBJ or RANDOM)"))
    }
}

/// Row-major token membership over a layer's grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

impl TokenMask {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Pixel rows (or columns) `[start, end)` covered by patch `i` of `n` over
/// `size` pixels.
#[inline]
pub fn patch_span(i: usize, n: usize, size: usize) -> (usize, usize) {
    (i * size / n, (i + 1) * size / n)
}

/// Map a pixel mask onto a `grid` of tokens by patch coverage. When no
/// patch reaches `threshold`, the single best-covered token is kept (ties
/// to the lowest row-major index).
pub fn scale_mask_to_grid(mask: &BitMask, grid: (usize, usize), threshold: f64) -> Result<TokenMask, SelectError> {
    let (gh, gw) = grid;
    let (h, w) = (mask.height(), mask.width());
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SelectError::Threshold(threshold));
    }
    if h < gh || w < gw || gh == 0 || gw == 0 {
        return Err(SelectError::MaskTooSmall {
            mask_h: h,
            mask_w: w,
            grid_h: gh,
            grid_w: gw,
        });
    }
    // summed-area table, (h+1) x (w+1)
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row_sum = 0u32;
        for c in 0..w {
            row_sum += mask.get(r, c) as u32;
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row_sum;
        }
    }
    if sat[(h + 1) * (w + 1) - 1] == 0 {
        return Err(SelectError::EmptyObject);
    }
    let at = |r: usize, c: usize| sat[r * (w + 1) + c] as i64;

    let mut bits = vec![false; gh * gw];
    let mut best = (0usize, -1.0f64);
    for i in 0..gh {
        let (r0, r1) = patch_span(i, gh, h);
        for j in 0..gw {
            let (c0, c1) = patch_span(j, gw, w);
            let covered = at(r1, c1) - at(r0, c1) - at(r1, c0) + at(r0, c0);
            let fraction = covered as f64 / ((r1 - r0) * (c1 - c0)) as f64;
            let k = i * gw + j;
            bits[k] = fraction >= threshold;
            if fraction > best.1 {
                best = (k, fraction);
            }
        }
    }
    if !bits.iter().any(|&b| b) {
        bits[best.0] = true;
    }
    Ok(TokenMask {
        grid_h: gh,
        grid_w: gw,
        bits,
    })
}

/// Per-sample seed for the random strategies.
pub fn sample_seed(seed_value: u64, image_id: u64, strategy: Strategy) -> u64 {
    seed::derive(seed_value, &[image_id, seed::tag(strategy.as_str())])
}

/// Feature vector of one image under a token strategy.
pub fn extract_feature(
    embedding: &LayerEmbedding,
    token_mask: Option<&TokenMask>,
    strategy: Strategy,
    seed_value: u64,
) -> Result<Vec<f64>, SelectError> {
    let grid = (embedding.grid_h, embedding.grid_w);
    let object = match (strategy.needs_mask(), token_mask) {
        (true, None) => return Err(SelectError::MissingMask(strategy)),
        (true, Some(m)) => {
            if (m.grid_h, m.grid_w) != grid {
                return Err(SelectError::GridMismatch {
                    mask: (m.grid_h, m.grid_w),
                    grid,
                });
            }
            let idx: Vec<usize> = m.indices().collect();
            if idx.is_empty() {
                return Err(SelectError::EmptyObject);
            }
            idx
        }
        (false, _) => Vec::new(),
    };
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut rng = seed::rng(sample_seed(seed_value, embedding.image_id, strategy));
    Ok(match strategy {
        Strategy::Cls => widen(embedding.cls.as_deref().ok_or(SelectError::NoCls)?),
        Strategy::AvgObj => {
            let mut acc = vec![0.0f64; embedding.embed_dim];
            for &t in &object {
                for (a, &v) in acc.iter_mut().zip(embedding.token(t)) {
                    *a += v as f64;
                }
            }
            let n = object.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
        Strategy::RandomObj => widen(embedding.token(object[rng.random_range(0..object.len())])),
        Strategy::Random => widen(embedding.token(rng.random_range(0..embedding.n_tokens()))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn embedding(grid: (usize, usize), dim: usize) -> LayerEmbedding {
        let n = grid.0 * grid.1;
        LayerEmbedding {
            image_id: 17,
            grid_h: grid.0,
            grid_w: grid.1,
            embed_dim: dim,
            cls: Some(vec![-9.0; dim]),
            tokens: (0..n * dim).map(|v| v as f32).collect(),
        }
    }

    fn mask_from(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> BitMask {
        let mut m = BitMask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    #[test]
    fn full_mask_sets_every_token() {
        let m = mask_from(30, 45, |_, _| true);
        let t = scale_mask_to_grid(&m, (14, 14), 0.5).unwrap();
        assert_eq!(t.count(), 196);
    }

    #[test]
    fn single_patch_mask() {
        // 32x32 image, 4x4 grid: patch (1,2) covers rows 8..16, cols 16..24
        let m = mask_from(32, 32, |r, c| (8..16).contains(&r) && (16..24).contains(&c));
        let t = scale_mask_to_grid(&m, (4, 4), 0.5).unwrap();
        assert_eq!(t.indices().collect::<Vec<_>>(), vec![6]);
    }

    #[test]
    fn small_object_falls_back_to_argmax() {
        // one pixel in patch (2,3) and two in patch (0,0): (0,0) wins
        let m = mask_from(16, 16, |r, c| (r, c) == (9, 13) || (r == 0 && c < 2));
        let t = scale_mask_to_grid(&m, (4, 4), 0.5).unwrap();
        assert_eq!(t.indices().collect::<Vec<_>>(), vec![0]);
        // exact tie goes to the lowest index
        let m = mask_from(16, 16, |r, c| (r, c) == (9, 13) || (r, c) == (15, 15));
        let t = scale_mask_to_grid(&m, (4, 4), 0.5).unwrap();
        assert_eq!(t.indices().collect::<Vec<_>>(), vec![11]);
    }

    #[test]
    fn mask_errors() {
        let empty = BitMask::zeros(8, 8);
        assert_eq!(scale_mask_to_grid(&empty, (2, 2), 0.5), Err(SelectError::EmptyObject));
        let small = mask_from(2, 2, |_, _| true);
        assert!(matches!(
            scale_mask_to_grid(&small, (4, 4), 0.5),
            Err(SelectError::MaskTooSmall { .. })
        ));
    }

    #[test]
    fn avg_of_one_and_two() {
        let e = embedding((2, 2), 3);
        let mut bits = vec![false; 4];
        bits[2] = true;
        let one = TokenMask { grid_h: 2, grid_w: 2, bits: bits.clone() };
        assert_eq!(extract_feature(&e, Some(&one), Strategy::AvgObj, 0).unwrap(), vec![6.0, 7.0, 8.0]);
        bits[0] = true;
        let two = TokenMask { grid_h: 2, grid_w: 2, bits };
        assert_eq!(extract_feature(&e, Some(&two), Strategy::AvgObj, 0).unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn random_obj_deterministic_and_inside_mask() {
        let e = embedding((4, 4), 2);
        let mask = TokenMask {
            grid_h: 4,
            grid_w: 4,
            bits: (0..16).map(|i| i % 5 == 0).collect(),
        };
        let a = extract_feature(&e, Some(&mask), Strategy::RandomObj, 3).unwrap();
        let b = extract_feature(&e, Some(&mask), Strategy::RandomObj, 3).unwrap();
        assert_eq!(a, b);
        let token = (a[0] as usize) / 2;
        assert!(mask.bits[token]);
    }

    #[test]
    fn cls_and_strategy_errors() {
        let mut e = embedding((2, 2), 2);
        assert_eq!(extract_feature(&e, None, Strategy::Cls, 0).unwrap(), vec![-9.0, -9.0]);
        assert_eq!(
            extract_feature(&e, None, Strategy::AvgObj, 0),
            Err(SelectError::MissingMask(Strategy::AvgObj))
        );
        let wrong = TokenMask { grid_h: 1, grid_w: 4, bits: vec![true; 4] };
        assert!(matches!(
            extract_feature(&e, Some(&wrong), Strategy::RandomObj, 0),
            Err(SelectError::GridMismatch { .. })
        ));
        e.cls = None;
        assert_eq!(extract_feature(&e, None, Strategy::Cls, 0), Err(SelectError::NoCls));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("avg_obj".parse::<Strategy>().is_ok());
        assert!("MEAN".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn random_never_returns_cls(seed_value in any::<u64>(), id in any::<u64>()) {
            let mut e = embedding((3, 3), 2);
            e.image_id = id;
            let v = extract_feature(&e, None, Strategy::Random, seed_value).unwrap();
            prop_assert!(v != vec![-9.0, -9.0]);
            prop_assert!(v[0] >= 0.0 && v[0] < 18.0);
        }

        #[test]
        fn scaling_is_monotone(
            bits in proptest::collection::vec(any::<bool>(), 24 * 20),
            extra in proptest::collection::vec(any::<bool>(), 24 * 20),
            gh in 1usize..7, gw in 1usize..7, th in 0.05f64..1.0,
        ) {
            let base = BitMask::from_bits(24, 20, bits.clone()).unwrap();
            let more = BitMask::from_bits(24, 20, bits.iter().zip(&extra).map(|(a, b)| *a || *b).collect()).unwrap();
            prop_assume!(!base.is_empty());
            let a = scale_mask_to_grid(&base, (gh, gw), th).unwrap();
            let b = scale_mask_to_grid(&more, (gh, gw), th).unwrap();
            // compare threshold decisions only; fallback picks a single token
            let crossed = |m: &BitMask, t: &TokenMask| if t.count() == 1 {
                let area_ok = (0..gh*gw).filter(|&k| t.bits[k]).all(|k| {
                    let (r0, r1) = patch_span(k / gw, gh, 24);
                    let (c0, c1) = patch_span(k % gw, gw, 20);
                    let cov = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).filter(|&(r, c)| m.get(r, c)).count();
                    cov as f64 / ((r1 - r0) * (c1 - c0)) as f64 >= th
                });
                if area_ok { t.bits.clone() } else { vec![false; gh * gw] }
            } else { t.bits.clone() };
            let (ca, cb) = (crossed(&base, &a), crossed(&more, &b));
            for k in 0..gh * gw {
                prop_assert!(!ca[k] || cb[k]);
            }
        }

        #[test]
        fn avg_obj_is_in_convex_hull(bits in proptest::collection::vec(any::<bool>(), 9)) {
            prop_assume!(bits.iter().any(|&b| b));
            let e = embedding((3, 3), 2);
            let mask = TokenMask { grid_h: 3, grid_w: 3, bits: bits.clone() };
            let v = extract_feature(&e, Some(&mask), Strategy::AvgObj, 0).unwrap();
            let chosen: Vec<usize> = mask.indices().collect();
            for k in 0..2 {
                let lo = chosen.iter().map(|&t| e.token(t)[k] as f64).fold(f64::INFINITY, f64::min);
                let hi = chosen.iter().map(|&t| e.token(t)[k] as f64).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v[k] >= lo - 1e-9 && v[k] <= hi + 1e-9);
            }
            let mut rev = bits.clone();
            rev.reverse();
            // permuting the grid permutes tokens; the mean over the same token set is unchanged
            let mut e2 = e.clone();
            let n = 9;
            e2.tokens = (0..n).rev().flat_map(|t| e.token(t).to_vec()).collect();
            let m2 = TokenMask { grid_h: 3, grid_w: 3, bits: rev };
            prop_assert_eq!(extract_feature(&e2, Some(&m2), Strategy::AvgObj, 0).unwrap(), v);
        }
    }
}
