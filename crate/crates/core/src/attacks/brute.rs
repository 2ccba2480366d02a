//! Brute-force search over patch locations.
//!
//! The defender controls the patch contents via whatever inner attack the
//! caller supplies; this module only enumerates *where* the patch goes —
//! either every valid placement at stride 1 or a uniform sample of them —
//! and aggregates the results.

use crate::data::PatchMask;
use crate::error::{Error, Result};
use crate::rng::RngState;

use super::AttackOutcome;

/// How to cover the placement grid.
#[derive(Debug, Clone, Copy)]
pub enum PlacementSearch {
    /// Every placement at stride 1: `(H - side + 1) * (W - side + 1)`.
    All,
    /// A uniform sample of placements (with replacement).
    Sample(usize),
}

/// Aggregated result of a location sweep.
#[derive(Debug)]
pub struct BruteForceReport {
    /// Placements attempted.
    pub tried: usize,
    /// Placements whose inner attack succeeded.
    pub successes: usize,
    /// The least-distorted successful attack, if any.
    pub best: Option<AttackOutcome>,
}

/// Run `attack` at every placement chosen by `search` for a square patch of
/// side `side`. With `stop_on_success` the sweep ends at the first success;
/// otherwise the whole grid is covered and the least-distorted success kept.
pub fn brute_force_locations<F>(
    image_height: usize,
    image_width: usize,
    side: usize,
    search: PlacementSearch,
    stop_on_success: bool,
    rng: &mut RngState,
    mut attack: F,
) -> Result<BruteForceReport>
where
    F: FnMut(&PatchMask) -> Result<AttackOutcome>,
{
    if side == 0 || side > image_height || side > image_width {
        return Err(Error::Config(format!(
            "patch side {side} does not fit a {image_height}x{image_width} image"
        )));
    }
    let rows = image_height - side + 1;
    let cols = image_width - side + 1;

    let placements: Vec<(usize, usize)> = match search {
        PlacementSearch::All => (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .collect(),
        PlacementSearch::Sample(n) => {
            if n == 0 {
                return Err(Error::Config("placement sample must be positive".into()));
            }
            (0..n)
                .map(|_| (rng.uniform_usize(rows), rng.uniform_usize(cols)))
                .collect()
        }
    };

    let mut report = BruteForceReport {
        tried: 0,
        successes: 0,
        best: None,
    };
    for (top, left) in placements {
        let mask = PatchMask::new_uncapped(top, left, side, side, image_height, image_width)?;
        let outcome = attack(&mask)?;
        report.tried += 1;
        if outcome.success {
            report.successes += 1;
            let better = report.best.as_ref().map_or(true, |b| outcome.l2 < b.l2);
            if better {
                report.best = Some(outcome);
            }
            if stop_on_success {
                break;
            }
        }
    }
    Ok(report)
}
