//! Hard monotonic alignment between phonemes and frames.

use crate::error::{Error, Result};

/// Maximises the summed similarity `sim[i][t]` over all segmentations of
/// `m` frames into `n` contiguous, non-empty, in-order segments, and returns
/// the segment lengths. `sim` is `n x m`.
///
/// Ties prefer extending the current phoneme over advancing.
pub fn monotonic_alignment(sim: &[Vec<f64>]) -> Result<Vec<u32>> {
    let n = sim.len();
    if n == 0 {
        return Err(Error::invalid("cannot align an empty phoneme sequence"));
    }
    let m = sim[0].len();
    if sim.iter().any(|row| row.len() != m) {
        return Err(Error::invalid("similarity rows have unequal lengths"));
    }
    if m < n {
        return Err(Error::AlignmentInfeasible {
            phonemes: n,
            frames: m,
        });
    }

    // best[i][t]: best score of frames 0..=t with frame t assigned to phoneme i.
    let neg = f64::NEG_INFINITY;
    let mut best = vec![vec![neg; m]; n];
    best[0][0] = sim[0][0];
    for t in 1..m {
        // Phoneme i needs at least i earlier frames and leaves n-1-i for later.
        let lo = (t + n).saturating_sub(m);
        let hi = t.min(n - 1);
        for i in lo..=hi {
            let stay = best[i][t - 1];
            let advance = if i > 0 { best[i - 1][t - 1] } else { neg };
            best[i][t] = sim[i][t] + stay.max(advance);
        }
    }

    let mut durations = vec![0u32; n];
    let mut i = n - 1;
    for t in (0..m).rev() {
        durations[i] += 1;
        if t == 0 {
            break;
        }
        if i > 0 && (i == t || best[i - 1][t - 1] > best[i][t - 1]) {
            i -= 1;
        }
    }
    debug_assert_eq!(i, 0);
    Ok(durations)
}

/// Summed similarity of a segmentation.
pub fn segmentation_score(sim: &[Vec<f64>], durations: &[u32]) -> f64 {
    let mut t = 0;
    let mut total = 0.0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            total += sim[i][t];
            t += 1;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_phoneme_takes_everything() {
        let sim = vec![vec![0.3, -1.0, 2.0, 0.0]];
        assert_eq!(monotonic_alignment(&sim).unwrap(), vec![4]);
    }

    #[test]
    fn hand_example() {
        let sim = vec![vec![10.0, 0.0, 0.0], vec![0.0, 10.0, 10.0]];
        assert_eq!(monotonic_alignment(&sim).unwrap(), vec![1, 2]);
    }

    #[test]
    fn square_case_is_diagonal() {
        let sim = vec![vec![-5.0; 3]; 3];
        assert_eq!(monotonic_alignment(&sim).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn too_few_frames() {
        let sim = vec![vec![0.0; 2]; 3];
        assert!(matches!(
            monotonic_alignment(&sim),
            Err(Error::AlignmentInfeasible { phonemes: 3, frames: 2 })
        ));
    }
}
