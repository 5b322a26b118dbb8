use super::Shot;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// One training window: `seq_len` consecutive timesteps of one shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkRef {
    pub shot_idx: usize,
    /// Start timestep within the shot.
    pub offset: usize,
}

/// Cut every shot into non-overlapping full-length chunks; trailing partial
/// windows are dropped (training only sees complete windows, evaluation
/// pads instead).
pub fn chunk_index(shots: &[Shot], seq_len: usize) -> Vec<ChunkRef> {
    let mut chunks = Vec::new();
    for (shot_idx, shot) in shots.iter().enumerate() {
        let full = shot.t_len() / seq_len;
        for k in 0..full {
            chunks.push(ChunkRef { shot_idx, offset: k * seq_len });
        }
    }
    chunks
}

/// Shuffle the chunk list with the epoch seed and deal it round-robin to
/// `n_ranks` workers in batches of `beta0`. Every rank receives the same
/// number of batches (remainder chunks are dropped to keep the lock-step
/// step counts equal) and no chunk appears on two ranks.
pub fn shard_epoch(
    chunks: &[ChunkRef],
    beta0: usize,
    n_ranks: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<Vec<ChunkRef>>>> {
    if n_ranks == 0 || beta0 == 0 {
        return Err(Error::Config("shard_epoch needs n_ranks >= 1 and beta0 >= 1".into()));
    }
    let per_step = n_ranks * beta0;
    let steps = chunks.len() / per_step;
    if steps == 0 {
        return Err(Error::Config(format!(
            "not enough data: {} chunks for {} ranks x batch {} (need at least {})",
            chunks.len(),
            n_ranks,
            beta0,
            per_step
        )));
    }

    let mut order: Vec<ChunkRef> = chunks.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    order.truncate(steps * per_step);

    let mut per_rank: Vec<Vec<ChunkRef>> = vec![Vec::with_capacity(steps * beta0); n_ranks];
    for (i, c) in order.into_iter().enumerate() {
        per_rank[i % n_ranks].push(c);
    }
    Ok(per_rank
        .into_iter()
        .map(|list| list.chunks(beta0).map(|b| b.to_vec()).collect())
        .collect())
}

/// A materialized mini-batch: `[B, T, D]` features, `[B, T]` targets in
/// {-1, +1}, and the provenance of every row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub targets: Vec<f64>,
    pub shot_ids: Vec<u64>,
    pub offsets: Vec<usize>,
}

/// Build batch tensors for a set of chunks. Timesteps within `horizon` of a
/// disruption are labelled +1, everything else -1.
pub fn make_batch(shots: &[Shot], chunks: &[ChunkRef], seq_len: usize, horizon: usize) -> Batch {
    let b = chunks.len();
    let d = shots.first().map_or(0, |s| s.d);
    let mut x = vec![0.0; b * seq_len * d];
    let mut targets = vec![-1.0; b * seq_len];
    let mut shot_ids = Vec::with_capacity(b);
    let mut offsets = Vec::with_capacity(b);

    for (row, c) in chunks.iter().enumerate() {
        let shot = &shots[c.shot_idx];
        shot_ids.push(shot.id);
        offsets.push(c.offset);
        let positive_from = shot
            .t_disrupt
            .map(|td| (td as usize).saturating_sub(horizon));
        for t in 0..seq_len {
            let abs_t = c.offset + t;
            for ch in 0..d {
                x[row * seq_len * d + t * d + ch] = shot.at(abs_t, ch);
            }
            if let Some(from) = positive_from {
                if abs_t >= from {
                    targets[row * seq_len + t] = 1.0;
                }
            }
        }
    }
    Batch { b, t: seq_len, d, x, targets, shot_ids, offsets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn quiet_shot(id: u64, t_len: usize, d: usize) -> Shot {
        Shot {
            id,
            disruptive: false,
            t_disrupt: None,
            d,
            data: (0..t_len * d).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn chunking_drops_partial_tails() {
        let shots = vec![quiet_shot(0, 10, 2), quiet_shot(1, 7, 2)];
        let chunks = chunk_index(&shots, 4);
        // 10/4 = 2 chunks, 7/4 = 1 chunk.
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0], ChunkRef { shot_idx: 0, offset: 0 });
        assert_eq!(chunks[1], ChunkRef { shot_idx: 0, offset: 4 });
        assert_eq!(chunks[2], ChunkRef { shot_idx: 1, offset: 0 });
    }

    #[test]
    fn forty_chunks_four_ranks_one_batch_each() {
        let chunks: Vec<ChunkRef> =
            (0..40).map(|i| ChunkRef { shot_idx: i, offset: 0 }).collect();
        let shards = shard_epoch(&chunks, 10, 4, 1).unwrap();
        assert_eq!(shards.len(), 4);
        let mut seen = HashSet::new();
        for rank in &shards {
            assert_eq!(rank.len(), 1); // one batch per rank
            assert_eq!(rank[0].len(), 10);
            for c in &rank[0] {
                assert!(seen.insert(*c), "chunk on two ranks: {c:?}");
            }
        }
        assert_eq!(seen.len(), 40);
    }

    #[test]
    fn single_rank_gets_everything() {
        let chunks: Vec<ChunkRef> =
            (0..12).map(|i| ChunkRef { shot_idx: i, offset: 0 }).collect();
        let shards = shard_epoch(&chunks, 3, 1, 7).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 4);
        let total: usize = shards[0].iter().map(Vec::len).sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn epochs_permute_but_preserve_the_multiset() {
        let chunks: Vec<ChunkRef> =
            (0..64).map(|i| ChunkRef { shot_idx: i, offset: 0 }).collect();
        let flat = |shards: Vec<Vec<Vec<ChunkRef>>>| -> Vec<ChunkRef> {
            shards.into_iter().flatten().flatten().collect()
        };
        let e0 = flat(shard_epoch(&chunks, 8, 2, 100).unwrap());
        let e1 = flat(shard_epoch(&chunks, 8, 2, 101).unwrap());
        assert_ne!(e0, e1, "different epoch seeds should reorder");
        let set = |v: &[ChunkRef]| v.iter().copied().collect::<HashSet<_>>();
        assert_eq!(set(&e0), set(&e1));
        // Same seed, same order.
        let e0_again = flat(shard_epoch(&chunks, 8, 2, 100).unwrap());
        assert_eq!(e0, e0_again);
    }

    #[test]
    fn remainder_loss_is_bounded() {
        // 43 chunks, 2 ranks x batch 4: keeps 40, drops 3 (< N*beta0 = 8).
        let chunks: Vec<ChunkRef> =
            (0..43).map(|i| ChunkRef { shot_idx: i, offset: 0 }).collect();
        let shards = shard_epoch(&chunks, 4, 2, 0).unwrap();
        let used: usize = shards.iter().flatten().map(Vec::len).sum();
        assert_eq!(used, 40);
        assert!(chunks.len() - used < 8);
    }

    #[test]
    fn insufficient_chunks_is_a_config_error() {
        let chunks: Vec<ChunkRef> =
            (0..7).map(|i| ChunkRef { shot_idx: i, offset: 0 }).collect();
        assert!(shard_epoch(&chunks, 4, 2, 0).is_err());
    }

    #[test]
    fn targets_follow_the_horizon_rule() {
        let mut shot = quiet_shot(5, 12, 1);
        shot.disruptive = true;
        shot.t_disrupt = Some(11);
        let shots = vec![shot];
        // horizon 4: timesteps 7..=11 are positive.
        let batch = make_batch(
            &shots,
            &[ChunkRef { shot_idx: 0, offset: 0 }, ChunkRef { shot_idx: 0, offset: 6 }],
            6,
            4,
        );
        assert_eq!(batch.b, 2);
        // First chunk covers t=0..5: all negative.
        assert!(batch.targets[0..6].iter().all(|&t| t == -1.0));
        // Second covers t=6..11: 6 negative, 7..11 positive.
        assert_eq!(batch.targets[6..12], [-1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(batch.shot_ids, vec![5, 5]);
        assert_eq!(batch.offsets, vec![0, 6]);
        // Features copied faithfully.
        assert_eq!(batch.x[0..3], [0.0, 1.0, 2.0]);
        assert_eq!(batch.x[6..9], [6.0, 7.0, 8.0]);
    }

    #[test]
    fn quiet_shots_are_all_negative() {
        let shots = vec![quiet_shot(0, 8, 2)];
        let batch = make_batch(&shots, &[ChunkRef { shot_idx: 0, offset: 0 }], 8, 200);
        assert!(batch.targets.iter().all(|&t| t == -1.0));
    }
}
