//! Batch planning over variable-length audio.
//!
//! Two policies: pad everything to a fixed duration (the Whisper-style
//! 30 s baseline) or sort by length and slice into buckets so batch mates
//! have similar durations. Waste is the fraction of padded audio-seconds
//! that carry no signal.

use crate::error::{Error, Result};
use crate::nn::rng::ModelRng;

pub const DEFAULT_FIXED_PAD_S: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthSample {
    pub id: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    FixedPad,
    SortedBucket,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::FixedPad => "fixed_pad",
            Policy::SortedBucket => "sorted_bucket",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannedBatch {
    pub padded_s: f64,
    pub members: Vec<LengthSample>,
}

#[derive(Debug, Clone)]
pub struct BucketPlan {
    pub policy: Policy,
    pub batches: Vec<PlannedBatch>,
}

fn check_samples(samples: &[LengthSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to plan".to_string()));
    }
    for s in samples {
        if !(s.duration_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample {} has non-positive duration {}",
                s.id, s.duration_s
            )));
        }
    }
    Ok(())
}

/// Batches of `batch_size` in input order, every one padded to `pad_to_s`.
pub fn plan_fixed(
    samples: &[LengthSample],
    batch_size: usize,
    pad_to_s: f64,
) -> Result<BucketPlan> {
    check_samples(samples)?;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".to_string()));
    }
    for s in samples {
        if s.duration_s > pad_to_s {
            return Err(Error::InvalidArgument(format!(
                "sample {} ({} s) exceeds the fixed pad of {} s",
                s.id, s.duration_s, pad_to_s
            )));
        }
    }
    let batches = samples
        .chunks(batch_size)
        .map(|chunk| PlannedBatch {
            padded_s: pad_to_s,
            members: chunk.to_vec(),
        })
        .collect();
    Ok(BucketPlan {
        policy: Policy::FixedPad,
        batches,
    })
}

/// Sort by duration descending (ties by id ascending), slice into
/// consecutive batches, pad each to its own maximum.
pub fn plan_sorted_buckets(samples: &[LengthSample], batch_size: usize) -> Result<BucketPlan> {
    check_samples(samples)?;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".to_string()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| {
        b.duration_s
            .partial_cmp(&a.duration_s)
            .expect("durations are finite")
            .then(a.id.cmp(&b.id))
    });
    let batches = sorted
        .chunks(batch_size)
        .map(|chunk| PlannedBatch {
            padded_s: chunk
                .iter()
                .map(|s| s.duration_s)
                .fold(0.0f64, f64::max),
            members: chunk.to_vec(),
        })
        .collect();
    Ok(BucketPlan {
        policy: Policy::SortedBucket,
        batches,
    })
}

/// Padded compute-seconds that carry no audio, as a fraction of all padded
/// compute-seconds: (sum batch_len*padded - sum durations) / (sum batch_len*padded).
pub fn padding_waste(plan: &BucketPlan) -> Result<f64> {
    if plan.batches.is_empty() {
        return Err(Error::InvalidArgument("empty plan".to_string()));
    }
    let mut padded = 0.0;
    let mut real = 0.0;
    for b in &plan.batches {
        padded += b.members.len() as f64 * b.padded_s;
        for m in &b.members {
            real += m.duration_s;
        }
    }
    Ok((padded - real) / padded)
}

/// Plan rows as `batch_index,id,duration_s,padded_s`.
pub fn plan_to_csv(plan: &BucketPlan) -> String {
    let mut out = String::from("batch_index,id,duration_s,padded_s\n");
    for (bi, b) in plan.batches.iter().enumerate() {
        for m in &b.members {
            out.push_str(&format!("{},{},{},{}\n", bi, m.id, m.duration_s, b.padded_s));
        }
    }
    out
}

/// Length distribution used for the padding experiments: 90% of samples
/// uniform in [1, 10] s, 10% uniform in [10, 30] s.
pub fn training_length_distribution(n: usize, seed: u64) -> Vec<LengthSample> {
    let mut rng = ModelRng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let duration_s = if rng.coin(0.9) {
                rng.uniform(1.0, 10.0)
            } else {
                rng.uniform(10.0, 30.0)
            };
            LengthSample {
                id: id as u64,
                duration_s,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(durations: &[f64]) -> Vec<LengthSample> {
        durations
            .iter()
            .enumerate()
            .map(|(i, &d)| LengthSample {
                id: i as u64,
                duration_s: d,
            })
            .collect()
    }

    #[test]
    fn fixed_plan_examples() {
        let s = samples(&[2.0, 3.0, 9.0, 10.0]);
        let plan = plan_fixed(&s, 4, 30.0).unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].padded_s, 30.0);
        let waste = padding_waste(&plan).unwrap();
        assert!((waste - 0.80).abs() < 1e-12);

        let single = plan_fixed(&samples(&[30.0]), 1, 30.0).unwrap();
        assert_eq!(padding_waste(&single).unwrap(), 0.0);

        let five = plan_fixed(&samples(&[1.0; 5]), 2, 30.0).unwrap();
        assert_eq!(five.batches.len(), 3);
        assert_eq!(five.batches[2].members.len(), 1);

        assert!(plan_fixed(&samples(&[31.0]), 1, 30.0).is_err());
    }

    #[test]
    fn sorted_plan_examples() {
        let s = samples(&[2.0, 3.0, 9.0, 10.0]);
        let plan = plan_sorted_buckets(&s, 2).unwrap();
        assert_eq!(plan.batches.len(), 2);
        assert_eq!(plan.batches[0].padded_s, 10.0);
        assert_eq!(plan.batches[1].padded_s, 3.0);
        let waste = padding_waste(&plan).unwrap();
        assert!((waste - 2.0 / 26.0).abs() < 1e-12);

        let equal = plan_sorted_buckets(&samples(&[4.0; 6]), 3).unwrap();
        assert_eq!(padding_waste(&equal).unwrap(), 0.0);

        let singles = plan_sorted_buckets(&s, 1).unwrap();
        assert_eq!(padding_waste(&singles).unwrap(), 0.0);
    }

    #[test]
    fn sorted_ties_break_by_id() {
        let s = samples(&[5.0, 5.0, 5.0]);
        let plan = plan_sorted_buckets(&s, 2).unwrap();
        let ids: Vec<u64> = plan
            .batches
            .iter()
            .flat_map(|b| b.members.iter().map(|m| m.id))
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn csv_layout() {
        let s = samples(&[2.0, 3.0]);
        let plan = plan_sorted_buckets(&s, 2).unwrap();
        let csv = plan_to_csv(&plan);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "batch_index,id,duration_s,padded_s");
        assert_eq!(lines.next().unwrap(), "0,1,3,3");
        assert_eq!(lines.next().unwrap(), "0,0,2,3");
    }

    #[test]
    fn distribution_matches_its_spec() {
        let dist = training_length_distribution(2000, 9);
        assert_eq!(dist.len(), 2000);
        let short = dist.iter().filter(|s| s.duration_s <= 10.0).count();
        assert!(short > 1600 && short < 1950, "short count {short}");
        assert!(dist
            .iter()
            .all(|s| s.duration_s >= 1.0 && s.duration_s <= 30.0));
    }

    proptest! {
        #[test]
        fn sorted_never_wastes_more_than_fixed(
            durations in proptest::collection::vec(0.1f64..30.0, 1..80),
            batch_size in 1usize..10,
        ) {
            let s = samples(&durations);
            let fixed = plan_fixed(&s, batch_size, 30.0).unwrap();
            let sorted = plan_sorted_buckets(&s, batch_size).unwrap();
            let wf = padding_waste(&fixed).unwrap();
            let ws = padding_waste(&sorted).unwrap();
            prop_assert!(ws <= wf + 1e-12, "sorted {} > fixed {}", ws, wf);
        }

        #[test]
        fn plans_partition_the_input(
            durations in proptest::collection::vec(0.1f64..30.0, 1..80),
            batch_size in 1usize..10,
        ) {
            let s = samples(&durations);
            for plan in [
                plan_fixed(&s, batch_size, 30.0).unwrap(),
                plan_sorted_buckets(&s, batch_size).unwrap(),
            ] {
                let mut ids: Vec<u64> = plan
                    .batches
                    .iter()
                    .flat_map(|b| b.members.iter().map(|m| m.id))
                    .collect();
                ids.sort_unstable();
                let want: Vec<u64> = (0..s.len() as u64).collect();
                prop_assert_eq!(ids, want);
                for b in &plan.batches {
                    for m in &b.members {
                        prop_assert!(b.padded_s >= m.duration_s);
                    }
                }
            }
        }

        #[test]
        fn increasing_fixed_pad_never_decreases_waste(
            durations in proptest::collection::vec(0.1f64..30.0, 1..40),
            batch_size in 1usize..6,
            extra in 0.0f64..40.0,
        ) {
            let s = samples(&durations);
            let a = padding_waste(&plan_fixed(&s, batch_size, 30.0).unwrap()).unwrap();
            let b = padding_waste(&plan_fixed(&s, batch_size, 30.0 + extra).unwrap()).unwrap();
            prop_assert!(b >= a - 1e-12);
        }
    }
}
