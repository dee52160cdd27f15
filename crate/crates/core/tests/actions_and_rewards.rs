use std::collections::BTreeSet;

use proptest::prelude::*;

use cogradar_core::env::{
    count_collisions, count_missed_opportunities, enumerate_actions, largest_free_block, reward, ActionSpace,
    RewardParams,
};
use cogradar_core::mask::SubbandMask;

/// Every bit pattern whose set bits form one non-empty contiguous run.
fn brute_force_runs(n: usize) -> BTreeSet<u32> {
    (1u32..(1 << n))
        .filter(|&b| {
            let bits: Vec<bool> = (0..n).map(|i| b >> i & 1 == 1).collect();
            let first = bits.iter().position(|&x| x).unwrap();
            let last = bits.iter().rposition(|&x| x).unwrap();
            bits[first..=last].iter().all(|&x| x)
        })
        .collect()
}

#[test]
fn five_subbands_give_fifteen_actions() {
    assert_eq!(enumerate_actions(5).len(), 15);
}

#[test]
fn enumeration_matches_brute_force_up_to_ten() {
    for n in 1..=10 {
        let actions = enumerate_actions(n);
        assert_eq!(actions.len(), n * (n + 1) / 2, "count for n = {n}");
        let bits: BTreeSet<u32> = actions.iter().map(|m| m.bits()).collect();
        assert_eq!(bits.len(), actions.len(), "duplicates for n = {n}");
        assert_eq!(bits, brute_force_runs(n), "set for n = {n}");
        assert!(actions.iter().all(|m| m.len() == n));
    }
}

#[test]
fn action_indices_round_trip() {
    let space = ActionSpace::new(7);
    for (i, m) in space.masks().iter().enumerate() {
        assert_eq!(space.index_of(*m), Some(i));
        assert_eq!(space.mask(i).unwrap(), *m);
    }
    assert!(space.mask(space.len()).is_err());
    assert_eq!(space.index_of(SubbandMask::empty(7)), None);
}

fn mask_of(n: usize) -> impl Strategy<Value = SubbandMask> {
    (0u32..(1 << n)).prop_map(move |b| SubbandMask::from_bits(n, b))
}

fn scene() -> impl Strategy<Value = (SubbandMask, SubbandMask)> {
    (1usize..=10).prop_flat_map(|n| {
        let actions = enumerate_actions(n);
        (proptest::sample::select(actions), mask_of(n))
    })
}

/// Longest vacant run by exhaustive search over all runs, lowest start first.
fn free_block_oracle(theta: SubbandMask) -> SubbandMask {
    let n = theta.len();
    let mut best = SubbandMask::empty(n);
    for len in (1..=n).rev() {
        for start in 0..=n - len {
            if (start..start + len).all(|i| !theta.get(i)) {
                best = SubbandMask::run(n, start, len);
                return best;
            }
        }
    }
    best
}

proptest! {
    #[test]
    fn reward_stays_in_unit_interval((a, theta) in scene(), b1 in 0.0f64..10.0, gap in 0.01f64..10.0) {
        let params = RewardParams { beta1: b1, beta2: b1 + gap, ..RewardParams::default() };
        let r = reward(a, theta, &params).unwrap();
        prop_assert!((0.0..=1.0).contains(&r), "reward {}", r);
    }

    #[test]
    fn collisions_zero_the_reward((a, theta) in scene()) {
        let nc = count_collisions(a, theta).unwrap();
        let r = reward(a, theta, &RewardParams::default()).unwrap();
        prop_assert_eq!(nc, (0..a.len()).filter(|&i| a.get(i) && theta.get(i)).count());
        if nc > 0 {
            prop_assert_eq!(r, 0.0);
        } else {
            prop_assert!(r > 0.0);
        }
    }

    #[test]
    fn free_block_never_overlaps_interference(theta in (1usize..=10).prop_flat_map(mask_of)) {
        let block = largest_free_block(theta);
        prop_assert_eq!(block.and(&theta).count_ones(), 0);
        prop_assert_eq!(block, free_block_oracle(theta));
        if !block.is_empty() {
            prop_assert!(block.is_contiguous_run());
        }
    }

    #[test]
    fn free_block_action_is_perfect(theta in (1usize..=10).prop_flat_map(mask_of)) {
        let block = largest_free_block(theta);
        prop_assume!(!block.is_empty());
        prop_assert_eq!(count_missed_opportunities(block, theta).unwrap(), 0);
        prop_assert_eq!(reward(block, theta, &RewardParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn missed_opportunities_bounded_by_free_block((a, theta) in scene()) {
        let nmo = count_missed_opportunities(a, theta).unwrap();
        prop_assert!(nmo <= largest_free_block(theta).count_ones());
    }

    #[test]
    fn mask_text_round_trips(m in (1usize..=32).prop_flat_map(|n| {
        let top = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
        (Just(n), 0..=top)
    }).prop_map(|(n, b)| SubbandMask::from_bits(n, b))) {
        let back: SubbandMask = m.to_bit_string().parse().unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn mismatched_widths_are_errors() {
    let a = SubbandMask::full(5);
    let theta = SubbandMask::empty(4);
    assert!(count_collisions(a, theta).is_err());
    assert!(count_missed_opportunities(a, theta).is_err());
}
