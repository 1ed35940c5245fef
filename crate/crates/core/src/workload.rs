// SPDX-License-Identifier: Apache-2.0

//! Seeded request workloads for the sample application.

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::message::Request;
use crate::sample;

/// `n` GET requests against `/users`: `round(n * fail_fraction)` of them
/// ask for unknown ids (`ghost-<k>`) and trigger the null dereference, the
/// rest ask for seeded users. Identical inputs give identical output.
pub fn gen_workload(seed: u64, n: usize, fail_fraction: f64) -> Vec<Request> {
    let fraction = if fail_fraction.is_finite() { fail_fraction.clamp(0.0, 1.0) } else { 0.0 };
    let failing = ((n as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_failing = vec![false; n];
    for i in index::sample(&mut rng, n, failing.min(n)) {
        is_failing[i] = true;
    }
    let ids = sample::valid_ids();
    let mut ghost = 0;
    is_failing
        .into_iter()
        .map(|fail| {
            let id = if fail {
                ghost += 1;
                format!("ghost-{ghost}")
            } else {
                ids.choose(&mut rng).expect("sample has users").clone()
            };
            Request::new("GET", "/users").with_query("id", id)
        })
        .collect()
}
