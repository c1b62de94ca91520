//! Rayon against the sequential fallback on the batch paths that use it.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fybrr_core::clock::Clock;
use fybrr_core::crypto::{content_id, open, random_nonce, seal, PeerIdentity, SealedBox};
use fybrr_core::par::{self, Strategy};
use fybrr_core::store::{BlockStore, Chunk};

const STRATEGIES: [(&str, Strategy); 2] = [("rayon", Strategy::Auto), ("sequential", Strategy::Sequential)];

fn random_blocks(n: usize, size: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let mut b = vec![0u8; size];
            rng.fill(&mut b[..]);
            b
        })
        .collect()
}

fn store_audit(c: &mut Criterion) {
    let mut g = c.benchmark_group("store_audit");
    for (n, size) in [(64, 64 * 1024), (512, 64 * 1024)] {
        let store = BlockStore::memory(Clock::manual(0));
        for b in random_blocks(n, size) {
            store.put_block(&Chunk::new(b)).unwrap();
        }
        g.throughput(Throughput::Bytes((n * size) as u64));
        for (name, strategy) in STRATEGIES {
            g.bench_with_input(BenchmarkId::new(name, n), &store, |bench, store| {
                bench.iter(|| black_box(store.audit(strategy)))
            });
        }
    }
    g.finish();
}

fn chunk_hashing(c: &mut Criterion) {
    let mut g = c.benchmark_group("chunk_hashing");
    let blocks = random_blocks(256, 16 * 1024);
    g.throughput(Throughput::Bytes((256 * 16 * 1024) as u64));
    for (name, strategy) in STRATEGIES {
        g.bench_function(name, |bench| {
            bench.iter(|| black_box(par::map(strategy, &blocks, |b| content_id(b))))
        });
    }
    g.finish();
}

fn open_batch(c: &mut Criterion) {
    let mut g = c.benchmark_group("open_batch");
    let (a, b) = (PeerIdentity::generate(), PeerIdentity::generate());
    let boxes: Vec<SealedBox> = random_blocks(128, 4096)
        .iter()
        .map(|m| seal(m, &a, b.enc_public(), random_nonce()).unwrap())
        .collect();
    g.throughput(Throughput::Elements(boxes.len() as u64));
    for (name, strategy) in STRATEGIES {
        g.bench_function(name, |bench| {
            bench.iter(|| par::all(strategy, &boxes, |s| open(s, &b, a.enc_public()).is_ok()))
        });
    }
    g.finish();
}

criterion_group!(benches, store_audit, chunk_hashing, open_batch);
criterion_main!(benches);
