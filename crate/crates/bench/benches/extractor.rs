use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, criterion_group, criterion_main};
use diqrand_bench::filler_bytes;
use diqrand_core::extractor::{Backend, BitString, ExtractorParams, field_mul, modulus, one_bit_extract};
use diqrand_core::reference;

fn field_multiplication(c: &mut Criterion) {
    let mut g = c.benchmark_group("gf2_mul");
    for l in [64u32, 315, 511] {
        let m = modulus(l).unwrap();
        let limbs = (l as usize).div_ceil(64);
        let mask = |mut v: Vec<u64>| {
            if l % 64 != 0 {
                v[limbs - 1] &= (1u64 << (l % 64)) - 1;
            }
            v
        };
        let words = |salt| {
            filler_bytes(8 * limbs, salt)
                .chunks(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>()
        };
        let (a, b) = (mask(words(1)), mask(words(2)));
        for (name, backend) in [("auto", Backend::Auto), ("software", Backend::Software)] {
            g.bench_with_input(BenchmarkId::new(name, l), &l, |bch, _| {
                bch.iter(|| field_mul(black_box(&a), black_box(&b), &m, backend))
            });
        }
    }
    g.finish();
}

fn one_bit(c: &mut Criterion) {
    // Full-size instance-1 input: 2·n_budget bits, one field element per 315 bits.
    let p = ExtractorParams::new(2 * reference::TRIAL_BUDGETS[0], 512, 0.2 * reference::EPSILON).unwrap();
    let input = BitString::from_bytes(&filler_bytes(p.m.div_ceil(8) as usize, 3), p.m as usize).unwrap();
    let slice = BitString::from_bytes(&filler_bytes(p.w.div_ceil(8) as usize, 4), p.w as usize).unwrap();
    let mut g = c.benchmark_group("one_bit_extract");
    g.sample_size(10);
    g.bench_function("instance1_input", |b| {
        b.iter(|| one_bit_extract(black_box(&input), &slice).unwrap())
    });
    g.finish();
}

criterion_group!(benches, field_multiplication, one_bit);
criterion_main!(benches);
