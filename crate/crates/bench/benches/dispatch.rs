use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scalemoe::dynrouter::moe_forward;
use scalemoe::moefy::EXPERT_GRID;
use scalemoe::ForwardMode;
use scalemoe_bench::{first_layer, inputs, routed_fixture};
use std::hint::black_box;

fn dispatch(c: &mut Criterion) {
    let mut group = c.benchmark_group("dispatch");
    // 64 rows: the token count of the finest 8×8 scale.
    let x = inputs(64, 64, 7);
    for (e, size) in EXPERT_GRID {
        let model = routed_fixture(e, 1);
        let layer = first_layer(&model);
        let label = format!("{e}x{size}");
        group.bench_with_input(BenchmarkId::new("dense", &label), &x, |b, x| {
            b.iter(|| moe_forward(layer, black_box(x), None, ForwardMode::Dense, None, None).unwrap())
        });
        for tau in [0.0, 0.5, 0.9] {
            group.bench_with_input(BenchmarkId::new(format!("dynk_tau{tau}"), &label), &x, |b, x| {
                b.iter(|| moe_forward(layer, black_box(x), Some(tau), ForwardMode::DynkMax, None, None).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, dispatch);
criterion_main!(benches);
