//! Forward and forward+backward timings for each vector-input fusion op
//! at a fixed width, so relative costs across the zoo stay visible.

use criterion::{criterion_group, criterion_main, Criterion};
use mmfuse::encoders::Rep;
use mmfuse::fusion::{Fusion, FusionSpec, GateVariant};
use mmfuse::{ParamSet, Tape};
use ndarray::{ArrayD, IxDyn};
use std::hint::black_box;

const DIM: usize = 8;

fn specs() -> Vec<(&'static str, FusionSpec)> {
    vec![
        ("lf", FusionSpec::Lf),
        ("tf", FusionSpec::Tf { cap: 1_000_000 }),
        (
            "lrtf",
            FusionSpec::Lrtf {
                rank: 4,
                out_dim: DIM,
            },
        ),
        ("mi-matrix", FusionSpec::MiMatrix { out_dim: DIM }),
        ("mi-vector", FusionSpec::MiVector),
        ("mi-scalar", FusionSpec::MiScalar),
        ("film", FusionSpec::Film { hidden: None }),
        (
            "nlgate",
            FusionSpec::NlGate {
                variant: GateVariant::default(),
            },
        ),
    ]
}

fn inputs() -> Vec<ArrayD<f64>> {
    (0..2)
        .map(|m| {
            ArrayD::from_shape_fn(IxDyn(&[DIM]), |ix| {
                ((m * DIM + ix[0]) as f64 * 0.37).sin()
            })
        })
        .collect()
}

fn forward(fusion: &Fusion, params: &ParamSet, xs: &[ArrayD<f64>], backward: bool) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let reps: Vec<Rep> = xs.iter().map(|x| Rep::Vector(tape.leaf(x.clone()))).collect();
    let out = fusion.fuse(&mut tape, &bound.root(), &reps).expect("fuse");
    let loss = tape.mean(out);
    if backward {
        black_box(tape.backward(loss));
    }
    tape.scalar_value(loss)
}

fn bench_fusion(c: &mut Criterion) {
    let xs = inputs();
    for (mode, backward) in [("forward", false), ("forward+backward", true)] {
        let mut group = c.benchmark_group(format!("fuse/{mode}"));
        for (tag, spec) in specs() {
            let fusion = Fusion::new(spec, &[DIM, DIM]).expect("fusion");
            let params = fusion.init_params(11);
            group.bench_function(tag, |b| {
                b.iter(|| forward(&fusion, &params, black_box(&xs), backward))
            });
        }
        group.finish();
    }
}

criterion_group!(benches, bench_fusion);
criterion_main!(benches);
