//! Timings for the numerical kernels behind each experiment.

use boundlim_core::diffusion::{qmle_psd, simulate_path, CoefficientMap, DiffusionModel, QmleOptions};
use boundlim_core::gig::{gig_limit_spec, gig_mle, sample_gamma_truth, GigBounds, MleOptions};
use boundlim_core::limitfield::{argmax, draw, ArgmaxOptions};
use boundlim_core::localsets::{build_finite_t, hausdorff_gap, LocalSet, RateSchedule, ThetaSpace};
use boundlim_core::mixedmodel::{pqmle_fit, CovariateLaw, FitOptions, LmmBoxes, LmmData, LmmTruth, PenaltyConfig};
use boundlim_core::seed::rng_for;
use boundlim_core::specfun::bessel_k;
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;

fn specfun(c: &mut Criterion) {
    c.bench_function("bessel_k grid", |b| {
        b.iter(|| {
            let mut s = 0.0;
            for nu in [0.1, 0.5, 1.0, 2.5, 4.0] {
                for x in [0.01, 0.1, 1.0, 5.0, 20.0] {
                    s += bessel_k(black_box(nu), black_box(x)).unwrap();
                }
            }
            s
        })
    });
}

fn gig(c: &mut Criterion) {
    let data = sample_gamma_truth(3.0, 1.0, 2000, &mut rng_for(1, "bench/gig", 0)).unwrap();
    let bounds = GigBounds::default();
    c.bench_function("gig_mle n=2000", |b| {
        b.iter(|| gig_mle(black_box(&data), &bounds, &MleOptions::default()).unwrap())
    });
    let spec = gig_limit_spec(3.0, 1.0).unwrap();
    let d = draw(&spec, &mut rng_for(1, "bench/gig-limit", 0)).unwrap();
    c.bench_function("gig limit argmax", |b| {
        b.iter(|| argmax(&spec, black_box(&d), &ArgmaxOptions::default()).unwrap())
    });
}

fn diffusion(c: &mut Criterion) {
    let model = DiffusionModel::new(
        CoefficientMap::Polynomial { order: 2 },
        vec![0.0],
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        1.0,
        10.0,
        vec![0.0],
    )
    .unwrap();
    let path = simulate_path(&model, 1000, 10, &mut rng_for(1, "bench/diffusion", 0)).unwrap();
    c.bench_function("qmle_psd n=1000", |b| {
        b.iter(|| qmle_psd(black_box(&path), &model, &QmleOptions::default()).unwrap())
    });
}

fn mixedmodel(c: &mut Criterion) {
    let truth = LmmTruth::default().theta().unwrap();
    let data = LmmData::simulate(&truth, &CovariateLaw::default(), 500, &mut rng_for(1, "bench/lmm", 0)).unwrap();
    let boxes = LmmBoxes::default();
    for q in [0.4, 1.0] {
        let pen = PenaltyConfig {
            q,
            r: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        };
        c.bench_function(&format!("pqmle_fit n=500 q={q}"), |b| {
            b.iter(|| pqmle_fit(black_box(&data), &pen, &boxes, &FitOptions::default()).unwrap())
        });
    }
}

fn geometry(c: &mut Criterion) {
    let space = ThetaSpace::PsdBall { order: 2, radius: 10.0 };
    let rate = RateSchedule::new(vec![1.0, 1.0, 2.0]).unwrap();
    let set_t = build_finite_t(&[1.0, 0.0, 0.0], &rate, 1e4, &space).unwrap();
    let limit = LocalSet::parabolic(1.0).unwrap();
    c.bench_function("parabolic gap 1000 points", |b| {
        b.iter(|| hausdorff_gap(&set_t, &limit, 4.0, 1000, &mut rng_for(1, "bench/gap", 0)).unwrap())
    });
}

criterion_group!(benches, specfun, gig, diffusion, mixedmodel, geometry);
criterion_main!(benches);
